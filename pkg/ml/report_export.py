# ml/report_export.py
"""
Report files: JSON metric maps, CSV tables and score files.

JSON is written with sorted keys and a trailing newline so reruns of the
same experiment produce byte-identical files.

Score CSV columns: example_id, score, label  (label 0 = bona fide, 1 = morph)
"""

import json
import logging
from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np
import pandas as pd

from engine.errors import FormatError, LoadError
from ml.biometric_metrics import LabeledScores

logger = logging.getLogger(__name__)

SCORE_COLUMNS = ["example_id", "score", "label"]

PathLike = Union[str, Path]


def write_json(payload: Dict, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True, ensure_ascii=False)
        f.write("\n")
    logger.info(f"Saved: {path}")
    return path


def write_csv(frame: pd.DataFrame, path: PathLike, index: bool = False) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=index, float_format="%.10g")
    logger.info(f"Saved: {path} ({len(frame)} rows)")
    return path


def score_frame(example_ids, scores: np.ndarray, labels: np.ndarray) -> pd.DataFrame:
    return pd.DataFrame({
        "example_id": np.asarray(example_ids, dtype=np.int64),
        "score": np.asarray(scores, dtype=np.float64),
        "label": np.asarray(labels, dtype=np.int64),
    }, columns=SCORE_COLUMNS)


def write_scores(example_ids, scores: np.ndarray, labels: np.ndarray, path: PathLike) -> Path:
    return write_csv(score_frame(example_ids, scores, labels), path)


def read_scores(path: PathLike) -> Tuple[np.ndarray, LabeledScores]:
    """
    Load a score CSV.

    Returns:
        (example ids, LabeledScores)

    Raises:
        LoadError: the file does not exist
        FormatError: missing columns or unparseable values
    """
    path = Path(path)
    if not path.exists():
        raise LoadError(f"score file not found: {path}")
    try:
        df = pd.read_csv(path)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise FormatError(f"{path}: cannot parse score CSV: {e}") from e

    missing = [c for c in SCORE_COLUMNS if c not in df.columns]
    if missing:
        raise FormatError(f"{path}: missing columns {missing}, expected {SCORE_COLUMNS}")
    try:
        ids = df["example_id"].to_numpy(dtype=np.int64)
        scores = df["score"].to_numpy(dtype=np.float64)
        labels = df["label"].to_numpy(dtype=np.int64)
    except (ValueError, TypeError) as e:
        raise FormatError(f"{path}: non-numeric values in score CSV: {e}") from e

    logger.info(f"Loaded {len(df)} scores from {path}")
    return ids, LabeledScores(scores, labels)
