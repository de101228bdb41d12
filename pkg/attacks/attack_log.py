"""
Per-example attack logs as CSV.

Columns: example_id, source, method, epsilon, steps, success, final_loss, delta_norm
"""

import logging
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np
import pandas as pd

from attacks.spec import AdvResult, AttackSpec

logger = logging.getLogger(__name__)

LOG_COLUMNS = ["example_id", "source", "method", "epsilon", "steps", "success", "final_loss", "delta_norm"]


def attack_log_frame(result: AdvResult, spec: AttackSpec, example_ids: Sequence[int],
                     source: str = "") -> pd.DataFrame:
    steps = spec.cw_steps * spec.cw_binary_steps if spec.method == "CW_L2" else \
        spec.queries if spec.method == "SQUARE" else spec.num_steps
    return pd.DataFrame({
        "example_id": np.asarray(example_ids, dtype=np.int64),
        "source": source,
        "method": spec.method,
        "epsilon": spec.epsilon,
        "steps": steps,
        "success": result.success.astype(bool),
        "final_loss": result.loss,
        "delta_norm": result.norms("l2" if spec.norm == "l2" or spec.method == "CW_L2" else "linf"),
    }, columns=LOG_COLUMNS)


def write_attack_log(frames: Iterable[pd.DataFrame], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frames = list(frames)
    log = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=LOG_COLUMNS)
    log.to_csv(path, index=False)
    logger.info(f"Wrote attack log ({len(log)} rows) to {path}")
    return path
