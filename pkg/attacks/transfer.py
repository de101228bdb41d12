"""
Black-box transfer evaluation.

Examples are crafted against each source (a model, an Ensemble, or a list of
surrogate models) and then scored on every target. Entry (i, j) of the
matrix is the accuracy of target j on the examples crafted against source i.
"""

import logging
from typing import Dict, Mapping, Optional, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from attacks.attack_log import attack_log_frame
from attacks.registry import run_attack
from attacks.spec import AdvResult, AttackSpec
from data.rng import stream
from engine.errors import ContractError

logger = logging.getLogger(__name__)

CLEAN_ROW = "clean"


def clean_accuracy(targets: Mapping[str, object], images: np.ndarray, labels: np.ndarray) -> Dict[str, float]:
    labels = np.asarray(labels)
    out = {}
    for name, target in targets.items():
        target.eval()
        out[name] = float(np.mean(target.predict(images) == labels))
    return out


def craft_from_sources(sources: Mapping[str, object], images: np.ndarray, labels: np.ndarray,
                       spec: AttackSpec, seed: int, workers: int = 1) -> Dict[str, AdvResult]:
    """One attack run per source; each source gets its own random stream."""
    names = list(sources)

    def craft(name: str) -> Tuple[str, AdvResult]:
        rng = stream(seed, "transfer", spec.method, name)
        return name, run_attack(sources[name], images, labels, spec, rng)

    results = Parallel(n_jobs=workers, backend="threading")(delayed(craft)(name) for name in names)
    return dict(results)


def transfer_matrix(sources: Mapping[str, object], targets: Mapping[str, object], images: np.ndarray,
                    labels: np.ndarray, spec: AttackSpec, seed: int = 0, workers: int = 1,
                    include_clean: bool = False,
                    crafted: Optional[Dict[str, AdvResult]] = None) -> pd.DataFrame:
    """
    Robust accuracy of every target on examples crafted against every source.

    Args:
        sources: name -> attack target (model, Ensemble or list of models)
        targets: name -> model or Ensemble that is only queried for predictions
        include_clean: prepend a row with the targets' clean accuracy
        crafted: reuse attack results computed earlier (keyed by source name)

    Returns:
        DataFrame indexed by source name with one column per target
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    if len(images) == 0:
        raise ContractError("transfer matrix needs a non-empty dataset")
    if not sources or not targets:
        raise ContractError("transfer matrix needs at least one source and one target")

    if crafted is None:
        crafted = craft_from_sources(sources, images, labels, spec, seed, workers)
    for target in targets.values():
        target.eval()

    rows = {}
    for source, result in crafted.items():
        rows[source] = {name: float(np.mean(target.predict(result.x_adv) == labels))
                        for name, target in targets.items()}
        logger.info(f"{spec.label()} from {source}: " +
                    ", ".join(f"{name}={acc:.3f}" for name, acc in rows[source].items()))
    matrix = pd.DataFrame.from_dict(rows, orient="index", columns=list(targets))
    if include_clean:
        clean = pd.DataFrame([clean_accuracy(targets, images, labels)], index=[CLEAN_ROW])
        matrix = pd.concat([clean, matrix])
    matrix.index.name = "source"
    return matrix


def transfer_logs(crafted: Mapping[str, AdvResult], spec: AttackSpec, example_ids) -> pd.DataFrame:
    frames = [attack_log_frame(result, spec, example_ids, source=name) for name, result in crafted.items()]
    return pd.concat(frames, ignore_index=True)
