# ml/model_evaluation.py
"""
Detector evaluation: clean metrics plus robust metrics under each attack.

The morph score of a detector is its probability for the morph class.
"""

import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed

from attacks.registry import run_attack
from attacks.spec import AdvResult, AttackSpec
from data.rng import stream
from ml.biometric_metrics import DEFAULT_TARGETS, EvalReport, LabeledScores, evaluate_scores
from models.base import MORPH

logger = logging.getLogger(__name__)


def morph_scores(model, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    model.eval()
    chunks = [model.predict_proba(images[i:i + batch_size])[:, MORPH]
              for i in range(0, len(images), batch_size)]
    return np.concatenate(chunks) if chunks else np.zeros(0)


def evaluate_model(name: str, model, images: np.ndarray, labels: np.ndarray,
                   targets: Sequence[float] = DEFAULT_TARGETS) -> Tuple[Dict, EvalReport]:
    """
    Clean evaluation of one detector.

    Returns:
        (metric row for a summary table, full EvalReport)
    """
    report = evaluate_scores(LabeledScores(morph_scores(model, images), labels), targets)
    row = {"model": name, "attack": "clean", "auc": report.auc, "deer": report.deer,
           "accuracy": report.accuracy}
    for t, v in report.apcer_at_bpcer.items():
        row[f"apcer@bpcer={t:g}"] = v
    for t, v in report.bpcer_at_apcer.items():
        row[f"bpcer@apcer={t:g}"] = v
    return row, report


def evaluate_under_attack(name: str, model, images: np.ndarray, labels: np.ndarray,
                          specs: Sequence[AttackSpec], seed: int, surrogate=None,
                          targets: Sequence[float] = DEFAULT_TARGETS,
                          workers: int = 1) -> List[Tuple[Dict, EvalReport, AdvResult]]:
    """
    Robust evaluation: craft each attack (white-box against ``model`` unless a
    surrogate is given) and score the adversarial images with ``model``.
    """
    crafting_target = surrogate if surrogate is not None else model

    def one(spec: AttackSpec):
        rng = stream(seed, "eval", name, spec.label())
        return spec, run_attack(crafting_target, images, labels, spec, rng)

    crafted = Parallel(n_jobs=workers, backend="threading")(delayed(one)(s) for s in specs)
    rows = []
    for spec, result in crafted:
        row, report = evaluate_model(name, model, result.x_adv, labels, targets)
        row["attack"] = spec.label()
        row["attack_success"] = result.success_rate
        logger.info(f"{name} under {spec.label()}: AUC {report.auc:.4f}, D-EER {report.deer:.4f}, "
                    f"success {result.success_rate:.3f}")
        rows.append((row, report, result))
    return rows


def compare_models(rows: Sequence[Dict], key: str = "auc") -> Optional[str]:
    """Name of the best row by ``key`` (higher is better)."""
    if not rows:
        return None
    best = max(rows, key=lambda r: r[key])
    return best["model"]
