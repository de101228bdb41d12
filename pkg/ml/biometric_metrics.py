"""
Morph-detection metrics: ROC AUC, APCER/BPCER operating points, D-EER and
the DET curve.

Decision rule everywhere: score >= t  =>  morph.

    APCER(t) = #(morph with score < t) / #morph        (missed attacks)
    BPCER(t) = #(bona fide with score >= t) / #bona fide (false alarms)

Thresholds are empirical: the sweep is -inf, every distinct score in
ascending order, then +inf. No interpolation.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.stats import rankdata

from engine.errors import DimensionError, MetricError
from models.base import BONA_FIDE, MORPH

logger = logging.getLogger(__name__)

DEFAULT_TARGETS = (0.01, 0.1)
DET_COLUMNS = ["threshold", "apcer", "bpcer"]


@dataclass(frozen=True)
class LabeledScores:
    """Detector scores (higher = more morph-like) with their true labels."""

    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        labels = np.asarray(self.labels).reshape(-1)
        if len(scores) != len(labels):
            raise DimensionError(f"{len(scores)} scores for {len(labels)} labels")
        if not np.all(np.isin(labels, (BONA_FIDE, MORPH))):
            raise MetricError(f"labels must be {BONA_FIDE} (bona fide) or {MORPH} (morph)")
        if not np.all(np.isfinite(scores)):
            raise MetricError(f"{int(np.sum(~np.isfinite(scores)))} scores are not finite")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "labels", labels.astype(np.int64))

    @property
    def morph(self) -> np.ndarray:
        return self.scores[self.labels == MORPH]

    @property
    def bona_fide(self) -> np.ndarray:
        return self.scores[self.labels == BONA_FIDE]

    def counts(self) -> Dict[str, int]:
        return {"bona_fide": int(np.sum(self.labels == BONA_FIDE)), "morph": int(np.sum(self.labels == MORPH))}

    def require_both(self) -> None:
        counts = self.counts()
        if counts["bona_fide"] == 0 or counts["morph"] == 0:
            raise MetricError(f"both classes are required, got {counts}")


def roc_auc(ls: LabeledScores) -> float:
    """P(random morph outscores random bona fide), ties counted 1/2 (Mann-Whitney U)."""
    ls.require_both()
    n_m, n_b = len(ls.morph), len(ls.bona_fide)
    ranks = rankdata(ls.scores)
    u = np.sum(ranks[ls.labels == MORPH]) - n_m * (n_m + 1) / 2.0
    return float(u / (n_m * n_b))


def apcer_bpcer_at_threshold(ls: LabeledScores, t: float) -> Tuple[float, float]:
    ls.require_both()
    return float(np.mean(ls.morph < t)), float(np.mean(ls.bona_fide >= t))


def threshold_sweep(ls: LabeledScores) -> np.ndarray:
    return np.concatenate([[-np.inf], np.unique(ls.scores), [np.inf]])


@dataclass(frozen=True)
class DetPoint:
    threshold: float
    apcer: float
    bpcer: float


def det_curve(ls: LabeledScores) -> List[DetPoint]:
    """
    One point per distinct score plus the two sentinels, ascending threshold.

    APCER is non-decreasing and BPCER non-increasing along the curve; it
    starts at (APCER 0, BPCER 1) and ends at (APCER 1, BPCER 0).
    """
    ls.require_both()
    thresholds = threshold_sweep(ls)
    morph = np.sort(ls.morph)
    bona = np.sort(ls.bona_fide)
    apcer = np.searchsorted(morph, thresholds, side="left") / len(morph)
    bpcer = (len(bona) - np.searchsorted(bona, thresholds, side="left")) / len(bona)
    return [DetPoint(float(t), float(a), float(b)) for t, a, b in zip(thresholds, apcer, bpcer)]


def det_frame(points: Sequence[DetPoint]) -> pd.DataFrame:
    return pd.DataFrame([(p.threshold, p.apcer, p.bpcer) for p in points], columns=DET_COLUMNS)


@dataclass(frozen=True)
class OperatingPoint:
    """
    Attributes:
        value: the reported error rate (APCER or BPCER)
        threshold: the chosen decision threshold
        achieved: the constrained rate at that threshold (<= target)
        warning: the target is finer than one sample of the constrained class
    """

    value: float
    threshold: float
    achieved: float
    warning: bool = False


def _resolution_warning(kind: str, target: float, count: int) -> bool:
    if count * target < 1.0:
        logger.warning(f"{kind} target {target:g} is below one sample in {count}; "
                       f"reporting the extreme threshold")
        return True
    return False


def apcer_operating_point(ls: LabeledScores, bpcer_target: float) -> OperatingPoint:
    """Lowest threshold with BPCER <= target, and the APCER there."""
    points = det_curve(ls)
    warning = _resolution_warning("BPCER", bpcer_target, len(ls.bona_fide))
    chosen = next(p for p in points if p.bpcer <= bpcer_target)
    return OperatingPoint(chosen.apcer, chosen.threshold, chosen.bpcer, warning)


def bpcer_operating_point(ls: LabeledScores, apcer_target: float) -> OperatingPoint:
    """Highest threshold with APCER <= target, and the BPCER there."""
    points = det_curve(ls)
    warning = _resolution_warning("APCER", apcer_target, len(ls.morph))
    chosen = next(p for p in reversed(points) if p.apcer <= apcer_target)
    return OperatingPoint(chosen.bpcer, chosen.threshold, chosen.apcer, warning)


def apcer_at_bpcer(ls: LabeledScores, bpcer_target: float = 0.01) -> float:
    return apcer_operating_point(ls, bpcer_target).value


def bpcer_at_apcer(ls: LabeledScores, apcer_target: float = 0.01) -> float:
    return bpcer_operating_point(ls, apcer_target).value


def deer(ls: LabeledScores) -> Tuple[float, float]:
    """
    Detection equal error rate.

    Returns:
        (rate, threshold) at the sweep point minimizing |APCER - BPCER|,
        rate = (APCER + BPCER) / 2; ties go to the lower threshold
    """
    points = det_curve(ls)
    gaps = np.array([abs(p.apcer - p.bpcer) for p in points])
    best = points[int(np.argmin(gaps))]
    return (best.apcer + best.bpcer) / 2.0, best.threshold


def _json_float(value: float):
    """JSON has no infinities; sentinel thresholds are written as strings."""
    if np.isfinite(value):
        return float(value)
    return "inf" if value > 0 else "-inf"


@dataclass
class EvalReport:
    auc: float
    apcer_at_bpcer: Dict[float, float]
    bpcer_at_apcer: Dict[float, float]
    deer: float
    deer_threshold: float
    det: List[DetPoint] = field(default_factory=list)
    counts: Dict[str, int] = field(default_factory=dict)
    warnings: List[str] = field(default_factory=list)
    accuracy: Optional[float] = None

    def to_dict(self) -> Dict:
        """Metric map for the JSON report (DET points go to their own CSV)."""
        out = {
            "auc": self.auc,
            "apcer_at_bpcer": {f"{k:g}": v for k, v in self.apcer_at_bpcer.items()},
            "bpcer_at_apcer": {f"{k:g}": v for k, v in self.bpcer_at_apcer.items()},
            "deer": self.deer,
            "deer_threshold": _json_float(self.deer_threshold),
            "counts": self.counts,
            "warnings": self.warnings,
            "decision_rule": "score >= threshold => morph",
        }
        if self.accuracy is not None:
            out["accuracy"] = self.accuracy
        return out

    def det_frame(self) -> pd.DataFrame:
        return det_frame(self.det)


def evaluate_scores(ls: LabeledScores, targets: Sequence[float] = DEFAULT_TARGETS,
                    threshold: Optional[float] = 0.5) -> EvalReport:
    """
    Full metric set for one score set.

    Args:
        targets: BPCER anchors for APCER@BPCER and APCER anchors for BPCER@APCER
        threshold: decision threshold for the accuracy entry (None skips it)

    Raises:
        MetricError: a class is missing or a metric came out non-finite
    """
    ls.require_both()
    warnings = []
    apcer_map, bpcer_map = {}, {}
    for target in targets:
        a = apcer_operating_point(ls, target)
        b = bpcer_operating_point(ls, target)
        apcer_map[float(target)] = a.value
        bpcer_map[float(target)] = b.value
        if a.warning:
            warnings.append(f"APCER@BPCER={target:g}: fewer than {1 / target:g} bona fide samples")
        if b.warning:
            warnings.append(f"BPCER@APCER={target:g}: fewer than {1 / target:g} morph samples")
    rate, t_eer = deer(ls)
    report = EvalReport(
        auc=roc_auc(ls), apcer_at_bpcer=apcer_map, bpcer_at_apcer=bpcer_map,
        deer=rate, deer_threshold=t_eer, det=det_curve(ls), counts=ls.counts(), warnings=warnings,
    )
    if threshold is not None:
        report.accuracy = float(np.mean((ls.scores >= threshold).astype(np.int64) == ls.labels))

    values = [report.auc, report.deer, *apcer_map.values(), *bpcer_map.values()]
    if not np.all(np.isfinite(values)):
        raise MetricError(f"non-finite metric in report: {report.to_dict()}")
    logger.info(f"AUC {report.auc:.4f}, D-EER {report.deer:.4f} at t={t_eer:.4g}, "
                f"APCER@BPCER {apcer_map}, BPCER@APCER {bpcer_map}")
    return report
