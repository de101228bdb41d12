"""
Score-level fusion: normalization, soft voting, max voting and error overlap.

Score vectors may be single [2] vectors or batches [B, 2]; every function
returns the same leading shape it was given.
"""

from dataclasses import dataclass
from itertools import combinations
from typing import Dict, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from engine import functional as F
from engine.errors import ContractError, DimensionError, NumericError
from engine.tensor import Tensor
from models.base import BONA_FIDE, MORPH

FUSION_STRATEGIES = ("soft_vote", "max_vote", "score_ffn", "score_super_learner", "feature_super_learner")


@dataclass
class ScoreVector:
    """One member's output: raw logits and their softmax."""

    model_id: str
    logits: np.ndarray
    probs: np.ndarray

    @classmethod
    def from_logits(cls, model_id: str, logits) -> "ScoreVector":
        logits = np.asarray(logits, dtype=np.float64)
        return cls(model_id, logits, normalize_scores(logits))

    @property
    def morph_score(self) -> np.ndarray:
        return self.probs[..., MORPH]


ScoreInput = Union[ScoreVector, np.ndarray, Sequence[float]]


def normalize_scores(logits) -> np.ndarray:
    """Softmax over the class axis."""
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise NumericError(f"cannot normalize non-finite logits {logits}")
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def _prob_stack(score_vectors: Sequence[ScoreInput]) -> np.ndarray:
    if len(score_vectors) == 0:
        raise ContractError("fusion needs at least one score vector")
    probs = [sv.probs if isinstance(sv, ScoreVector) else np.asarray(sv, dtype=np.float64)
             for sv in score_vectors]
    shapes = {p.shape for p in probs}
    if len(shapes) != 1:
        raise DimensionError(f"score vectors have mixed shapes {sorted(shapes)}")
    return np.stack(probs)


def _check_weights(weights: Optional[Sequence[float]], n: int) -> np.ndarray:
    if weights is None:
        return np.full(n, 1.0 / n)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (n,) or np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-9:
        raise ContractError(f"weights must be {n} non-negative values summing to 1, got {weights}")
    return weights


def soft_vote(score_vectors: Sequence[ScoreInput], weights: Optional[Sequence[float]] = None) -> np.ndarray:
    """Elementwise (weighted) mean of the members' probabilities."""
    probs = _prob_stack(score_vectors)
    if weights is None:
        return np.mean(probs, axis=0)
    return np.tensordot(_check_weights(weights, len(probs)), probs, axes=1)


def soft_vote_tensor(probs: Sequence[Tensor], weights: Optional[Sequence[float]] = None) -> Tensor:
    """Differentiable soft vote over member probability tensors."""
    if len(probs) == 0:
        raise ContractError("fusion needs at least one score vector")
    weights = _check_weights(weights, len(probs))
    fused = F.mul_scalar(probs[0], weights[0])
    for w, p in zip(weights[1:], probs[1:]):
        fused = F.add(fused, F.mul_scalar(p, w))
    return fused


def vote_share(score_vectors: Sequence[ScoreInput]) -> np.ndarray:
    """Fraction of members voting each class, same shape as one score vector."""
    probs = _prob_stack(score_vectors)
    votes = np.argmax(probs, axis=-1)
    morph = np.mean(votes == MORPH, axis=0)
    return np.stack([1.0 - morph, morph], axis=-1)


def max_vote(score_vectors: Sequence[ScoreInput]):
    """
    Majority class of the members' argmax votes; a tie goes to morph.

    Returns an int for single vectors, an int array for batches.
    """
    share = vote_share(score_vectors)[..., MORPH]
    labels = np.where(share >= 0.5, MORPH, BONA_FIDE)
    return int(labels) if labels.ndim == 0 else labels


def detection_overlap(correct_by_model: Mapping[str, Sequence[bool]]) -> Dict[Tuple[str, ...], int]:
    """
    For every non-empty subset of models, the number of samples detected by
    exactly that subset (the remaining models miss them).

    Args:
        correct_by_model: model name -> per-sample correctness flags
    """
    names = list(correct_by_model)
    flags = np.stack([np.asarray(correct_by_model[n], dtype=bool) for n in names])
    overlap: Dict[Tuple[str, ...], int] = {}
    for size in range(1, len(names) + 1):
        for subset in combinations(range(len(names)), size):
            inside = np.all(flags[list(subset)], axis=0)
            others = [i for i in range(len(names)) if i not in subset]
            outside = ~np.any(flags[others], axis=0) if others else np.ones(flags.shape[1], dtype=bool)
            overlap[tuple(names[i] for i in subset)] = int(np.sum(inside & outside))
    return overlap


def missed_by_all(correct_by_model: Mapping[str, Sequence[bool]]) -> int:
    flags = np.stack([np.asarray(v, dtype=bool) for v in correct_by_model.values()])
    return int(np.sum(~np.any(flags, axis=0)))
