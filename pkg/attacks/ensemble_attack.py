"""
Transferable examples from an ensemble of surrogate models.

Maximizes, per example,

    J(x*) = -log( sum_i alpha_i * p_i(y | x*) ) - lambda * ||x* - x||_2

by sign-gradient ascent with step eps / steps, clipping to [0, 1] and the
l-inf eps-ball. An iterate is kept only when J does not decrease; otherwise
that example's step is halved. ``literal_sign`` adds the distance term
instead of subtracting it.
"""

import logging
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from attacks.gradient import advance, flat_norm
from attacks.spec import AdvResult, AttackSpec
from engine import functional as F
from engine.errors import ContractError
from engine.tensor import Tensor, no_grad
from fusion.scores import soft_vote_tensor

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-300


def _weights(models: Sequence, spec: AttackSpec) -> np.ndarray:
    if spec.weights is None:
        return np.full(len(models), 1.0 / len(models))
    if len(spec.weights) != len(models):
        raise ContractError(f"{len(spec.weights)} ensemble weights for {len(models)} models")
    return np.asarray(spec.weights, dtype=np.float64)


def ensemble_objective(models: Sequence, weights: np.ndarray, x_adv, x: np.ndarray, y: np.ndarray,
                       distance_weight: float, literal_sign: bool = False) -> Tensor:
    """Per-example objective J [B] (differentiable in x_adv)."""
    probs = [F.softmax(m.forward(x_adv), axis=-1) for m in models]
    mixed = F.clamp(soft_vote_tensor(probs, weights), lo=PROB_FLOOR)
    attack_term = F.neg(F.log(F.pick(mixed, y)))
    delta = F.sub(x_adv, Tensor(x))
    distance = F.mul_scalar(F.l2_norm(delta, axes=tuple(range(1, x.ndim))), distance_weight)
    return F.add(attack_term, distance) if literal_sign else F.sub(attack_term, distance)


def ensemble_attack(models: Sequence, x: np.ndarray, y: np.ndarray, spec: AttackSpec,
                    rng: Optional[np.random.Generator] = None) -> AdvResult:
    """
    Returns:
        AdvResult whose ``success`` refers to the weighted ensemble and whose
        ``fooled`` maps each model name to its own prediction flips
    """
    if len(models) == 0:
        raise ContractError("ensemble attack needs at least one model")
    y = np.asarray(y)
    weights = _weights(models, spec)
    lam, literal = spec.distance_weight, spec.literal_sign
    steps = np.full(len(x), spec.epsilon / spec.num_steps)
    x_t = x.copy()

    def value_and_grad(images: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        xt = Tensor(images, requires_grad=True)
        objective = ensemble_objective(models, weights, xt, x, y, lam, literal)
        F.sum(objective).backward()
        return objective.data.copy(), xt.grad

    def value(images: np.ndarray) -> np.ndarray:
        with no_grad():
            return ensemble_objective(models, weights, Tensor(images), x, y, lam, literal).data

    current, grad = value_and_grad(x_t)
    trace = [current.copy()]
    saw_gradient = flat_norm(grad, "linf") > 0
    per_example = (-1,) + (1,) * (x.ndim - 1)
    for step in range(spec.num_steps):
        candidate = advance(x_t, x, np.sign(grad), steps.reshape(per_example), spec.epsilon, "linf")
        candidate_value = value(candidate)
        keep = candidate_value >= current
        x_t[keep] = candidate[keep]
        current[keep] = candidate_value[keep]
        steps[~keep] /= 2.0
        trace.append(current.copy())
        if step + 1 < spec.num_steps:
            _, grad = value_and_grad(x_t)
            saw_gradient |= flat_norm(grad, "linf") > 0

    probs = np.tensordot(weights, np.stack([m.predict_proba(x_t) for m in models]), axes=1)
    fooled: Dict[str, np.ndarray] = {
        getattr(m, "name", f"model_{i}"): m.predict(x_t) != y for i, m in enumerate(models)
    }
    logger.debug(f"Ensemble attack: per-model fooling rates "
                 f"{ {k: float(v.mean()) for k, v in fooled.items()} }")
    return AdvResult(
        x_adv=x_t, delta=x_t - x, success=np.argmax(probs, axis=-1) != y,
        queries=np.full(len(x), 2 * spec.num_steps + 1, dtype=np.int64),
        loss=current, flagged=~saw_gradient, fooled=fooled, trace=trace,
    )
