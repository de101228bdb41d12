"""
Carlini-Wagner l2 attack.

Minimizes ||x' - x||^2 + c * max(Z_y - max_{j != y} Z_j, -kappa) over
x' = (tanh(w) + 1) / 2 with Adam, keeping the closest successful x' seen.
An optional binary search adapts c per example between rounds.
"""

import logging

import numpy as np

from attacks.gradient import finish
from attacks.spec import AdvResult, AttackSpec
from engine import functional as F
from engine.optim import AdamState, adam_step
from engine.tensor import Tensor, parameter

logger = logging.getLogger(__name__)

TANH_SHRINK = 1.0 - 1e-6
MASK = 1e9


def to_tanh_space(x: np.ndarray) -> np.ndarray:
    return np.arctanh((2.0 * np.clip(x, 0.0, 1.0) - 1.0) * TANH_SHRINK)


def cw_l2(model, x: np.ndarray, y: np.ndarray, spec: AttackSpec, rng=None) -> AdvResult:
    batch = len(x)
    y = np.asarray(y)
    axes = tuple(range(1, x.ndim))
    w_start = to_tanh_space(x)
    x_const = Tensor(x)

    c = np.full(batch, spec.cw_c)
    lower = np.zeros(batch)
    upper = np.full(batch, np.inf)
    best_l2 = np.full(batch, np.inf)
    best_adv = x.copy()
    best_obj = np.full(batch, np.inf)
    found = np.zeros(batch, dtype=bool)
    fallback_obj = np.full(batch, np.inf)
    fallback_adv = x.copy()
    queries = np.zeros(batch, dtype=np.int64)
    trace = []

    for round_index in range(spec.cw_binary_steps):
        w = parameter(w_start.copy(), name="cw.w")
        state = AdamState.like([w])
        round_success = np.zeros(batch, dtype=bool)
        for _ in range(spec.cw_steps):
            x_new = F.mul_scalar(F.add(F.tanh(w), 1.0), 0.5)
            logits = model.forward(x_new)
            delta = F.sub(x_new, x_const)
            dist = F.sum(F.mul(delta, delta), axis=axes)
            num_classes = logits.shape[-1]
            others = F.amax(F.sub(logits, Tensor(np.eye(num_classes)[y] * MASK)), axis=-1)
            margin = F.clamp(F.sub(F.pick(logits, y), others), lo=-spec.cw_kappa)
            objective = F.add(dist, F.mul(margin, Tensor(c)))
            queries += 1

            xv, l2, obj = x_new.data, dist.data, objective.data
            success = np.argmax(logits.data, axis=-1) != y
            closer = success & (l2 < best_l2)
            best_l2[closer] = l2[closer]
            best_adv[closer] = xv[closer]
            best_obj[closer] = obj[closer]
            found |= success
            round_success |= success
            lower_obj = obj < fallback_obj
            fallback_obj[lower_obj] = obj[lower_obj]
            fallback_adv[lower_obj] = xv[lower_obj]
            trace.append(obj.copy())

            F.sum(objective).backward()
            adam_step([w], [w.grad], state, spec.cw_lr)
            w.zero_grad()

        upper = np.where(round_success, np.minimum(upper, c), upper)
        lower = np.where(round_success, lower, np.maximum(lower, c))
        c = np.where(np.isfinite(upper), (lower + upper) / 2.0, c * 10.0)
        logger.debug(f"CW round {round_index + 1}: {int(round_success.sum())}/{batch} successful")

    x_adv = np.where(found.reshape((-1,) + (1,) * (x.ndim - 1)), best_adv, fallback_adv)
    loss = np.where(found, best_obj, fallback_obj)
    return finish(model, x, x_adv, y, queries, np.zeros(batch, dtype=bool), trace, loss=loss)
