"""
Square attack: score-based random search under the l-inf norm.

The model is only ever queried through ``ScoreOracle``, which runs
inference without recording a graph and counts queries per example.
"""

import logging
import math

import numpy as np

from attacks.gradient import finish
from attacks.spec import AdvResult, AttackSpec
from engine.errors import DimensionError

logger = logging.getLogger(__name__)

# (fraction of budget used, divisor applied to p_init)
P_SCHEDULE = ((0.001, 1), (0.005, 2), (0.02, 4), (0.05, 8), (0.1, 16), (0.2, 32),
              (0.4, 64), (0.6, 128), (0.8, 256), (1.0, 512))


class ScoreOracle:
    """Probability-only access to a model."""

    def __init__(self, model, batch: int):
        self.model = model
        self.queries = np.zeros(batch, dtype=np.int64)

    def margin(self, images: np.ndarray, y: np.ndarray, rows: np.ndarray) -> np.ndarray:
        """p_y - max_{j != y} p_j for the selected rows (negative means misclassified)."""
        probs = self.model.predict_proba(images[rows])
        self.queries[rows] += 1
        labels = y[rows]
        true = probs[np.arange(len(rows)), labels]
        others = probs.copy()
        others[np.arange(len(rows)), labels] = -np.inf
        return true - np.max(others, axis=-1)


def p_selection(p_init: float, iteration: int, budget: int) -> float:
    """Square area fraction, halved on a fixed schedule over the query budget."""
    progress = iteration / max(budget, 1)
    for limit, divisor in P_SCHEDULE:
        if progress <= limit:
            return p_init / divisor
    return p_init / P_SCHEDULE[-1][1]


def square_attack(model, x: np.ndarray, y: np.ndarray, spec: AttackSpec, rng: np.random.Generator) -> AdvResult:
    if x.ndim != 4:
        raise DimensionError(f"Square attack needs [B, C, H, W] images, got {x.shape}")
    y = np.asarray(y)
    batch, channels, height, width = x.shape
    eps = spec.epsilon
    oracle = ScoreOracle(model, batch)
    everyone = np.arange(batch)

    x_best = x.copy()
    margin = oracle.margin(x, y, everyone)
    trace = [-margin.copy()]

    if spec.queries >= 2:
        active = np.flatnonzero(margin > 0)
        if len(active):
            stripes = rng.choice([-eps, eps], size=(batch, channels, 1, width))
            proposal = np.clip(x + stripes, 0.0, 1.0)
            candidate = oracle.margin(proposal, y, active)
            better = candidate < margin[active]
            x_best[active[better]] = proposal[active[better]]
            margin[active[better]] = candidate[better]
        trace.append(-margin.copy())

    side_limit = max(min(height, width) - 1, 1)
    for i in range(spec.queries - 2):
        active = np.flatnonzero(margin > 0)
        if len(active) == 0:
            break
        p = p_selection(spec.p_init, i, spec.queries)
        side = int(round(math.sqrt(p * height * width)))
        side = min(max(side, 1), side_limit)
        proposal = x_best.copy()
        for b in active:
            top = int(rng.integers(0, height - side + 1))
            left = int(rng.integers(0, width - side + 1))
            shift = rng.choice([-eps, eps], size=(channels, 1, 1))
            window = x[b, :, top:top + side, left:left + side] + shift
            proposal[b, :, top:top + side, left:left + side] = np.clip(window, 0.0, 1.0)
        candidate = oracle.margin(proposal, y, active)
        better = candidate < margin[active]
        x_best[active[better]] = proposal[active[better]]
        margin[active[better]] = candidate[better]
        trace.append(-margin.copy())

    logger.debug(f"Square: {int(np.sum(margin <= 0))}/{batch} fooled, "
                 f"mean queries {oracle.queries.mean():.1f}")
    return finish(model, x, x_best, y, oracle.queries, np.zeros(batch, dtype=bool), trace, loss=-margin)
