"""
Optimizers and learning-rate schedules.
"""

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from engine.errors import DimensionError
from engine.tensor import Tensor


@dataclass
class AdamState:
    """First/second moment estimates and the step counter."""

    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)
    t: int = 0

    @classmethod
    def like(cls, params: Sequence[Tensor]) -> "AdamState":
        return cls(m=[np.zeros_like(p.data) for p in params],
                   v=[np.zeros_like(p.data) for p in params])


def adam_step(params: Sequence[Tensor], grads: Sequence[Optional[np.ndarray]], state: AdamState,
              lr: float, betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> None:
    """
    One bias-corrected Adam update. Parameters whose gradient is None are skipped
    (their moments are left untouched).
    """
    if len(state.m) != len(params):
        raise DimensionError(f"Adam state holds {len(state.m)} slots for {len(params)} parameters")
    beta1, beta2 = betas
    state.t += 1
    correction1 = 1.0 - beta1 ** state.t
    correction2 = 1.0 - beta2 ** state.t
    for i, (param, grad) in enumerate(zip(params, grads)):
        if grad is None:
            continue
        if state.m[i].shape != param.data.shape or grad.shape != param.data.shape:
            raise DimensionError(f"Adam slot {i}: shape mismatch for parameter {param.shape}")
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * grad
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * grad * grad
        m_hat = state.m[i] / correction1
        v_hat = state.v[i] / correction2
        param.data = param.data - lr * m_hat / (np.sqrt(v_hat) + eps)


class Adam:
    """Adam over a fixed list of parameter tensors."""

    def __init__(self, params: Iterable[Tensor], lr: float = 5e-5,
                 betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = AdamState.like(self.params)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state,
                  self.lr, self.betas, self.eps)

    def grad_norms(self) -> Dict[str, float]:
        """L2 norm of every gradient, keyed by parameter name (diagnostics)."""
        return {
            (p.name or f"param_{i}"): float(np.linalg.norm(p.grad)) if p.grad is not None else 0.0
            for i, p in enumerate(self.params)
        }


class StepDecay:
    """
    Multiply the base rate by ``factor`` at each milestone epoch.

    Epochs are 0-based; the rate for epoch e is base * factor ** #(m <= e).
    """

    def __init__(self, base_lr: float, milestones: Sequence[int] = (20, 30), factor: float = 0.5):
        self.base_lr = base_lr
        self.milestones = sorted(milestones)
        self.factor = factor

    def lr_at(self, epoch: int) -> float:
        passed = sum(1 for m in self.milestones if m <= epoch)
        return self.base_lr * self.factor ** passed
