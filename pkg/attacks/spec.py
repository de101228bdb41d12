"""
Attack configuration and result types.

Everything works on pixel scale [0, 1]; an epsilon quoted as k/255 is
written ``eps_255(k)``.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

METHODS = ("FGSM", "BIM", "RFGSM", "PGD", "PGD_L2", "TPGD", "MIFGSM", "DIFGSM", "TIFGSM",
           "CW_L2", "SQUARE", "ENSEMBLE")
UNCONSTRAINED = ("CW_L2",)


def eps_255(k: float) -> float:
    return k / 255.0


class AttackSpec(BaseModel):
    """One attack and all of its hyperparameters."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    method: Literal["FGSM", "BIM", "RFGSM", "PGD", "PGD_L2", "TPGD", "MIFGSM", "DIFGSM", "TIFGSM",
                    "CW_L2", "SQUARE", "ENSEMBLE"] = "PGD"
    norm: Literal["linf", "l2"] = "linf"
    epsilon: float = Field(2.0 / 255.0, ge=0.0)
    step_size: Optional[float] = Field(None, gt=0.0, description="defaults to epsilon / num_steps")
    num_steps: int = Field(10, ge=1)
    random_start: bool = False

    # MIFGSM
    decay: float = Field(1.0, ge=0.0)
    # DIFGSM
    diversity_prob: float = Field(0.5, ge=0.0, le=1.0)
    resize_min: float = Field(0.875, gt=0.0, le=1.0, description="smallest resize as a fraction of H")
    # TIFGSM
    kernel_size: int = Field(5, ge=1)
    kernel_sigma: float = Field(1.0, gt=0.0)
    # CW_L2
    cw_c: float = Field(1.0, gt=0.0)
    cw_kappa: float = Field(0.0, ge=0.0)
    cw_steps: int = Field(100, ge=1)
    cw_lr: float = Field(0.01, gt=0.0)
    cw_binary_steps: int = Field(1, ge=1)
    # SQUARE
    queries: int = Field(500, ge=1)
    p_init: float = Field(0.3, gt=0.0, le=1.0, description="initial square area fraction")
    # ENSEMBLE
    weights: Optional[List[float]] = None
    distance_weight: float = Field(0.1, ge=0.0, description="lambda on the l2 distance")
    distance: Literal["l2"] = "l2"
    literal_sign: bool = Field(False, description="add the distance term instead of subtracting it")

    @model_validator(mode="after")
    def _check(self) -> "AttackSpec":
        if self.method == "PGD_L2" and self.norm != "l2":
            raise ValueError("PGD_L2 needs norm 'l2'")
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=np.float64)
            if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
                raise ValueError(f"ensemble weights must be non-negative and sum to 1, got {self.weights}")
        return self

    @property
    def step(self) -> float:
        return self.step_size if self.step_size is not None else self.epsilon / self.num_steps

    @property
    def constrained(self) -> bool:
        return self.method not in UNCONSTRAINED

    def label(self) -> str:
        return f"{self.method}@{self.epsilon * 255:g}/255"


@dataclass
class AdvResult:
    """
    Batched attack outcome; every per-example field has leading extent B.

    Attributes:
        x_adv: adversarial images
        delta: x_adv - x
        success: prediction differs from the true label
        queries: model queries used (forward passes for score-based attacks)
        loss: attack objective at x_adv
        flagged: the gradient vanished everywhere, the input was returned unchanged
        fooled: per-model prediction flips (ensemble attack)
        trace: per-iteration objective values, [steps, B]
    """

    x_adv: np.ndarray
    delta: np.ndarray
    success: np.ndarray
    queries: np.ndarray
    loss: np.ndarray
    flagged: Optional[np.ndarray] = None
    fooled: Dict[str, np.ndarray] = field(default_factory=dict)
    trace: List[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.flagged is None:
            self.flagged = np.zeros(len(self.success), dtype=bool)

    def norms(self, norm: str = "linf") -> np.ndarray:
        flat = self.delta.reshape(len(self.delta), -1)
        if norm == "linf":
            return np.max(np.abs(flat), axis=1) if flat.shape[1] else np.zeros(len(flat))
        return np.sqrt(np.sum(flat * flat, axis=1))

    @property
    def success_rate(self) -> float:
        return float(np.mean(self.success)) if len(self.success) else 0.0
