"""
Classifier contract shared by every detector.

A classifier maps images [B, C, H, W] to 2-class logits [B, 2]
(bona fide = class 0, morph = class 1) and splits into
``features`` (penultimate activation) and ``head`` (final linear layer).
"""

import hashlib
from abc import ABC, abstractmethod
from typing import Dict, List, Sequence, Tuple

import numpy as np

from engine import functional as F
from engine.errors import DimensionError
from engine.tensor import Tensor, as_tensor, no_grad

BONA_FIDE = 0
MORPH = 1


class Classifier(ABC):
    """
    Base class for every model in the ensemble.

    Modes:
        train(): parameters require grad, normalization uses batch statistics
        eval():  parameters frozen, normalization uses running statistics
                 (the mode attacks and evaluation run in)
    """

    kind = "classifier"

    def __init__(self, name: str = ""):
        self.name = name or self.kind
        self.params: Dict[str, Tensor] = {}
        self.buffers: Dict[str, np.ndarray] = {}
        self.training = False

    # ---------- to implement ----------

    @abstractmethod
    def features(self, images: Tensor) -> Tensor:
        """Penultimate-layer activation [B, feature_dim]."""

    @abstractmethod
    def config_record(self) -> Tuple[List[int], List[float]]:
        """Integers and floats that rebuild this model's config."""

    @classmethod
    @abstractmethod
    def from_record(cls, ints: Sequence[int], floats: Sequence[float]) -> "Classifier":
        """Rebuild an (uninitialized-weight) model from ``config_record``."""

    # ---------- shared behaviour ----------

    @property
    def feature_dim(self) -> int:
        return int(self.params["head.w"].shape[0])

    def head(self, features: Tensor) -> Tensor:
        """Final linear layer: features [B, d] -> logits [B, 2]."""
        return linear(features, self.params["head.w"], self.params["head.b"])

    def forward(self, images) -> Tensor:
        images = as_tensor(images)
        if images.ndim == 3:
            images = F.reshape(images, (1,) + images.shape)
        return self.head(self.features(images))

    def __call__(self, images) -> Tensor:
        return self.forward(images)

    def loss(self, images, labels) -> Tensor:
        """Mean cross-entropy of the logits against integer labels."""
        return F.cross_entropy(self.forward(images), labels)

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def train(self) -> "Classifier":
        self.training = True
        for p in self.params.values():
            p.requires_grad = True
        return self

    def eval(self) -> "Classifier":
        self.training = False
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None
        return self

    def predict_proba(self, images: np.ndarray) -> np.ndarray:
        """Inference-only class probabilities [B, 2] (no graph recorded)."""
        with no_grad():
            return F.softmax(self.forward(Tensor(images)), axis=-1).data

    def predict(self, images: np.ndarray) -> np.ndarray:
        return np.argmax(self.predict_proba(images), axis=-1)

    # ---------- state ----------

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.params.items()}
        state.update({f"buffer:{name}": value.copy() for name, value in self.buffers.items()})
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            if name not in state:
                raise DimensionError(f"{self.name}: checkpoint is missing parameter {name}")
            if state[name].shape != p.shape:
                raise DimensionError(
                    f"{self.name}: parameter {name} has shape {state[name].shape}, expected {p.shape}"
                )
            p.data = np.array(state[name], dtype=np.float64)
        for name in self.buffers:
            key = f"buffer:{name}"
            if key in state:
                self.buffers[name] = np.array(state[key], dtype=np.float64)

    def digest(self) -> str:
        """SHA-256 over parameter names and values."""
        h = hashlib.sha256()
        for name, p in sorted(self.params.items()):
            h.update(name.encode("utf-8"))
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x [..., d_in] @ weight [d_in, d_out] + bias [d_out]."""
    lead = x.shape[:-1]
    flat = F.reshape(x, (-1, x.shape[-1])) if x.ndim != 2 else x
    out = F.channel_affine(F.matmul(flat, weight), shift=bias, axis=-1)
    return F.reshape(out, lead + (weight.shape[1],)) if x.ndim != 2 else out


def fan_in_std(fan_in: int) -> float:
    return float(np.sqrt(1.0 / fan_in))
