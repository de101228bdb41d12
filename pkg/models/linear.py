"""
Linear classifier on flattened inputs.

Used as the held-out model in transfer experiments and wherever a closed-form
gradient is needed (logits = flatten(x) @ W + b).
"""

from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from engine import functional as F
from engine.errors import DimensionError
from engine.tensor import Tensor, as_tensor, parameter
from models.base import Classifier, fan_in_std


class LinearConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    input_shape: Tuple[int, ...] = (3, 32, 32)
    num_classes: int = Field(2, ge=2)

    @property
    def input_dim(self) -> int:
        return int(np.prod(self.input_shape))


class LinearClassifier(Classifier):
    kind = "linear"

    def __init__(self, cfg: Optional[LinearConfig] = None, rng: Optional[np.random.Generator] = None,
                 name: str = ""):
        super().__init__(name)
        self.cfg = cfg or LinearConfig()
        rng = rng if rng is not None else np.random.default_rng(0)
        d = self.cfg.input_dim
        self.params = {
            "head.w": parameter(rng.normal(0.0, fan_in_std(d), (d, self.cfg.num_classes)), name="head.w"),
            "head.b": parameter(np.zeros(self.cfg.num_classes), name="head.b"),
        }
        self.eval()

    @classmethod
    def from_weights(cls, weight: np.ndarray, bias: np.ndarray, input_shape: Sequence[int],
                     name: str = "") -> "LinearClassifier":
        """Model with hand-set weights [d, classes] and bias [classes]."""
        weight = np.asarray(weight, dtype=np.float64)
        model = cls(LinearConfig(input_shape=tuple(input_shape), num_classes=weight.shape[1]), name=name)
        model.load_state_dict({"head.w": weight, "head.b": np.asarray(bias, dtype=np.float64)})
        return model

    def forward(self, images) -> Tensor:
        images = as_tensor(images)
        if images.shape == tuple(self.cfg.input_shape):
            images = F.reshape(images, (1,) + images.shape)
        return self.head(self.features(images))

    def features(self, images: Tensor) -> Tensor:
        if images.shape[1:] != tuple(self.cfg.input_shape):
            raise DimensionError(f"input batch {images.shape} does not match {self.cfg.input_shape}")
        return F.reshape(images, (images.shape[0], self.cfg.input_dim))

    def config_record(self) -> Tuple[List[int], List[float]]:
        return [self.cfg.num_classes, *self.cfg.input_shape], []

    @classmethod
    def from_record(cls, ints: Sequence[int], floats: Sequence[float]) -> "LinearClassifier":
        ints = [int(v) for v in ints]
        return cls(LinearConfig(num_classes=ints[0], input_shape=tuple(ints[1:])))
