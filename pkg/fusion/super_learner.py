"""
Learned fusion heads.

    score_ffn              concat(probs)    -> hidden -> ReLU -> 2 -> softmax
    score_super_learner    concat(probs)    -> 2 (simplex columns), renormalized
    feature_super_learner  concat(features) -> hidden -> ReLU -> 2 -> softmax

The score super learner mixes member probabilities with non-negative weights
whose columns sum to one (re-projected after every optimizer step) plus a
non-negative bias, then renormalizes; block-averaging weights with a zero bias
reproduce soft voting. During training each member's input group is zeroed
with probability ``dropout``; inference never drops.
"""

import logging
from typing import Dict, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from data.rng import stream
from engine import functional as F
from engine.errors import ConfigError, DimensionError
from engine.optim import Adam
from engine.tensor import Tensor, as_tensor, parameter
from fusion.scores import FUSION_STRATEGIES
from models.base import fan_in_std, linear
from ml.training import check_labels

logger = logging.getLogger(__name__)

LEARNED_STRATEGIES = ("score_ffn", "score_super_learner", "feature_super_learner")
SIMPLEX_FLOOR = 1e-12


class FusionConfig(BaseModel):
    """Strategy tag plus the learned heads' hyperparameters."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    strategy: str = "soft_vote"
    weights: Optional[List[float]] = None
    hidden: int = Field(32, ge=1)
    dropout: float = Field(0.2, ge=0.0, le=1.0)
    epochs: int = Field(30, ge=1)
    lr: float = Field(1e-3, ge=0.0)
    batch_size: int = Field(32, ge=1)

    @field_validator("strategy")
    @classmethod
    def _known(cls, value: str) -> str:
        if value not in FUSION_STRATEGIES:
            raise ValueError(f"unknown fusion strategy {value!r}; expected one of {FUSION_STRATEGIES}")
        return value


class FusionHead:
    """
    Parameters and forward pass of one learned fusion strategy.

    Args:
        group_sizes: input width contributed by each member (2 for score
            strategies, the member's feature_dim for the feature strategy)
    """

    def __init__(self, strategy: str, group_sizes: Sequence[int], hidden: int = 32,
                 dropout: float = 0.2, seed: int = 0):
        if strategy not in LEARNED_STRATEGIES:
            raise ConfigError(f"{strategy!r} has no learned head")
        self.strategy = strategy
        self.group_sizes = [int(g) for g in group_sizes]
        self.hidden = hidden
        self.dropout = dropout
        self.training = False
        self.dropout_rng = stream(seed, "fusion-dropout")
        rng = stream(seed, "fusion-init")
        width = self.input_width
        if strategy == "score_super_learner":
            self.params = {
                "fusion.w": parameter(np.abs(rng.normal(0.0, fan_in_std(width), (width, 2))), name="fusion.w"),
                "fusion.b": parameter(np.zeros(2), name="fusion.b"),
            }
            self.constrain()
        else:
            self.params = {
                "fusion.w1": parameter(rng.normal(0.0, fan_in_std(width), (width, hidden)), name="fusion.w1"),
                "fusion.b1": parameter(np.zeros(hidden), name="fusion.b1"),
                "fusion.w2": parameter(rng.normal(0.0, fan_in_std(hidden), (hidden, 2)), name="fusion.w2"),
                "fusion.b2": parameter(np.zeros(2), name="fusion.b2"),
            }

    @property
    def input_width(self) -> int:
        return sum(self.group_sizes)

    @classmethod
    def averaging(cls, n_models: int) -> "FusionHead":
        """Score super learner whose weights reproduce uniform soft voting."""
        head = cls("score_super_learner", [2] * n_models, dropout=0.0)
        head.load_state_dict({"fusion.w": averaging_weights(n_models), "fusion.b": np.zeros(2)})
        return head

    def constrain(self) -> None:
        """
        Project the score super learner back onto its feasible set: weights
        clipped at zero and each output column rescaled to sum to one, bias
        clipped at zero. A column with no positive weight left restarts from
        the averaging column. Other strategies are unconstrained.
        """
        if self.strategy != "score_super_learner":
            return
        weight = np.maximum(self.params["fusion.w"].data, 0.0)
        dead = weight.sum(axis=0) <= 0.0
        if np.any(dead):
            logger.debug(f"score super learner: resetting {int(dead.sum())} empty weight column(s)")
            weight[:, dead] = averaging_weights(len(self.group_sizes))[:, dead]
        self.params["fusion.w"].data = weight / weight.sum(axis=0, keepdims=True)
        self.params["fusion.b"].data = np.maximum(self.params["fusion.b"].data, 0.0)

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def train(self) -> "FusionHead":
        self.training = True
        for p in self.params.values():
            p.requires_grad = True
        return self

    def eval(self) -> "FusionHead":
        self.training = False
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None
        return self

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            if name not in state or np.shape(state[name]) != p.shape:
                raise DimensionError(f"fusion head: missing or misshapen {name}")
            p.data = np.array(state[name], dtype=np.float64)

    def group_mask(self, batch: int) -> np.ndarray:
        """[B, width] 0/1 mask dropping whole member groups."""
        keep = self.dropout_rng.random((batch, len(self.group_sizes))) >= self.dropout
        return np.repeat(keep.astype(np.float64), self.group_sizes, axis=1)

    def log_probs(self, inputs) -> Tensor:
        """Fused log-probabilities [B, 2] from concatenated member inputs [B, width]."""
        inputs = as_tensor(inputs)
        if inputs.ndim != 2 or inputs.shape[1] != self.input_width:
            raise DimensionError(
                f"fusion input {inputs.shape} does not match member widths {self.group_sizes}"
            )
        if self.training and self.dropout > 0.0:
            inputs = F.mul(inputs, Tensor(self.group_mask(inputs.shape[0])))
        if self.strategy == "score_super_learner":
            mixed = linear(inputs, self.params["fusion.w"], self.params["fusion.b"])
            return F.log(F.sum_normalize(F.clamp(mixed, lo=SIMPLEX_FLOOR), axis=-1))
        hidden = F.relu(linear(inputs, self.params["fusion.w1"], self.params["fusion.b1"]))
        return F.log_softmax(linear(hidden, self.params["fusion.w2"], self.params["fusion.b2"]), axis=-1)

    def __call__(self, inputs) -> Tensor:
        return F.exp(self.log_probs(inputs))

    def predict_proba(self, inputs: np.ndarray) -> np.ndarray:
        was_training = self.training
        self.training = False
        try:
            return np.exp(self.log_probs(Tensor(inputs)).data)
        finally:
            self.training = was_training


def averaging_weights(n_models: int) -> np.ndarray:
    """[2n, 2] weights giving each member's class-c probability 1/n in output c."""
    weight = np.zeros((2 * n_models, 2))
    for i in range(n_models):
        weight[2 * i, 0] = weight[2 * i + 1, 1] = 1.0 / n_models
    return weight


def concat_groups(groups: Sequence[np.ndarray]) -> np.ndarray:
    """Concatenate per-member arrays [B, w_i] into [B, sum w_i]."""
    return np.concatenate([np.asarray(g, dtype=np.float64) for g in groups], axis=-1)


def score_super_learner(member_probs: Sequence[np.ndarray], head: FusionHead) -> np.ndarray:
    """Fused probabilities from per-member normalized scores."""
    return head.predict_proba(np.atleast_2d(concat_groups(member_probs)))


def feature_super_learner(member_features: Sequence[np.ndarray], head: FusionHead) -> np.ndarray:
    """Fused probabilities from per-member penultimate features."""
    widths = [np.shape(f)[-1] for f in member_features]
    if widths != head.group_sizes:
        raise DimensionError(f"feature widths {widths} do not match head groups {head.group_sizes}")
    return head.predict_proba(np.atleast_2d(concat_groups(member_features)))


def train_fusion_head(head: FusionHead, inputs: np.ndarray, labels: np.ndarray, cfg: FusionConfig,
                      seed: int = 0) -> List[float]:
    """
    Fit the head on fixed member outputs (members stay frozen).

    Returns:
        mean cross-entropy per epoch
    """
    check_labels(labels)
    inputs = np.asarray(inputs, dtype=np.float64)
    labels = np.asarray(labels)
    rng = stream(seed, "fusion-batches")
    head.train()
    head.constrain()
    optimizer = Adam(head.parameters(), lr=cfg.lr)
    curve = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(labels))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            optimizer.zero_grad()
            loss = F.neg(F.mean(F.pick(head.log_probs(Tensor(inputs[idx])), labels[idx])))
            loss.backward()
            optimizer.step()
            head.constrain()
            losses.append(loss.item())
        curve.append(float(np.mean(losses)))
        logger.debug(f"fusion head ({head.strategy}) epoch {epoch + 1}: loss {curve[-1]:.4f}")
    head.eval()
    logger.info(f"Trained {head.strategy} head: final loss {curve[-1]:.4f}")
    return curve
