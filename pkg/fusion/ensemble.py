"""
Ensemble of detectors with a configurable fusion strategy.

``forward`` returns fused log-probabilities [B, 2]. They stand in for logits
everywhere (softmax(log p) = p), so attacks, training and evaluation treat
an Ensemble exactly like a single Classifier.
"""

import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from joblib import Parallel, delayed
from pydantic import BaseModel, ConfigDict

from engine import functional as F
from engine.checkpoint import load_tensors, save_tensors
from engine.errors import ConfigError, ContractError
from engine.tensor import Tensor, as_tensor, no_grad
from fusion.scores import ScoreVector, soft_vote_tensor, vote_share
from fusion.super_learner import FusionConfig, FusionHead, concat_groups, train_fusion_head
from models.base import Classifier
from models.checkpoint import load_model

logger = logging.getLogger(__name__)

TRAINABLE = ("fusion", "members", "both")
PROB_FLOOR = 1e-300


class MemberRef(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    name: str
    checkpoint: str


class EnsembleConfig(BaseModel):
    """Member checkpoints, fusion strategy and (for learned strategies) the head checkpoint."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    members: List[MemberRef]
    fusion: FusionConfig = FusionConfig()
    head_checkpoint: Optional[str] = None


class Ensemble:
    """
    Frozen-or-trainable members plus a fusion rule.

    Args:
        members: detectors, each mapping images to 2-class logits
        fusion: strategy and head hyperparameters
        head: learned head for score_ffn / super-learner strategies
        trainable: which parameters ``parameters()`` exposes to an optimizer
    """

    kind = "ensemble"

    def __init__(self, members: Sequence[Classifier], fusion: Optional[FusionConfig] = None,
                 head: Optional[FusionHead] = None, trainable: str = "fusion", name: str = "ensemble"):
        if not members:
            raise ContractError("an ensemble needs at least one member")
        if trainable not in TRAINABLE:
            raise ConfigError(f"trainable must be one of {TRAINABLE}, got {trainable!r}")
        self.members = list(members)
        self.fusion = fusion or FusionConfig()
        self.head = head
        self.trainable = trainable
        self.name = name
        self.training = False
        if self.fusion.strategy in ("score_ffn", "score_super_learner", "feature_super_learner") and head is None:
            self.head = FusionHead(self.fusion.strategy, self.group_sizes(), self.fusion.hidden,
                                   self.fusion.dropout)

    # ---------- structure ----------

    @property
    def member_names(self) -> List[str]:
        return [m.name for m in self.members]

    def group_sizes(self) -> List[int]:
        if self.fusion.strategy == "feature_super_learner":
            return [m.feature_dim for m in self.members]
        return [2] * len(self.members)

    def parameters(self) -> List[Tensor]:
        params: List[Tensor] = []
        if self.trainable in ("members", "both"):
            for m in self.members:
                params.extend(m.parameters())
        if self.trainable in ("fusion", "both") and self.head is not None:
            params.extend(self.head.parameters())
        return params

    def constrain(self) -> None:
        if self.head is not None and self.trainable in ("fusion", "both"):
            self.head.constrain()

    def train(self) -> "Ensemble":
        self.training = True
        if self.trainable in ("members", "both"):
            for m in self.members:
                m.train()
        if self.head is not None and self.trainable in ("fusion", "both"):
            self.head.train()
        return self

    def eval(self) -> "Ensemble":
        self.training = False
        for m in self.members:
            m.eval()
        if self.head is not None:
            self.head.eval()
        return self

    # ---------- forward ----------

    def _member_outputs(self, images: Tensor) -> Tuple[List[Tensor], List[Tensor]]:
        logits, features = [], []
        for m in self.members:
            if self.fusion.strategy == "feature_super_learner":
                feats = m.features(images)
                features.append(feats)
                logits.append(m.head(feats))
            else:
                logits.append(m.forward(images))
        return logits, features

    def forward_with_scores(self, images) -> Tuple[Tensor, List[ScoreVector]]:
        """Fused log-probabilities [B, 2] and each member's ScoreVector."""
        images = as_tensor(images)
        if images.ndim == 3:
            images = F.reshape(images, (1,) + images.shape)
        logits, features = self._member_outputs(images)
        probs = [F.softmax(z, axis=-1) for z in logits]
        strategy = self.fusion.strategy

        if strategy == "soft_vote":
            fused = F.log(F.clamp(soft_vote_tensor(probs, self.fusion.weights), lo=PROB_FLOOR))
        elif strategy == "max_vote":
            share = vote_share([p.data for p in probs])
            fused = Tensor(np.log(np.maximum(share, PROB_FLOOR)))
        elif strategy == "feature_super_learner":
            fused = self.head.log_probs(F.concat(features, axis=-1))
        else:
            fused = self.head.log_probs(F.concat(probs, axis=-1))

        scores = [ScoreVector(n, z.data.copy(), p.data.copy())
                  for n, z, p in zip(self.member_names, logits, probs)]
        return fused, scores

    def forward(self, images) -> Tensor:
        return self.forward_with_scores(images)[0]

    def __call__(self, images) -> Tensor:
        return self.forward(images)

    def loss(self, images, labels) -> Tensor:
        """Negative log of the fused probability of the true class."""
        return F.neg(F.mean(F.pick(self.forward(images), labels)))

    def predict_proba(self, images: np.ndarray) -> np.ndarray:
        with no_grad():
            return np.exp(self.forward(Tensor(images)).data)

    def predict(self, images: np.ndarray) -> np.ndarray:
        probs = self.predict_proba(images)
        if self.fusion.strategy == "max_vote":
            return np.where(probs[:, 1] >= 0.5, 1, 0)
        return np.argmax(probs, axis=-1)

    def member_probs(self, images: np.ndarray, workers: int = 1) -> Dict[str, np.ndarray]:
        """Every member's probabilities, members evaluated in parallel threads."""
        results = Parallel(n_jobs=workers, backend="threading")(
            delayed(m.predict_proba)(images) for m in self.members
        )
        return dict(zip(self.member_names, results))

    # ---------- fusion head ----------

    def head_inputs(self, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
        """Frozen member outputs the head consumes: probabilities or features."""
        chunks = []
        with no_grad():
            for start in range(0, len(images), batch_size):
                x = Tensor(images[start:start + batch_size])
                if self.fusion.strategy == "feature_super_learner":
                    groups = [m.features(x).data for m in self.members]
                else:
                    groups = [F.softmax(m.forward(x), axis=-1).data for m in self.members]
                chunks.append(concat_groups(groups))
        return np.concatenate(chunks, axis=0)

    def fit_head(self, images: np.ndarray, labels: np.ndarray, seed: int = 0) -> List[float]:
        """Train the fusion head with members frozen; member weights are not touched."""
        if self.head is None:
            raise ContractError(f"strategy {self.fusion.strategy!r} has no head to train")
        for m in self.members:
            m.eval()
        return train_fusion_head(self.head, self.head_inputs(images), labels, self.fusion, seed)

    # ---------- persistence ----------

    def save_head(self, path: Union[str, Path]) -> Optional[Path]:
        if self.head is None:
            return None
        return save_tensors(path, self.head.state_dict())

    @classmethod
    def from_config(cls, cfg: EnsembleConfig, base_dir: Union[str, Path] = ".",
                    trainable: str = "fusion") -> "Ensemble":
        """Load members (LoadError if a checkpoint is missing) and the head."""
        base = Path(base_dir)
        members = [load_model(base / ref.checkpoint, name=ref.name) for ref in cfg.members]
        ensemble = cls(members, cfg.fusion, trainable=trainable)
        if ensemble.head is not None and cfg.head_checkpoint:
            ensemble.head.load_state_dict(load_tensors(base / cfg.head_checkpoint))
        logger.info(f"Loaded ensemble {ensemble.member_names} with {cfg.fusion.strategy}")
        return ensemble


def ensemble_forward(ensemble: Ensemble, images) -> Tuple[np.ndarray, List[ScoreVector]]:
    """Fused probabilities plus each member's ScoreVector."""
    with no_grad():
        fused, scores = ensemble.forward_with_scores(images)
    return np.exp(fused.data), scores
