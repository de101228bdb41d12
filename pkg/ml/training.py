"""
Supervised training loop shared by clean and adversarial training.

Adam with a step-decay schedule over class-balanced, flip-augmented batches.
Anything exposing ``train()``, ``eval()``, ``parameters()`` and
``loss(images, labels)`` can be trained: single classifiers and ensembles alike.
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field

from data.pipeline import iter_batches
from data.rng import stream
from engine.errors import TrainingError
from engine.optim import Adam, StepDecay
from engine.tensor import Tensor
from models.base import BONA_FIDE, MORPH

logger = logging.getLogger(__name__)

BatchHook = Callable[[np.ndarray, np.ndarray, int], np.ndarray]
EpochHook = Callable[[object, int], Dict[str, float]]


class TrainConfig(BaseModel):
    """Optimizer and schedule. Defaults: Adam at 5e-5, halved at epochs 20 and 30."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    epochs: int = Field(40, ge=1)
    batch_size: int = Field(16, ge=2)
    lr: float = Field(5e-5, ge=0.0)
    milestones: Tuple[int, ...] = (20, 30)
    decay: float = Field(0.5, gt=0.0)
    betas: Tuple[float, float] = (0.9, 0.999)
    augment: bool = True
    strict_batches: bool = False


@dataclass
class TrainResult:
    """Per-epoch records: epoch, lr, mean_loss, wall_time and any hook metrics."""

    history: List[Dict[str, float]] = field(default_factory=list)

    @property
    def losses(self) -> List[float]:
        return [row["mean_loss"] for row in self.history]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.history)


def check_labels(labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    if labels.size == 0:
        raise TrainingError("training set is empty")
    if not (np.any(labels == BONA_FIDE) and np.any(labels == MORPH)):
        raise TrainingError(f"training set holds a single class: {np.unique(labels).tolist()}")


def fit(model, images: np.ndarray, labels: np.ndarray, cfg: TrainConfig, seed: int,
        batch_hook: Optional[BatchHook] = None, epoch_hook: Optional[EpochHook] = None,
        name: str = "model") -> TrainResult:
    """
    Train ``model`` in place.

    Args:
        batch_hook: (images, labels, epoch) -> images, applied to every batch
            before the update (adversarial training swaps examples here)
        epoch_hook: (model, epoch) -> extra metrics recorded for the epoch

    Raises:
        TrainingError: single-class data, or a non-finite loss (message
            carries the learning rate and gradient norms)
    """
    check_labels(labels)
    batch_rng = stream(seed, "batches")
    optimizer = Adam(model.parameters(), lr=cfg.lr, betas=cfg.betas)
    schedule = StepDecay(cfg.lr, cfg.milestones, cfg.decay)
    result = TrainResult()

    for epoch in range(cfg.epochs):
        started = time.perf_counter()
        optimizer.lr = schedule.lr_at(epoch)
        losses = []
        for batch_x, batch_y in iter_batches(images, labels, cfg.batch_size, batch_rng,
                                             augment=cfg.augment, strict=cfg.strict_batches):
            if batch_hook is not None:
                batch_x = batch_hook(batch_x, batch_y, epoch)
            model.train()
            optimizer.zero_grad()
            loss = model.loss(Tensor(batch_x), batch_y)
            loss.backward()
            value = loss.item()
            if not np.isfinite(value):
                norms = optimizer.grad_norms()
                worst = sorted(norms.items(), key=lambda kv: -np.nan_to_num(kv[1], nan=np.inf))[:5]
                raise TrainingError(
                    f"{name}: non-finite loss {value} at epoch {epoch}, lr {optimizer.lr:g}, "
                    f"largest grad norms {worst}"
                )
            optimizer.step()
            if hasattr(model, "constrain"):
                model.constrain()
            losses.append(value)
        model.eval()

        row = {"epoch": epoch, "lr": optimizer.lr, "mean_loss": float(np.mean(losses))}
        if epoch_hook is not None:
            row.update(epoch_hook(model, epoch))
        row["wall_time"] = time.perf_counter() - started
        result.history.append(row)
        logger.info(f"{name} epoch {epoch + 1}/{cfg.epochs}: loss {row['mean_loss']:.4f}, lr {optimizer.lr:g}")
    return result


def train_model(model, images: np.ndarray, labels: np.ndarray, cfg: Optional[TrainConfig] = None,
                seed: int = 0, epoch_hook: Optional[EpochHook] = None) -> TrainResult:
    """Clean training; returns the per-epoch loss curve (parameters are updated in place)."""
    return fit(model, images, labels, cfg or TrainConfig(), seed, epoch_hook=epoch_hook,
               name=getattr(model, "name", "model"))
