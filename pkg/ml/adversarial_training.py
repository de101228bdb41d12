"""
Multi-perturbation adversarial training.

Every training batch keeps a clean share and swaps the rest for adversarial
examples. Each swapped example draws one (attack, epsilon) pair uniformly
from the pool; with several models the attack runs against their
probability average, with one model it is plain white-box. After every
epoch the model is probed on the validation split with full-strength PGD.

Two modes:
    joint    members and fusion head train together through the fused output
    members  each member is adversarially fine-tuned alone, then the head is re-fitted
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from attacks.gradient import project
from attacks.registry import run_attack
from attacks.spec import AttackSpec, eps_255
from data.dataset import Dataset
from data.rng import child_seed, stream
from engine.errors import ConfigError
from fusion.ensemble import Ensemble
from fusion.super_learner import FusionConfig, FusionHead
from ml.training import TrainConfig, TrainResult, check_labels, fit

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ["model", "epoch", "clean_acc", "robust_acc", "mean_loss", "wall_time"]


def default_pool() -> List[AttackSpec]:
    return [AttackSpec(method="FGSM"), AttackSpec(method="PGD", random_start=True)]


class AdvTrainConfig(BaseModel):
    """
    Attack pool, epsilon levels and batch mix.

    ``clean_fraction`` is the clean share of every batch; 1.0 turns
    adversarial training into standard training.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    attacks: List[AttackSpec] = Field(default_factory=default_pool)
    epsilons: Tuple[float, ...] = (eps_255(2), eps_255(4))
    clean_fraction: float = Field(0.5, gt=0.0, le=1.0)
    mode: Literal["joint", "members"] = "joint"
    craft_steps: int = Field(5, ge=1, description="step cap for iterative attacks while crafting")
    probe: AttackSpec = AttackSpec(method="PGD", epsilon=eps_255(2), num_steps=10)
    probe_size: Optional[int] = Field(None, ge=1, description="validation examples probed per epoch")
    train: TrainConfig = TrainConfig(epochs=10, lr=5e-5, milestones=(5, 8))
    workers: int = Field(1, ge=1)

    @field_validator("attacks")
    @classmethod
    def _pool(cls, value: List[AttackSpec]) -> List[AttackSpec]:
        if not value:
            raise ValueError("attack pool must not be empty")
        return value

    @field_validator("epsilons")
    @classmethod
    def _levels(cls, value: Tuple[float, ...]) -> Tuple[float, ...]:
        if not value or any(e <= 0 for e in value):
            raise ValueError(f"epsilon levels must be positive and non-empty, got {value}")
        return value

    @model_validator(mode="after")
    def _probe_is_constrained(self) -> "AdvTrainConfig":
        if not self.probe.constrained:
            raise ValueError(f"probe attack {self.probe.method} is not epsilon-constrained")
        return self

    def pool(self) -> List[AttackSpec]:
        """Every (attack, epsilon) pair, step counts capped for crafting."""
        pairs = []
        for spec in self.attacks:
            for eps in self.epsilons:
                update = {"epsilon": eps, "num_steps": min(spec.num_steps, self.craft_steps)}
                if spec.method == "CW_L2":
                    update["cw_steps"] = min(spec.cw_steps, self.craft_steps)
                pairs.append(spec.model_copy(update=update))
        return pairs


@dataclass
class CraftedBatch:
    images: np.ndarray
    labels: np.ndarray
    adversarial: np.ndarray
    attack: List[str]


def adversarial_count(batch: int, clean_fraction: float) -> int:
    return batch - int(round(clean_fraction * batch))


def craft_batch(models: Sequence, images: np.ndarray, labels: np.ndarray, config: AdvTrainConfig,
                rng: np.random.Generator) -> CraftedBatch:
    """
    Replace the trailing share of a batch with adversarial examples.

    Examples sharing an (attack, epsilon) draw are crafted together; groups
    run in parallel threads, each on its own generator seeded from ``rng``
    before dispatch so the result does not depend on scheduling.
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    models = list(models)
    n_adv = adversarial_count(len(images), config.clean_fraction)
    out = images.copy()
    adversarial = np.zeros(len(images), dtype=bool)
    tags = ["clean"] * len(images)
    if n_adv == 0:
        return CraftedBatch(out, labels, adversarial, tags)

    pool = config.pool()
    start = len(images) - n_adv
    choice = rng.integers(0, len(pool), size=n_adv)
    groups = [(k, start + np.flatnonzero(choice == k)) for k in range(len(pool)) if np.any(choice == k)]
    seeds = [child_seed(rng) for _ in groups]
    target = models if len(models) > 1 else models[0]

    def craft(k: int, rows: np.ndarray, seed: int) -> Tuple[np.ndarray, np.ndarray]:
        spec = pool[k]
        result = run_attack(target, images[rows], labels[rows], spec, stream(seed, "craft"))
        x_adv = result.x_adv
        if not spec.constrained:
            x_adv = project(x_adv, images[rows], spec.epsilon, "linf")
        return rows, x_adv

    crafted = Parallel(n_jobs=config.workers, backend="threading")(
        delayed(craft)(k, rows, seed) for (k, rows), seed in zip(groups, seeds)
    )
    for rows, x_adv in crafted:
        out[rows] = x_adv
        adversarial[rows] = True
    for k, rows in groups:
        for r in rows:
            tags[r] = pool[k].label()
    return CraftedBatch(out, labels, adversarial, tags)


def robust_accuracy(model, images: np.ndarray, labels: np.ndarray, spec: AttackSpec,
                    rng: np.random.Generator) -> Tuple[float, float]:
    """
    Clean and robust accuracy on one split.

    An example counts as robustly correct only when it is classified
    correctly both before and after the attack, so robust <= clean.
    """
    labels = np.asarray(labels)
    model.eval()
    clean_ok = model.predict(images) == labels
    result = run_attack(model, images, labels, spec, rng)
    robust_ok = clean_ok & ~result.success
    return float(clean_ok.mean()), float(robust_ok.mean())


@dataclass
class AdvTrainResult:
    ensemble: Ensemble
    history: Dict[str, TrainResult] = field(default_factory=dict)
    head_curve: List[float] = field(default_factory=list)

    def trace(self) -> pd.DataFrame:
        """Training trace: model, epoch, clean_acc, robust_acc, mean_loss, wall_time."""
        frames = []
        for name, result in self.history.items():
            frame = result.to_frame()
            frame.insert(0, "model", name)
            frames.append(frame)
        if not frames:
            return pd.DataFrame(columns=TRACE_COLUMNS)
        return pd.concat(frames, ignore_index=True)[TRACE_COLUMNS]


def _probe_split(dataset: Dataset, config: AdvTrainConfig) -> Tuple[np.ndarray, np.ndarray]:
    images, labels = dataset.subset("val")
    if len(images) == 0:
        logger.warning("validation split is empty, probing on the training split")
        images, labels = dataset.subset("train")
    if config.probe_size is not None:
        images, labels = images[:config.probe_size], labels[:config.probe_size]
    return images, labels


def _train_one(model, crafting_models: Sequence, images: np.ndarray, labels: np.ndarray,
               probe: Tuple[np.ndarray, np.ndarray], config: AdvTrainConfig, seed: int,
               name: str) -> TrainResult:
    craft_rng = stream(seed, "craft", name)
    n_adv = adversarial_count(config.train.batch_size, config.clean_fraction)

    def batch_hook(batch_x: np.ndarray, batch_y: np.ndarray, epoch: int) -> np.ndarray:
        if adversarial_count(len(batch_x), config.clean_fraction) == 0:
            return batch_x
        return craft_batch(crafting_models, batch_x, batch_y, config, craft_rng).images

    def epoch_hook(trained, epoch: int) -> Dict[str, float]:
        clean, robust = robust_accuracy(trained, probe[0], probe[1], config.probe,
                                        stream(seed, "probe", name, epoch))
        logger.info(f"{name} epoch {epoch + 1}: clean acc {clean:.3f}, robust acc {robust:.3f} "
                    f"({config.probe.label()})")
        return {"clean_acc": clean, "robust_acc": robust}

    logger.info(f"Adversarial training {name}: {n_adv}/{config.train.batch_size} adversarial per batch, "
                f"pool {[s.label() for s in config.pool()]}")
    return fit(model, images, labels, config.train, seed,
               batch_hook=batch_hook, epoch_hook=epoch_hook, name=name)


def adv_train(models: Sequence, fusion: Optional[FusionConfig], dataset: Dataset,
              config: Optional[AdvTrainConfig] = None, seed: int = 0,
              head: Optional[FusionHead] = None) -> AdvTrainResult:
    """
    Adversarially train members (in place) and return the fused ensemble.

    Joint mode continues from ``head`` when one is given (e.g. the head of the
    clean-trained ensemble); members mode always re-fits the head.

    Raises:
        ConfigError: joint training through majority voting (no gradient)
        TrainingError: single-class training data or a non-finite loss
    """
    config = config or AdvTrainConfig()
    fusion = fusion or FusionConfig()
    members = list(models)
    images, labels = dataset.subset("train")
    check_labels(labels)
    probe = _probe_split(dataset, config)
    result = AdvTrainResult(ensemble=Ensemble(members, fusion, head=head, trainable="both"))

    if config.mode == "joint":
        if fusion.strategy == "max_vote":
            raise ConfigError("max_vote has no gradient; use mode 'members' to train under majority voting")
        ensemble = result.ensemble
        result.history[ensemble.name] = _train_one(ensemble, members, images, labels, probe,
                                                   config, seed, ensemble.name)
    else:
        for member in members:
            result.history[member.name] = _train_one(member, [member], images, labels, probe,
                                                     config, seed, member.name)
        ensemble = Ensemble(members, fusion, trainable="fusion")
        if ensemble.head is not None:
            result.head_curve = ensemble.fit_head(*dataset.labeled_split("val"), seed=seed)
        result.ensemble = ensemble

    result.ensemble.eval()
    return result
