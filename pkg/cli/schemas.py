"""
Experiment configuration schema.

One JSON document drives every sub-command. Unknown keys are rejected at
every level. Defaults follow the training recipe (Adam at 5e-5 halved at
epochs 20 and 30, epsilon levels 2/255 and 4/255) unless noted otherwise.
"""

import hashlib
import json
import logging
from pathlib import Path
from typing import Dict, List, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from attacks.spec import AttackSpec, eps_255
from data.dataset import DatasetParams
from engine.errors import ConfigError, LoadError
from fusion.super_learner import FusionConfig
from ml.adversarial_training import AdvTrainConfig
from ml.biometric_metrics import DEFAULT_TARGETS
from ml.training import TrainConfig
from models.linear import LinearConfig
from models.noise_aware import NoiseAwareConfig
from models.vit import ViTConfig

logger = logging.getLogger(__name__)

VIT_B = ViTConfig(patch_size=4, embed_dim=32, num_heads=2, head_dim=16, num_blocks=1, ffn_hidden=64)


class ModelEntry(BaseModel):
    """One detector: its architecture, how it trains, and whether it is held out."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    name: str = Field(..., min_length=1, pattern=r"^[A-Za-z0-9_\-]+$")
    kind: Literal["vit", "noise_aware", "linear"]
    vit: Optional[ViTConfig] = None
    noise_aware: Optional[NoiseAwareConfig] = None
    linear: Optional[LinearConfig] = None
    train: TrainConfig = TrainConfig()
    held_out: bool = Field(False, description="excluded from the ensemble; used as a transfer target")

    @model_validator(mode="after")
    def _one_architecture(self) -> "ModelEntry":
        given = [k for k in ("vit", "noise_aware", "linear") if getattr(self, k) is not None]
        if any(k != self.kind for k in given):
            raise ValueError(f"model '{self.name}' of kind {self.kind!r} also sets {given}")
        return self

    def architecture(self) -> Union[ViTConfig, NoiseAwareConfig, LinearConfig]:
        defaults = {"vit": ViTConfig, "noise_aware": NoiseAwareConfig, "linear": LinearConfig}
        return getattr(self, self.kind) or defaults[self.kind]()


def default_models() -> List[ModelEntry]:
    """ViT-A, a finer-patched shallower ViT-B, and the noise-aware CNN."""
    return [
        ModelEntry(name="vit_a", kind="vit"),
        ModelEntry(name="vit_b", kind="vit", vit=VIT_B),
        ModelEntry(name="noise_aware", kind="noise_aware"),
    ]


def default_attacks() -> List[AttackSpec]:
    return [AttackSpec(method="FGSM", epsilon=eps_255(2)), AttackSpec(method="PGD", epsilon=eps_255(2))]


class MetricsConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    targets: List[float] = Field(default_factory=lambda: list(DEFAULT_TARGETS))
    decision_threshold: float = Field(0.5, ge=0.0, le=1.0)
    plots: bool = False
    scores_csv: Optional[str] = Field(None, description="evaluate a score file instead of models")


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    seed: int = Field(..., ge=0)
    out_dir: Optional[str] = None
    dataset: DatasetParams = DatasetParams()
    dataset_path: Optional[str] = Field(None, description="existing MGD1 file; default <out>/dataset.mgd")
    image_folder: Optional[str] = Field(None, description="bonafide/ + morph/ directory used as the test split")
    models: List[ModelEntry] = Field(default_factory=default_models)
    fusion: FusionConfig = FusionConfig()
    attacks: List[AttackSpec] = Field(default_factory=default_attacks)
    attack_examples: Optional[int] = Field(None, ge=1, description="cap on attacked test examples")
    adv_train: AdvTrainConfig = AdvTrainConfig()
    metrics: MetricsConfig = MetricsConfig()
    workers: Optional[int] = Field(None, ge=1)

    @model_validator(mode="after")
    def _unique_names(self) -> "ExperimentConfig":
        names = [m.name for m in self.models]
        if len(set(names)) != len(names):
            raise ValueError(f"model names must be unique, got {names}")
        if "ensemble" in names:
            raise ValueError("'ensemble' is reserved for the fused detector")
        if not any(not m.held_out for m in self.models):
            raise ValueError("at least one model must be part of the ensemble")
        return self

    @property
    def members(self) -> List[ModelEntry]:
        return [m for m in self.models if not m.held_out]

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()


def _dotted(loc) -> str:
    return ".".join(str(part) for part in loc) or "<root>"


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    """
    Raises:
        ConfigError: JSON syntax error (with line and column) or schema
            violation (with the dotted key path of every problem)
    """
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{source}:{e.lineno}:{e.colno}: invalid JSON: {e.msg}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}: top level must be an object, got {type(raw).__name__}")
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        problems = "; ".join(f"{_dotted(err['loc'])}: {err['msg']}" for err in e.errors())
        raise ConfigError(f"{source}: {problems}") from e


def load_config(path: Union[str, Path], overrides: Optional[Dict] = None) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise LoadError(f"config file not found: {path}")
    config = parse_config(path.read_text(encoding="utf-8"), source=str(path))
    if overrides:
        merged = config.model_dump(mode="json")
        merged.update({k: v for k, v in overrides.items() if v is not None})
        config = parse_config(json.dumps(merged), source=f"{path} (with overrides)")
    logger.info(f"Loaded config {path} (hash {config.config_hash()[:12]})")
    return config
