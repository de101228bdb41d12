"""
Shared plumbing for sub-commands: output layout, manifests, model and
dataset loading.

Layout under the output root:
    data/       gen-data      dataset.mgd, dataset_summary.json
    train/      train         checkpoints/*.mgm, fusion_head.mgt, traces/*.csv
    adv_train/  adv-train     checkpoints/*.mgm, fusion_head.mgt, trace.csv
    attack/     attack        attack_log.csv, transfer_matrix.csv, adversarial/*.mgt
    eval/       eval          report.json, metrics.csv, det/*.csv

Each directory also holds manifest.json (config hash, seed, library
versions, sha256 of every output) and timings.json (wall time).
"""

import hashlib
import json
import logging
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

import joblib
import matplotlib
import numpy as np
import pandas as pd
import pydantic
import scipy

from cli.config import settings
from cli.schemas import ExperimentConfig, ModelEntry
from data.dataset import Dataset, gen_dataset, load_dataset, save_dataset
from data.image_folder import load_image_folder
from data.rng import stream
from engine.errors import LoadError
from fusion.ensemble import Ensemble, EnsembleConfig, MemberRef
from models.base import Classifier
from models.checkpoint import load_model
from models.linear import LinearClassifier
from models.noise_aware import NoiseAwareClassifier
from models.vit import ViTClassifier

logger = logging.getLogger(__name__)

STAGE_DIRS = {"gen-data": "data", "train": "train", "adv-train": "adv_train", "attack": "attack", "eval": "eval"}
HEAD_FILE = "fusion_head.mgt"

MODEL_CLASSES = {"vit": ViTClassifier, "noise_aware": NoiseAwareClassifier, "linear": LinearClassifier}


def library_versions() -> Dict[str, str]:
    return {
        "python": platform.python_version(),
        "morphguard": settings.APP_VERSION,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pandas": pd.__version__,
        "pydantic": pydantic.VERSION,
        "joblib": joblib.__version__,
        "matplotlib": matplotlib.__version__,
    }


def file_sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunContext:
    command: str
    config: ExperimentConfig
    root: Path
    workers: int
    outputs: List[Path] = field(default_factory=list)
    volatile: List[Path] = field(default_factory=list)
    stages: Dict[str, float] = field(default_factory=dict)
    started: float = field(default_factory=time.perf_counter)

    @property
    def seed(self) -> int:
        return self.config.seed

    def stage_dir(self, command: Optional[str] = None) -> Path:
        return self.root / STAGE_DIRS[command or self.command]

    def path(self, *parts: str) -> Path:
        path = self.stage_dir().joinpath(*parts)
        path.parent.mkdir(parents=True, exist_ok=True)
        return path

    def record(self, path: Union[str, Path], volatile: bool = False) -> Path:
        """Register an output; volatile outputs (wall-time columns) are listed without a hash."""
        path = Path(path)
        (self.volatile if volatile else self.outputs).append(path)
        logger.info(f"Wrote {path}")
        return path

    def mark(self, stage: str, since: float) -> None:
        self.stages[stage] = time.perf_counter() - since

    def write_manifest(self) -> Path:
        """manifest.json is byte-stable across reruns; wall time goes to timings.json."""
        base = self.stage_dir()
        manifest = {
            "command": self.command,
            "config_hash": self.config.config_hash(),
            "seed": self.seed,
            "versions": library_versions(),
            "config": self.config.model_dump(mode="json"),
            "outputs": {p.relative_to(base).as_posix(): file_sha256(p)
                        for p in sorted(set(self.outputs)) if p.exists()},
            "volatile_outputs": sorted(p.relative_to(base).as_posix() for p in set(self.volatile)),
        }
        path = base / "manifest.json"
        base.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        timings = {"command": self.command, "wall_time_s": time.perf_counter() - self.started,
                   "stages": self.stages}
        (base / "timings.json").write_text(json.dumps(timings, indent=2, sort_keys=True) + "\n",
                                           encoding="utf-8")
        logger.info(f"Wrote manifest {path} ({len(manifest['outputs'])} outputs)")
        return path


def make_context(command: str, config: ExperimentConfig, out: Optional[str] = None,
                 workers: Optional[int] = None) -> RunContext:
    root = Path(out or config.out_dir or settings.OUT_ROOT)
    return RunContext(command=command, config=config, root=root,
                      workers=workers or config.workers or settings.WORKERS)


# ---------- data ----------

def dataset_path(ctx: RunContext) -> Path:
    if ctx.config.dataset_path:
        return Path(ctx.config.dataset_path)
    return ctx.stage_dir("gen-data") / "dataset.mgd"


def build_dataset(ctx: RunContext) -> Dataset:
    """Synthetic dataset, or the image folder as a test-only dataset."""
    if ctx.config.image_folder:
        return load_image_folder(ctx.config.image_folder, size=ctx.config.dataset.image_size)
    return gen_dataset(ctx.seed, ctx.config.dataset, workers=ctx.workers)


def load_run_dataset(ctx: RunContext) -> Dataset:
    path = dataset_path(ctx)
    if not path.exists():
        raise LoadError(f"dataset not found: {path} (run gen-data first or set dataset_path)")
    return load_dataset(path)


def save_run_dataset(ctx: RunContext, ds: Dataset) -> Path:
    return ctx.record(save_dataset(ds, ctx.path("dataset.mgd")))


# ---------- models ----------

def build_model(entry: ModelEntry, seed: int) -> Classifier:
    cls = MODEL_CLASSES[entry.kind]
    return cls(entry.architecture(), rng=stream(seed, "init", entry.name), name=entry.name)


def checkpoint_path(ctx: RunContext, name: str, command: str = "train") -> Path:
    return ctx.stage_dir(command) / "checkpoints" / f"{name}.mgm"


def load_models(ctx: RunContext, entries: List[ModelEntry], command: str = "train") -> Dict[str, Classifier]:
    """Trained checkpoints by name (LoadError names the missing path)."""
    return {e.name: load_model(checkpoint_path(ctx, e.name, command), name=e.name) for e in entries}


def head_path(ctx: RunContext, command: str = "train") -> Path:
    return ctx.stage_dir(command) / "checkpoints" / HEAD_FILE


def ensemble_config_path(ctx: RunContext, command: str = "train") -> Path:
    return ctx.stage_dir(command) / "ensemble.json"


def write_ensemble_config(ctx: RunContext, ensemble: Ensemble) -> Path:
    """Member and head checkpoints relative to the stage directory."""
    cfg = EnsembleConfig(
        members=[MemberRef(name=m.name, checkpoint=f"checkpoints/{m.name}.mgm") for m in ensemble.members],
        fusion=ensemble.fusion,
        head_checkpoint=f"checkpoints/{HEAD_FILE}" if ensemble.head is not None else None,
    )
    path = ensemble_config_path(ctx)
    path.write_text(cfg.model_dump_json(indent=2) + "\n", encoding="utf-8")
    return ctx.record(path)


def load_ensemble(ctx: RunContext, command: str = "train") -> Ensemble:
    path = ensemble_config_path(ctx, command)
    if not path.exists():
        raise LoadError(f"ensemble description not found: {path} (run {command} first)")
    cfg = EnsembleConfig.model_validate_json(path.read_text(encoding="utf-8"))
    ensemble = Ensemble.from_config(cfg, base_dir=path.parent)
    ensemble.eval()
    return ensemble

