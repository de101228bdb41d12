"""
Synthetic morph dataset: generation, identity-disjoint splits and the MGD1
file format.

MGD1 layout (little-endian):
    b"MGD1"
    u32 version, u32 n, u32 H, u32 W, u32 C, u64 record-table offset
    n x C x H x W u8 pixels (value k means k / 255)
    n x 22-byte records: u8 label, u8 split, i32 identity, i32 source_a,
                         i32 source_b, f64 alpha
Bona fide records carry source_a = source_b = -1 and alpha = 0;
morph records carry identity = -1.
"""

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from joblib import Parallel, delayed
from pydantic import BaseModel, ConfigDict, Field, model_validator

from data.rng import child_seed, stream
from data.synthetic_faces import SyntheticFaceSpec, gen_bonafide, gen_morph, quantize
from engine.checkpoint import _Reader
from engine.errors import ConfigError, ContractError, FormatError, LoadError
from models.base import BONA_FIDE, MORPH

logger = logging.getLogger(__name__)

MAGIC = b"MGD1"
VERSION = 1
SPLITS = ("train", "val", "test")
HEADER = struct.Struct("<4sIIIIIQ")
RECORD = np.dtype([("label", "u1"), ("split", "u1"), ("identity", "<i4"),
                   ("source_a", "<i4"), ("source_b", "<i4"), ("alpha", "<f8")])


class ShiftParams(BaseModel):
    """Generation overrides for a distribution-shifted test split."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    alpha_range: Tuple[float, float] = (0.3, 0.7)
    warp_amplitude: float = Field(2.0, ge=0.0)
    noise_level: float = Field(0.03, ge=0.0)


class DatasetParams(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    n_identities: int = Field(30, ge=6)
    bonafide_per_id: int = Field(4, ge=1)
    n_morphs: int = Field(60, ge=0)
    image_size: int = Field(32, ge=8)
    noise_level: float = Field(0.03, ge=0.0)
    alpha_range: Tuple[float, float] = (0.3, 0.7)
    warp_amplitude: float = Field(2.0, ge=0.0)
    split_fractions: Tuple[float, float, float] = (0.6, 0.2, 0.2)
    shift: Optional[ShiftParams] = None

    @model_validator(mode="after")
    def _check(self) -> "DatasetParams":
        if abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1, got {self.split_fractions}")
        for name, rng in (("alpha_range", self.alpha_range),
                          ("shift.alpha_range", self.shift.alpha_range if self.shift else (0.3, 0.7))):
            if not 0.3 <= rng[0] <= rng[1] <= 0.7:
                raise ValueError(f"{name} must lie within [0.3, 0.7], got {rng}")
        return self


def shifted_variants(base: DatasetParams, count: int, seed: int) -> List[DatasetParams]:
    """``count`` deterministic test-split shifts of ``base`` (warp, blend and noise changes)."""
    rng = stream(seed, "shift-variants")
    variants = []
    for _ in range(count):
        lo = rng.uniform(0.3, 0.45)
        shift = ShiftParams(
            alpha_range=(lo, rng.uniform(max(lo, 0.55), 0.7)),
            warp_amplitude=float(rng.uniform(0.5, 3.5)),
            noise_level=float(rng.uniform(0.01, 0.06)),
        )
        variants.append(base.model_copy(update={"shift": shift}))
    return variants


@dataclass
class Dataset:
    """
    Images with labels, split tags and provenance.

    Attributes:
        images: [n, C, H, W] float64 in [0, 1] on the 8-bit grid
        labels: [n] 0 = bona fide, 1 = morph
        splits: [n] index into SPLITS
        identities: [n] identity of bona fide samples, -1 for morphs
        sources: [n, 2] indices of the two morph sources, -1 for bona fide
        alphas: [n] blend weight of source_a, 0 for bona fide
    """

    images: np.ndarray
    labels: np.ndarray
    splits: np.ndarray
    identities: np.ndarray
    sources: np.ndarray
    alphas: np.ndarray

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def indices(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.splits == SPLITS.index(split))

    def subset(self, split: str) -> Tuple[np.ndarray, np.ndarray]:
        idx = self.indices(split)
        return self.images[idx], self.labels[idx]

    def labeled_split(self, preferred: str, fallback: str = "train") -> Tuple[np.ndarray, np.ndarray]:
        """``preferred`` when it holds both classes, otherwise ``fallback``."""
        images, labels = self.subset(preferred)
        if len(np.unique(labels)) < 2:
            logger.warning(f"{preferred} split lacks a class, using the {fallback} split")
            images, labels = self.subset(fallback)
        return images, labels

    def class_counts(self, split: Optional[str] = None) -> Dict[str, int]:
        labels = self.labels if split is None else self.labels[self.indices(split)]
        return {"bona_fide": int(np.sum(labels == BONA_FIDE)), "morph": int(np.sum(labels == MORPH))}

    def equals(self, other: "Dataset") -> bool:
        return all(np.array_equal(getattr(self, f), getattr(other, f))
                   for f in ("images", "labels", "splits", "identities", "sources", "alphas"))


def _split_identities(n_identities: int, fractions, rng) -> List[np.ndarray]:
    order = rng.permutation(n_identities)
    n_train = int(round(fractions[0] * n_identities))
    n_val = int(round(fractions[1] * n_identities))
    return [order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:]]


def _morph_counts(n_morphs: int, fractions) -> List[int]:
    n_train = int(round(fractions[0] * n_morphs))
    n_val = int(round(fractions[1] * n_morphs))
    return [n_train, n_val, n_morphs - n_train - n_val]


def gen_dataset(seed: int, params: Optional[DatasetParams] = None, workers: int = 1) -> Dataset:
    """
    Generate a full dataset.

    Bona fide samples come first (identity-major), then morphs. Each morph's
    sources are two bona fide samples of distinct identities in its own
    split. When ``params.shift`` is set, the test split is rendered with the
    shifted noise, warp and blend settings.
    """
    params = params or DatasetParams()
    rng = stream(seed, "dataset")
    id_groups = _split_identities(params.n_identities, params.split_fractions, rng)
    morph_counts = _morph_counts(params.n_morphs, params.split_fractions)
    for split, (group, count) in enumerate(zip(id_groups, morph_counts)):
        if count and len(group) < 2:
            raise ConfigError(
                f"{SPLITS[split]} split has {len(group)} identities; morphs need at least 2"
            )

    split_of_identity = np.empty(params.n_identities, dtype=np.int64)
    for split, group in enumerate(id_groups):
        split_of_identity[group] = split

    def noise_for(split: int) -> float:
        if params.shift is not None and split == SPLITS.index("test"):
            return params.shift.noise_level
        return params.noise_level

    specs = [
        SyntheticFaceSpec(seed=seed, identity=identity, capture=capture,
                          image_size=params.image_size,
                          noise_level=noise_for(int(split_of_identity[identity])))
        for identity in range(params.n_identities)
        for capture in range(params.bonafide_per_id)
    ]
    bona = Parallel(n_jobs=workers, backend="threading")(delayed(gen_bonafide)(s) for s in specs)
    n_bona = len(specs)

    images: List[np.ndarray] = list(bona)
    labels = [BONA_FIDE] * n_bona
    splits = [int(split_of_identity[s.identity]) for s in specs]
    identities = [s.identity for s in specs]
    sources = [(-1, -1)] * n_bona
    alphas = [0.0] * n_bona

    for split, (group, count) in enumerate(zip(id_groups, morph_counts)):
        shifted = params.shift is not None and split == SPLITS.index("test")
        alpha_range = params.shift.alpha_range if shifted else params.alpha_range
        amplitude = params.shift.warp_amplitude if shifted else params.warp_amplitude
        for _ in range(count):
            id_a, id_b = rng.choice(group, size=2, replace=False)
            src_a = int(id_a) * params.bonafide_per_id + int(rng.integers(params.bonafide_per_id))
            src_b = int(id_b) * params.bonafide_per_id + int(rng.integers(params.bonafide_per_id))
            alpha = float(rng.uniform(*alpha_range))
            morph = gen_morph(images[src_a], images[src_b], alpha, child_seed(rng),
                              identities=(int(id_a), int(id_b)), amplitude=amplitude)
            images.append(quantize(morph))
            labels.append(MORPH)
            splits.append(split)
            identities.append(-1)
            sources.append((src_a, src_b))
            alphas.append(alpha)

    dataset = Dataset(
        images=np.stack(images),
        labels=np.asarray(labels, dtype=np.int64),
        splits=np.asarray(splits, dtype=np.int64),
        identities=np.asarray(identities, dtype=np.int64),
        sources=np.asarray(sources, dtype=np.int64).reshape(-1, 2),
        alphas=np.asarray(alphas, dtype=np.float64),
    )
    logger.info(f"Generated dataset: {n_bona} bona fide, {params.n_morphs} morphs, seed {seed}")
    return dataset


def dataset_to_bytes(ds: Dataset) -> bytes:
    n, c, h, w = ds.images.shape
    pixels = np.round(ds.images * 255.0).astype(np.uint8)
    records = np.zeros(n, dtype=RECORD)
    records["label"] = ds.labels
    records["split"] = ds.splits
    records["identity"] = ds.identities
    records["source_a"] = ds.sources[:, 0]
    records["source_b"] = ds.sources[:, 1]
    records["alpha"] = ds.alphas
    offset = HEADER.size + pixels.nbytes
    return HEADER.pack(MAGIC, VERSION, n, h, w, c, offset) + pixels.tobytes() + records.tobytes()


def dataset_from_bytes(buffer: bytes) -> Dataset:
    reader = _Reader(buffer)
    magic = reader.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r} at offset 0, expected {MAGIC!r}")
    version, n, h, w, c, offset = reader.unpack("<IIIIIQ", "header")
    if version != VERSION:
        raise FormatError(f"unsupported dataset version {version}")
    if offset != HEADER.size + n * c * h * w:
        raise FormatError(f"record table offset {offset} does not follow {n} images of {c}x{h}x{w}")
    pixels = np.frombuffer(reader.take(n * c * h * w, "pixel data"), dtype=np.uint8)
    records = np.frombuffer(reader.take(n * RECORD.itemsize, "label records"), dtype=RECORD)
    if not reader.at_end():
        raise FormatError(f"{len(buffer) - reader.offset} trailing bytes at offset {reader.offset}")
    return Dataset(
        images=pixels.reshape(n, c, h, w).astype(np.float64) / 255.0,
        labels=records["label"].astype(np.int64),
        splits=records["split"].astype(np.int64),
        identities=records["identity"].astype(np.int64),
        sources=np.stack([records["source_a"], records["source_b"]], axis=1).astype(np.int64),
        alphas=records["alpha"].astype(np.float64),
    )


def save_dataset(ds: Dataset, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dataset_to_bytes(ds))
    logger.info(f"Saved dataset ({len(ds)} images) to {path}")
    return path


def load_dataset(path: Union[str, Path]) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise LoadError(f"dataset file not found: {path}")
    return dataset_from_bytes(path.read_bytes())


def check_provenance(ds: Dataset) -> None:
    """Raise ContractError unless every morph resolves to two bona fide sources of distinct identities in its split."""
    for i in np.flatnonzero(ds.labels == MORPH):
        a, b = ds.sources[i]
        for src in (a, b):
            if not 0 <= src < len(ds) or ds.labels[src] != BONA_FIDE or ds.splits[src] != ds.splits[i]:
                raise ContractError(f"morph {i} has invalid source {src}")
        if ds.identities[a] == ds.identities[b]:
            raise ContractError(f"morph {i} blends two captures of identity {ds.identities[a]}")
