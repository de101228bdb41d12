"""
Model checkpoints: a config record followed by an MGT1 tensor block.

Layout (little-endian):
    b"MGM1"
    u32 kind-tag length, kind tag (utf-8)
    u32 n_ints,   n_ints   x i64   (config integers)
    u32 n_floats, n_floats x f64   (config floats)
    MGT1 block with parameters and "buffer:"-prefixed running statistics
"""

import logging
import struct
from pathlib import Path
from typing import Dict, Type, Union

from engine.checkpoint import _Reader, tensors_from_bytes, tensors_to_bytes
from engine.errors import FormatError, LoadError
from models.base import Classifier
from models.linear import LinearClassifier
from models.noise_aware import NoiseAwareClassifier
from models.vit import ViTClassifier

logger = logging.getLogger(__name__)

MAGIC = b"MGM1"

MODEL_KINDS: Dict[str, Type[Classifier]] = {
    ViTClassifier.kind: ViTClassifier,
    NoiseAwareClassifier.kind: NoiseAwareClassifier,
    LinearClassifier.kind: LinearClassifier,
}


def model_to_bytes(model: Classifier) -> bytes:
    ints, floats = model.config_record()
    tag = model.kind.encode("utf-8")
    header = [
        MAGIC,
        struct.pack("<I", len(tag)), tag,
        struct.pack("<I", len(ints)), struct.pack(f"<{len(ints)}q", *ints),
        struct.pack("<I", len(floats)), struct.pack(f"<{len(floats)}d", *floats),
    ]
    return b"".join(header) + tensors_to_bytes(model.state_dict())


def model_from_bytes(buffer: bytes, name: str = "") -> Classifier:
    reader = _Reader(buffer)
    magic = reader.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r} at offset 0, expected {MAGIC!r}")
    (tag_len,) = reader.unpack("<I", "kind tag length")
    kind = reader.take(tag_len, "kind tag").decode("utf-8")
    if kind not in MODEL_KINDS:
        raise FormatError(f"unknown model kind {kind!r}; known: {sorted(MODEL_KINDS)}")
    (n_ints,) = reader.unpack("<I", "config integer count")
    ints = reader.unpack(f"<{n_ints}q", "config integers")
    (n_floats,) = reader.unpack("<I", "config float count")
    floats = reader.unpack(f"<{n_floats}d", "config floats")

    model = MODEL_KINDS[kind].from_record(ints, floats)
    model.load_state_dict(tensors_from_bytes(buffer, reader.offset))
    if name:
        model.name = name
    return model


def save_model(model: Classifier, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(model_to_bytes(model))
    logger.info(f"Saved {model.kind} model '{model.name}' to {path}")
    return path


def load_model(path: Union[str, Path], name: str = "") -> Classifier:
    path = Path(path)
    if not path.exists():
        raise LoadError(f"model checkpoint not found: {path}")
    return model_from_bytes(path.read_bytes(), name=name or path.stem)
