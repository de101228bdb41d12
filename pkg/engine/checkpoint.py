"""
MGT1 tensor checkpoint format.

Layout (all integers little-endian):
    b"MGT1"
    repeated until end of file:
        u32 name length, name bytes (utf-8)
        u32 rank, rank x i64 extents
        prod(extents) x f64 values (row-major)
"""

import struct
from pathlib import Path
from typing import Dict, Mapping, Tuple, Union

import numpy as np

from engine.errors import FormatError

MAGIC = b"MGT1"


def tensors_to_bytes(named: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC]
    for name, array in named.items():
        array = np.ascontiguousarray(array, dtype="<f8")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<I", array.ndim))
        parts.append(struct.pack(f"<{array.ndim}q", *array.shape))
        parts.append(array.tobytes(order="C"))
    return b"".join(parts)


class _Reader:
    """Bounds-checked cursor over a byte buffer."""

    def __init__(self, buffer: bytes, offset: int = 0):
        self.buffer = buffer
        self.offset = offset

    def at_end(self) -> bool:
        return self.offset >= len(self.buffer)

    def take(self, count: int, what: str) -> bytes:
        end = self.offset + count
        if end > len(self.buffer):
            raise FormatError(
                f"truncated file: needed {count} bytes for {what} at offset {self.offset}, "
                f"only {len(self.buffer) - self.offset} left"
            )
        chunk = self.buffer[self.offset:end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str, what: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def tensors_from_bytes(buffer: bytes, offset: int = 0) -> Dict[str, np.ndarray]:
    reader = _Reader(buffer, offset)
    magic = reader.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r} at offset {offset}, expected {MAGIC!r}")
    named: Dict[str, np.ndarray] = {}
    while not reader.at_end():
        (name_len,) = reader.unpack("<I", "name length")
        name = reader.take(name_len, "tensor name").decode("utf-8")
        (rank,) = reader.unpack("<I", f"rank of {name}")
        shape = reader.unpack(f"<{rank}q", f"extents of {name}") if rank else ()
        count = int(np.prod(shape)) if rank else 1
        raw = reader.take(8 * count, f"values of {name}")
        named[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
    return named


def save_tensors(path: Union[str, Path], named: Mapping[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(tensors_to_bytes(named))
    return path


def load_tensors(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    return tensors_from_bytes(Path(path).read_bytes())
