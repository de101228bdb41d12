"""
Named random streams on the Philox counter-based generator.

Every random decision in the pipeline draws from ``stream(seed, *path)``,
so a given (seed, path) pair always yields the same sequence regardless of
the order in which other streams are consumed or which thread consumes them.
"""

import hashlib
from typing import Union

import numpy as np

PathPart = Union[str, int]

_MASK64 = (1 << 64) - 1


def stream_key(seed: int, *path: PathPart) -> int:
    """128-bit Philox key: low word = seed, high word = hash of the path."""
    label = "/".join(str(p) for p in path).encode("utf-8")
    digest = int.from_bytes(hashlib.sha256(label).digest()[:8], "little")
    return (digest << 64) | (int(seed) & _MASK64)


def stream(seed: int, *path: PathPart) -> np.random.Generator:
    """
    Independent generator for one named purpose.

    Example:
        stream(7, "identity", 3)  -> latent draws for identity 3 under seed 7
    """
    return np.random.Generator(np.random.Philox(key=stream_key(seed, *path)))


def child_seed(rng: np.random.Generator) -> int:
    """Draw a fresh 63-bit seed from an existing generator."""
    return int(rng.integers(0, 2 ** 63 - 1))
