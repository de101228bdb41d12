"""
Training input pipeline: horizontal-flip augmentation and class-balanced batching.
"""

from typing import Iterator, Tuple

import numpy as np

from engine.errors import ContractError
from models.base import BONA_FIDE, MORPH


def augment_flip(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Mirror the last (width) axis with probability 0.5."""
    if rng.random() < 0.5:
        return image[..., ::-1].copy()
    return image


def flip_batch(images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """``augment_flip`` applied to every image of a batch, one draw per image in order."""
    return np.stack([augment_flip(img, rng) for img in images])


def balanced_batches(labels: np.ndarray, batch_size: int, rng: np.random.Generator,
                     strict: bool = False) -> Iterator[np.ndarray]:
    """
    Yield index batches whose expected class ratio is 1:1.

    Every majority-class index appears exactly once per epoch; the minority
    class is drawn with replacement to the same count. A balanced label set
    gives a plain shuffle. In strict mode every batch holds
    floor(batch_size/2) of one class and the rest of the other (alternating),
    so class counts per batch differ by at most one.
    """
    if batch_size < 2:
        raise ContractError(f"batch_size must be at least 2, got {batch_size}")
    labels = np.asarray(labels)
    bona = np.flatnonzero(labels == BONA_FIDE)
    morph = np.flatnonzero(labels == MORPH)
    if len(bona) == 0 or len(morph) == 0:
        raise ContractError(f"both classes are needed, got {len(bona)} bona fide and {len(morph)} morph")

    if len(bona) == len(morph) and not strict:
        order = rng.permutation(np.concatenate([bona, morph]))
        yield from _chunks(order, batch_size)
        return

    major, minor = (bona, morph) if len(bona) >= len(morph) else (morph, bona)
    major = rng.permutation(major)
    minor = rng.choice(minor, size=len(major), replace=True) if len(minor) < len(major) \
        else rng.permutation(minor)

    if not strict:
        yield from _chunks(rng.permutation(np.concatenate([major, minor])), batch_size)
        return

    half = batch_size // 2
    i = j = step = 0
    while i < len(major):
        want_major = half if step % 2 == 0 else batch_size - half
        n_major = min(want_major, len(major) - i)
        n_minor = min(batch_size - want_major, len(minor) - j)
        batch = np.concatenate([major[i:i + n_major], minor[j:j + n_minor]])
        i += n_major
        j += n_minor
        step += 1
        yield rng.permutation(batch)


def _chunks(order: np.ndarray, batch_size: int) -> Iterator[np.ndarray]:
    for start in range(0, len(order), batch_size):
        yield order[start:start + batch_size]


def iter_batches(images: np.ndarray, labels: np.ndarray, batch_size: int, rng: np.random.Generator,
                 augment: bool = True, strict: bool = False) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """One epoch of balanced (images, labels) batches, flipped when ``augment``."""
    for idx in balanced_batches(labels, batch_size, rng, strict=strict):
        batch = images[idx]
        if augment:
            batch = flip_batch(batch, rng)
        yield batch, labels[idx]
