"""
Procedural face-like images and morph blending.

A bona fide image is a smooth background, an elliptical head, eye / nose /
mouth primitives placed by a per-identity latent, an identity texture and a
little capture noise. A morph warps both sources with one smooth random
displacement field and blends them.
"""

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy import ndimage

from data.rng import stream
from engine.errors import ContractError

MORPH_ALPHA_RANGE = (0.3, 0.7)


class SyntheticFaceSpec(BaseModel):
    """One capture of one identity."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    seed: int = Field(0, ge=0)
    identity: int = Field(0, ge=0)
    capture: int = Field(0, ge=0)
    image_size: int = Field(32, ge=8)
    noise_level: float = Field(0.03, ge=0.0)


@dataclass(frozen=True)
class IdentityLatent:
    """Geometry and colours shared by every capture of one identity."""

    head_center: Tuple[float, float]
    head_axes: Tuple[float, float]
    skin: np.ndarray
    background: Tuple[np.ndarray, np.ndarray]
    eye_offset: Tuple[float, float]
    eye_radius: float
    nose_length: float
    mouth: Tuple[float, float]
    texture: np.ndarray

    @classmethod
    def draw(cls, seed: int, identity: int) -> "IdentityLatent":
        rng = stream(seed, "identity", identity)
        return cls(
            head_center=(0.5 + rng.uniform(-0.04, 0.04), 0.5 + rng.uniform(-0.04, 0.04)),
            head_axes=(rng.uniform(0.28, 0.36), rng.uniform(0.22, 0.3)),
            skin=rng.uniform(0.45, 0.85, size=3),
            background=(rng.uniform(0.0, 0.5, size=3), rng.uniform(0.0, 0.5, size=3)),
            eye_offset=(rng.uniform(-0.12, -0.06), rng.uniform(0.09, 0.14)),
            eye_radius=rng.uniform(0.03, 0.05),
            nose_length=rng.uniform(0.08, 0.15),
            mouth=(rng.uniform(0.12, 0.2), rng.uniform(0.07, 0.12)),
            # rows: (freq_y, freq_x, phase, amplitude)
            texture=np.column_stack([
                rng.integers(2, 7, size=3),
                rng.integers(2, 7, size=3),
                rng.uniform(0.0, 2.0 * math.pi, size=3),
                rng.uniform(0.01, 0.04, size=3),
            ]),
        )


def quantize(image: np.ndarray) -> np.ndarray:
    """Snap to the 8-bit grid k/255."""
    return np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0


def _blob(yy, xx, cy, cx, ry, rx, softness):
    dist = np.sqrt(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2)
    return 1.0 / (1.0 + np.exp((dist - 1.0) / softness))


def gen_bonafide(spec: SyntheticFaceSpec) -> np.ndarray:
    """
    Render one capture.

    Returns:
        [3, H, W] float64 image on the 8-bit grid
    """
    size = spec.image_size
    latent = IdentityLatent.draw(spec.seed, spec.identity)
    rng = stream(spec.seed, "capture", spec.identity, spec.capture)
    yy, xx = np.meshgrid(np.linspace(0.0, 1.0, size), np.linspace(0.0, 1.0, size), indexing="ij")

    # capture jitter: small pose shift and lighting change
    dy, dx = rng.uniform(-0.02, 0.02, size=2)
    light = rng.uniform(0.9, 1.1)
    cy, cx = latent.head_center[0] + dy, latent.head_center[1] + dx

    top, bottom = latent.background
    image = top[:, None, None] * (1.0 - yy) + bottom[:, None, None] * yy

    head = _blob(yy, xx, cy, cx, latent.head_axes[0], latent.head_axes[1], 0.05)
    face = latent.skin[:, None, None] * light * np.ones_like(yy)
    for fy, fx, phase, amp in latent.texture:
        face = face + amp * np.sin(2.0 * math.pi * (fy * yy + fx * xx) + phase)
    image = image * (1.0 - head) + face * head

    eye_dy, eye_dx = latent.eye_offset
    r = latent.eye_radius
    eyes = _blob(yy, xx, cy + eye_dy, cx - eye_dx, r, r * 1.4, 0.1) \
        + _blob(yy, xx, cy + eye_dy, cx + eye_dx, r, r * 1.4, 0.1)
    image = image * (1.0 - 0.8 * eyes)

    nose = _blob(yy, xx, cy + latent.nose_length / 2.0, cx, latent.nose_length / 2.0, 0.015, 0.2)
    image = image * (1.0 - 0.3 * nose)

    mouth_dy, mouth_rx = latent.mouth
    mouth = _blob(yy, xx, cy + mouth_dy + 0.04, cx, 0.02, mouth_rx, 0.15)
    image = image * (1.0 - 0.5 * mouth[None]) + np.array([0.35, 0.05, 0.05])[:, None, None] * mouth

    image = image + spec.noise_level * rng.normal(0.0, 1.0, size=image.shape)
    return quantize(image)


def displacement_field(size: int, warp_seed: int, amplitude: float = 2.0,
                       components: int = 3) -> np.ndarray:
    """
    Smooth displacement [2, H, W] in pixels: a sum of low-frequency
    sinusoids whose magnitude never exceeds ``amplitude`` per axis.
    """
    if amplitude == 0.0:
        return np.zeros((2, size, size))
    rng = stream(warp_seed, "warp")
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    field = np.zeros((2, size, size))
    for axis in range(2):
        for _ in range(components):
            fy, fx = rng.integers(0, 3, size=2)
            phase = rng.uniform(0.0, 2.0 * math.pi)
            weight = rng.uniform(0.5, 1.0)
            field[axis] += weight * np.sin(2.0 * math.pi * (fy * yy + fx * xx) / size + phase)
    return field * (amplitude / components)


def warp(image: np.ndarray, field: np.ndarray) -> np.ndarray:
    """Resample every channel at (y + dy, x + dx), bilinear, edge-clamped."""
    if not np.any(field):
        return image.copy()
    _, h, w = image.shape
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    coords = np.stack([yy + field[0], xx + field[1]])
    return np.stack([ndimage.map_coordinates(channel, coords, order=1, mode="nearest")
                     for channel in image])


def gen_morph(a: np.ndarray, b: np.ndarray, alpha: float, warp_seed: int,
              identities: Optional[Tuple[int, int]] = None, amplitude: float = 2.0,
              strict: bool = True) -> np.ndarray:
    """
    morph = clamp(alpha * warp(a) + (1 - alpha) * warp(b), 0, 1)

    Both sources share one displacement field derived from ``warp_seed``.

    Args:
        identities: (identity of a, identity of b), checked when ``strict``
        strict: enforce alpha in [0.3, 0.7] and distinct identities
    """
    if a.shape != b.shape:
        raise ContractError(f"morph sources differ in shape: {a.shape} vs {b.shape}")
    if strict:
        lo, hi = MORPH_ALPHA_RANGE
        if not lo <= alpha <= hi:
            raise ContractError(f"blend alpha {alpha} outside [{lo}, {hi}]")
        if identities is None or identities[0] == identities[1]:
            raise ContractError(f"morph sources must be distinct identities, got {identities}")
    field = displacement_field(a.shape[-1], warp_seed, amplitude)
    return np.clip(alpha * warp(a, field) + (1.0 - alpha) * warp(b, field), 0.0, 1.0)
