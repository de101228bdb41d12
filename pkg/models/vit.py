"""
Vision Transformer binary classifier (miniature).

tokenize -> num_blocks pre-norm encoder blocks -> LayerNorm -> linear head
on the class-token row. Every function works on a batch [B, C, H, W]; a
single image [C, H, W] is promoted to a batch of one.
"""

import math
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from engine import functional as F
from engine.errors import ConfigError, DimensionError
from engine.tensor import Tensor, as_tensor, parameter
from models.base import Classifier, fan_in_std, linear

ViTParams = Dict[str, Tensor]


class ViTConfig(BaseModel):
    """Architecture of one ViT. Defaults are the desk-scale ViT-Small-Toy."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    image_size: int = Field(32, ge=1, description="H = W in pixels")
    channels: int = Field(3, ge=1)
    patch_size: int = Field(8, ge=1, description="R, patch side in pixels")
    embed_dim: int = Field(64, ge=1, description="D")
    num_heads: int = Field(4, ge=1)
    head_dim: int = Field(16, ge=1, description="d_k")
    num_blocks: int = Field(2, ge=0)
    ffn_hidden: int = Field(128, ge=1)
    num_classes: int = Field(2, ge=2)
    ln_eps: float = Field(1e-6, gt=0)

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    def check(self) -> "ViTConfig":
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image size {self.image_size} is not a multiple of patch size {self.patch_size}"
            )
        if self.num_heads * self.head_dim != self.embed_dim:
            raise ConfigError(
                f"num_heads * head_dim = {self.num_heads * self.head_dim} != embed_dim {self.embed_dim}"
            )
        return self


def init_vit_params(cfg: ViTConfig, rng: np.random.Generator) -> ViTParams:
    cfg.check()
    d, r, c = cfg.embed_dim, cfg.patch_size, cfg.channels
    patch_dim = r * r * c
    shapes = {
        "patch.w": ((patch_dim, d), fan_in_std(patch_dim)),
        "patch.b": ((d,), None),
        "cls": ((d,), 0.02),
        "pos": ((cfg.num_patches + 1, d), 0.02),
    }
    for i in range(cfg.num_blocks):
        p = f"blocks.{i}"
        shapes.update({
            f"{p}.ln1.g": ((d,), "ones"), f"{p}.ln1.b": ((d,), None),
            f"{p}.attn.wq": ((d, d), fan_in_std(d)), f"{p}.attn.bq": ((d,), None),
            f"{p}.attn.wk": ((d, d), fan_in_std(d)), f"{p}.attn.bk": ((d,), None),
            f"{p}.attn.wv": ((d, d), fan_in_std(d)), f"{p}.attn.bv": ((d,), None),
            f"{p}.attn.wo": ((d, d), fan_in_std(d)), f"{p}.attn.bo": ((d,), None),
            f"{p}.ln2.g": ((d,), "ones"), f"{p}.ln2.b": ((d,), None),
            f"{p}.ffn.w1": ((d, cfg.ffn_hidden), fan_in_std(d)), f"{p}.ffn.b1": ((cfg.ffn_hidden,), None),
            f"{p}.ffn.w2": ((cfg.ffn_hidden, d), fan_in_std(cfg.ffn_hidden)), f"{p}.ffn.b2": ((d,), None),
        })
    shapes.update({
        "norm.g": ((d,), "ones"), "norm.b": ((d,), None),
        "head.w": ((d, cfg.num_classes), fan_in_std(d)), "head.b": ((cfg.num_classes,), None),
    })

    params: ViTParams = {}
    for name, (shape, init) in shapes.items():
        if init is None:
            values = np.zeros(shape)
        elif init == "ones":
            values = np.ones(shape)
        else:
            values = rng.normal(0.0, init, size=shape)
        params[name] = parameter(values, name=name)
    return params


def _as_batch(images, cfg: ViTConfig) -> Tensor:
    images = as_tensor(images)
    if images.ndim == 3:
        images = F.reshape(images, (1,) + images.shape)
    expected = (cfg.channels, cfg.image_size, cfg.image_size)
    if images.ndim != 4 or images.shape[1:] != expected:
        raise DimensionError(f"image batch {images.shape} does not match config {expected}")
    return images


def patchify(images: Tensor, patch_size: int) -> Tensor:
    """[B, C, H, W] -> [B, N, R*R*C], patches in row-major order."""
    b, c, h, w = images.shape
    r = patch_size
    grid = F.reshape(images, (b, c, h // r, r, w // r, r))
    grid = F.transpose(grid, (0, 2, 4, 3, 5, 1))
    return F.reshape(grid, (b, (h // r) * (w // r), r * r * c))


def tokenize(images, cfg: ViTConfig, params: ViTParams) -> Tensor:
    """
    Split into N non-overlapping R x R patches, project to D, prepend the
    class token and add positional embeddings.

    Returns:
        [B, N+1, D] token matrix
    """
    cfg.check()
    images = _as_batch(images, cfg)
    batch = images.shape[0]
    d = cfg.embed_dim
    tokens = linear(patchify(images, cfg.patch_size), params["patch.w"], params["patch.b"])
    cls = F.repeat_leading(F.reshape(params["cls"], (1, 1, d)), batch)
    tokens = F.concat([cls, tokens], axis=1)
    pos = F.repeat_leading(F.reshape(params["pos"], (1, cfg.num_patches + 1, d)), batch)
    return F.add(tokens, pos)


def msa(x: Tensor, params: ViTParams, prefix: str, cfg: ViTConfig,
        return_attention: bool = False):
    """
    Multi-head self-attention: softmax(Q K^T / sqrt(d_k)) V per head, heads
    concatenated along channels and projected by W_O.

    Args:
        x: [B, T, D] (already layer-normalized)
        prefix: parameter prefix, e.g. "blocks.0"
        return_attention: also return the attention weights [B, heads, T, T]
    """
    b, t, d = x.shape
    h, dk = cfg.num_heads, cfg.head_dim

    def heads(name: str) -> Tensor:
        projected = linear(x, params[f"{prefix}.attn.w{name}"], params[f"{prefix}.attn.b{name}"])
        split = F.transpose(F.reshape(projected, (b, t, h, dk)), (0, 2, 1, 3))
        return F.reshape(split, (b * h, t, dk))

    q, k, v = heads("q"), heads("k"), heads("v")
    scores = F.mul_scalar(F.matmul(q, F.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dk))
    attention = F.softmax(scores, axis=-1)
    context = F.matmul(attention, v)
    context = F.reshape(F.transpose(F.reshape(context, (b, h, t, dk)), (0, 2, 1, 3)), (b, t, d))
    out = linear(context, params[f"{prefix}.attn.wo"], params[f"{prefix}.attn.bo"])
    if return_attention:
        return out, attention.data.reshape(b, h, t, t)
    return out


def ffn(x: Tensor, params: ViTParams, prefix: str) -> Tensor:
    hidden = F.gelu(linear(x, params[f"{prefix}.ffn.w1"], params[f"{prefix}.ffn.b1"]))
    return linear(hidden, params[f"{prefix}.ffn.w2"], params[f"{prefix}.ffn.b2"])


def encoder_block(x: Tensor, params: ViTParams, index: int, cfg: ViTConfig) -> Tensor:
    """x_hat = x + MSA(LN(x)); y = x_hat + FFN(LN(x_hat))."""
    p = f"blocks.{index}"
    normed = F.layer_norm(x, -1, params[f"{p}.ln1.g"], params[f"{p}.ln1.b"], cfg.ln_eps)
    x_hat = F.add(x, msa(normed, params, p, cfg))
    normed = F.layer_norm(x_hat, -1, params[f"{p}.ln2.g"], params[f"{p}.ln2.b"], cfg.ln_eps)
    return F.add(x_hat, ffn(normed, params, p))


def encode(tokens: Tensor, cfg: ViTConfig, params: ViTParams) -> Tensor:
    """Run all encoder blocks and the final LayerNorm."""
    x = tokens
    for i in range(cfg.num_blocks):
        x = encoder_block(x, params, i, cfg)
    return F.layer_norm(x, -1, params["norm.g"], params["norm.b"], cfg.ln_eps)


def vit_features(images, cfg: ViTConfig, params: ViTParams) -> Tensor:
    """Class-token representation after the final LayerNorm, [B, D]."""
    encoded = encode(tokenize(images, cfg, params), cfg, params)
    cls_row = F.take(encoded, [0], axis=1)
    return F.reshape(cls_row, (encoded.shape[0], cfg.embed_dim))


def vit_forward(images, cfg: ViTConfig, params: ViTParams) -> Tensor:
    """Logits [B, 2] from the class-token row."""
    return linear(vit_features(images, cfg, params), params["head.w"], params["head.b"])


class ViTClassifier(Classifier):
    """ViT detector wrapped in the Classifier contract."""

    kind = "vit"

    def __init__(self, cfg: Optional[ViTConfig] = None, rng: Optional[np.random.Generator] = None,
                 name: str = ""):
        super().__init__(name)
        self.cfg = (cfg or ViTConfig()).check()
        self.params = init_vit_params(self.cfg, rng if rng is not None else np.random.default_rng(0))
        self.eval()

    def features(self, images: Tensor) -> Tensor:
        return vit_features(images, self.cfg, self.params)

    def config_record(self) -> Tuple[List[int], List[float]]:
        c = self.cfg
        ints = [c.image_size, c.channels, c.patch_size, c.embed_dim, c.num_heads,
                c.head_dim, c.num_blocks, c.ffn_hidden, c.num_classes]
        return ints, [c.ln_eps]

    @classmethod
    def from_record(cls, ints: Sequence[int], floats: Sequence[float]) -> "ViTClassifier":
        keys = ["image_size", "channels", "patch_size", "embed_dim", "num_heads",
                "head_dim", "num_blocks", "ffn_hidden", "num_classes"]
        cfg = ViTConfig(**dict(zip(keys, (int(v) for v in ints))), ln_eps=float(floats[0]))
        return cls(cfg)
