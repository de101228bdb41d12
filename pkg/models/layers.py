"""
Building blocks shared by the convolutional models.
"""

from typing import Dict

import numpy as np

from engine import functional as F
from engine.tensor import Tensor, parameter
from models.base import fan_in_std


def conv_params(rng: np.random.Generator, prefix: str, out_ch: int, in_ch: int,
                kernel: int = 3, zero: bool = False) -> Dict[str, Tensor]:
    shape = (out_ch, in_ch, kernel, kernel)
    weights = np.zeros(shape) if zero else rng.normal(0.0, fan_in_std(in_ch * kernel * kernel), shape)
    return {
        f"{prefix}.w": parameter(weights, name=f"{prefix}.w"),
        f"{prefix}.b": parameter(np.zeros(out_ch), name=f"{prefix}.b"),
    }


def bn_params(prefix: str, channels: int):
    params = {
        f"{prefix}.g": parameter(np.ones(channels), name=f"{prefix}.g"),
        f"{prefix}.b": parameter(np.zeros(channels), name=f"{prefix}.b"),
    }
    buffers = {f"{prefix}.mean": np.zeros(channels), f"{prefix}.var": np.ones(channels)}
    return params, buffers


def conv(x: Tensor, params: Dict[str, Tensor], prefix: str, dilation: int = 1) -> Tensor:
    kernel = params[f"{prefix}.w"]
    pad = dilation * (kernel.shape[-1] // 2)
    out = F.conv2d(x, kernel, dilation=dilation, padding=pad)
    return F.channel_affine(out, shift=params[f"{prefix}.b"], axis=1)


def batch_norm(x: Tensor, params: Dict[str, Tensor], buffers: Dict[str, np.ndarray], prefix: str,
               training: bool, eps: float = 1e-5, momentum: float = 0.1) -> Tensor:
    """
    Per-channel batch normalization of [B, C, H, W].

    Training mode normalizes with batch statistics and updates the running
    buffers; eval mode uses the running buffers only.
    """
    if training:
        batch_mean = np.mean(x.data, axis=(0, 2, 3))
        batch_var = np.var(x.data, axis=(0, 2, 3))
        buffers[f"{prefix}.mean"] = (1.0 - momentum) * buffers[f"{prefix}.mean"] + momentum * batch_mean
        buffers[f"{prefix}.var"] = (1.0 - momentum) * buffers[f"{prefix}.var"] + momentum * batch_var
        normed = F.normalize(x, (0, 2, 3), eps)
    else:
        scale = 1.0 / np.sqrt(buffers[f"{prefix}.var"] + eps)
        shift = -buffers[f"{prefix}.mean"] * scale
        normed = F.channel_affine(x, scale=scale, shift=shift, axis=1)
    return F.channel_affine(normed, scale=params[f"{prefix}.g"], shift=params[f"{prefix}.b"], axis=1)
