"""
Noise-aware CNN detector.

A dilated-convolution denoiser estimates the clean image; the classifier
only sees the residual (image - clean estimate), i.e. the artifacts left by
blending. Each denoiser layer:

    h   = conv_dilated(x)
    h   = s * h + BN(h)              identity branch with scale + batch-norm branch
    h   = leaky_relu(h)
    out = a * h + b * IN(h)          adaptive normalization, learnable scalars a, b

followed by a zero-initialized 3x3 output conv that predicts the noise.
"""

from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from engine import functional as F
from engine.errors import ConfigError, DimensionError
from engine.tensor import Tensor, as_tensor, parameter
from models.base import Classifier, fan_in_std
from models.layers import batch_norm, bn_params, conv, conv_params


class DenoiserConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    num_layers: int = Field(7, ge=1)
    kernel_size: int = Field(3, ge=1)
    width: int = Field(16, ge=1)
    dilations: Tuple[int, ...] = (1, 2, 3, 4, 3, 2, 1)
    leaky_slope: float = Field(0.2, ge=0.0)
    bn_eps: float = Field(1e-5, gt=0)
    bn_momentum: float = Field(0.1, gt=0, le=1)

    def check(self) -> "DenoiserConfig":
        if len(self.dilations) != self.num_layers:
            raise ConfigError(
                f"dilation schedule has {len(self.dilations)} entries for {self.num_layers} layers"
            )
        if any(d < 1 for d in self.dilations):
            raise ConfigError(f"dilations must be positive: {self.dilations}")
        middle = (self.num_layers - 1) // 2
        rising = self.dilations[:middle + 1]
        if any(b < a for a, b in zip(rising, rising[1:])):
            raise ConfigError(f"dilations must not shrink before the middle layer: {self.dilations}")
        return self


class ResidualCNNConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    width: int = Field(16, ge=1)
    num_blocks: int = Field(2, ge=0)
    num_classes: int = Field(2, ge=2)
    bn_eps: float = Field(1e-5, gt=0)
    bn_momentum: float = Field(0.1, gt=0, le=1)


class NoiseAwareConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    image_size: int = Field(32, ge=1)
    channels: int = Field(3, ge=1)
    denoiser: DenoiserConfig = DenoiserConfig()
    classifier: ResidualCNNConfig = ResidualCNNConfig()


def init_denoiser(cfg: DenoiserConfig, channels: int, rng: np.random.Generator):
    cfg.check()
    params: Dict[str, Tensor] = {}
    buffers: Dict[str, np.ndarray] = {}
    in_ch = channels
    for i in range(cfg.num_layers):
        p = f"den.{i}"
        params.update(conv_params(rng, f"{p}.conv", cfg.width, in_ch, cfg.kernel_size))
        params[f"{p}.id_scale"] = parameter(np.ones(cfg.width), name=f"{p}.id_scale")
        bn_p, bn_b = bn_params(f"{p}.bn", cfg.width)
        params.update(bn_p)
        buffers.update(bn_b)
        params[f"{p}.an.a"] = parameter(1.0, name=f"{p}.an.a")
        params[f"{p}.an.b"] = parameter(0.0, name=f"{p}.an.b")
        in_ch = cfg.width
    params.update(conv_params(rng, "den.out", channels, in_ch, 3, zero=True))
    return params, buffers


def denoiser_layer(x: Tensor, params, buffers, index: int, cfg: DenoiserConfig, training: bool) -> Tensor:
    p = f"den.{index}"
    h = conv(x, params, f"{p}.conv", dilation=cfg.dilations[index])
    identity = F.channel_affine(h, scale=params[f"{p}.id_scale"], axis=1)
    normed = batch_norm(h, params, buffers, f"{p}.bn", training, cfg.bn_eps, cfg.bn_momentum)
    h = F.leaky_relu(F.add(identity, normed), cfg.leaky_slope)
    return F.add(F.mul(params[f"{p}.an.a"], h), F.mul(params[f"{p}.an.b"], F.instance_norm(h)))


def denoise(images, cfg: DenoiserConfig, params, buffers, training: bool = False):
    """
    Returns:
        (clean_estimate, residual), both shaped like ``images``;
        residual = images - clean_estimate
    """
    images = as_tensor(images)
    h = images
    for i in range(cfg.num_layers):
        h = denoiser_layer(h, params, buffers, i, cfg, training)
    noise = conv(h, params, "den.out", dilation=1)
    clean = F.sub(images, noise)
    residual = F.sub(images, clean)
    return clean, residual


def init_residual_cnn(cfg: ResidualCNNConfig, channels: int, rng: np.random.Generator):
    params: Dict[str, Tensor] = {}
    buffers: Dict[str, np.ndarray] = {}
    w = cfg.width
    params.update(conv_params(rng, "cls.stem", w, channels))
    bn_p, bn_b = bn_params("cls.stem.bn", w)
    params.update(bn_p)
    buffers.update(bn_b)
    for j in range(cfg.num_blocks):
        for k in (1, 2):
            p = f"cls.block{j}.conv{k}"
            params.update(conv_params(rng, p, w, w))
            bn_p, bn_b = bn_params(f"{p}.bn", w)
            params.update(bn_p)
            buffers.update(bn_b)
    params["head.w"] = parameter(rng.normal(0.0, fan_in_std(w), (w, cfg.num_classes)), name="head.w")
    params["head.b"] = parameter(np.zeros(cfg.num_classes), name="head.b")
    return params, buffers


def residual_cnn_features(x: Tensor, cfg: ResidualCNNConfig, params, buffers, training: bool) -> Tensor:
    """Stem conv, residual blocks, global average pool -> [B, width]."""

    def conv_bn(inp: Tensor, prefix: str) -> Tensor:
        return batch_norm(conv(inp, params, prefix), params, buffers, f"{prefix}.bn",
                          training, cfg.bn_eps, cfg.bn_momentum)

    h = F.relu(conv_bn(x, "cls.stem"))
    for j in range(cfg.num_blocks):
        branch = F.relu(conv_bn(h, f"cls.block{j}.conv1"))
        branch = conv_bn(branch, f"cls.block{j}.conv2")
        h = F.relu(F.add(h, branch))
    return F.mean(h, axis=(2, 3))


class NoiseAwareClassifier(Classifier):
    """Residual classifier behind a dilated denoiser."""

    kind = "noise_aware"

    def __init__(self, cfg: Optional[NoiseAwareConfig] = None, rng: Optional[np.random.Generator] = None,
                 name: str = ""):
        super().__init__(name)
        self.cfg = cfg or NoiseAwareConfig()
        rng = rng if rng is not None else np.random.default_rng(0)
        den_p, den_b = init_denoiser(self.cfg.denoiser, self.cfg.channels, rng)
        cls_p, cls_b = init_residual_cnn(self.cfg.classifier, self.cfg.channels, rng)
        self.params = {**den_p, **cls_p}
        self.buffers = {**den_b, **cls_b}
        self.eval()

    def _check(self, images: Tensor) -> Tensor:
        if images.ndim == 3:
            images = F.reshape(images, (1,) + images.shape)
        expected = (self.cfg.channels, self.cfg.image_size, self.cfg.image_size)
        if images.ndim != 4 or images.shape[1:] != expected:
            raise DimensionError(f"image batch {images.shape} does not match config {expected}")
        return images

    def denoise(self, images) -> Tuple[Tensor, Tensor]:
        images = self._check(as_tensor(images))
        return denoise(images, self.cfg.denoiser, self.params, self.buffers, self.training)

    def classify_residual(self, residual) -> Tensor:
        """Logits of the residual classifier for a given residual."""
        return self.head(self.residual_features(as_tensor(residual)))

    def residual_features(self, residual: Tensor) -> Tensor:
        return residual_cnn_features(residual, self.cfg.classifier, self.params, self.buffers, self.training)

    def features(self, images: Tensor) -> Tensor:
        _, residual = self.denoise(images)
        return self.residual_features(residual)

    def config_record(self) -> Tuple[List[int], List[float]]:
        d, c = self.cfg.denoiser, self.cfg.classifier
        ints = [self.cfg.image_size, self.cfg.channels, d.num_layers, d.kernel_size, d.width,
                *d.dilations, c.width, c.num_blocks, c.num_classes]
        floats = [d.leaky_slope, d.bn_eps, d.bn_momentum, c.bn_eps, c.bn_momentum]
        return ints, floats

    @classmethod
    def from_record(cls, ints: Sequence[int], floats: Sequence[float]) -> "NoiseAwareClassifier":
        ints = [int(v) for v in ints]
        image_size, channels, num_layers, kernel_size, width = ints[:5]
        dilations = tuple(ints[5:5 + num_layers])
        c_width, c_blocks, c_classes = ints[5 + num_layers:8 + num_layers]
        cfg = NoiseAwareConfig(
            image_size=image_size,
            channels=channels,
            denoiser=DenoiserConfig(num_layers=num_layers, kernel_size=kernel_size, width=width,
                                    dilations=dilations, leaky_slope=floats[0],
                                    bn_eps=floats[1], bn_momentum=floats[2]),
            classifier=ResidualCNNConfig(width=c_width, num_blocks=c_blocks, num_classes=c_classes,
                                         bn_eps=floats[3], bn_momentum=floats[4]),
        )
        return cls(cfg)
