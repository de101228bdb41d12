"""
Shared fixtures: finite-difference helpers, toy-sized models and a small
synthetic dataset. Everything runs on CPU in float64.
"""

from typing import Callable, Sequence

import numpy as np
import pytest

from data.dataset import DatasetParams, gen_dataset
from data.rng import stream
from engine import functional as F
from engine.tensor import Tensor
from models.linear import LinearClassifier
from models.noise_aware import DenoiserConfig, NoiseAwareClassifier, NoiseAwareConfig, ResidualCNNConfig
from models.vit import ViTClassifier, ViTConfig

FD_STEP = 1e-5
FD_TOLERANCE = 1e-4


def numeric_grad(fn: Callable[[np.ndarray], float], x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central differences of a scalar function, one coordinate at a time."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, out = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        up = fn(x)
        flat[i] = keep - h
        down = fn(x)
        flat[i] = keep
        out[i] = (up - down) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(float(np.max(np.abs(analytic), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)), 1e-8)
    return float(np.max(np.abs(analytic - numeric), initial=0.0)) / scale


def check_op_gradient(op: Callable[..., Tensor], inputs: Sequence[np.ndarray],
                      rng: np.random.Generator) -> float:
    """
    Worst relative error between backward() and central differences for
    every input of ``op``. The output is contracted with fixed random
    weights so every output element contributes.
    """
    weights = rng.normal(size=np.shape(op(*[Tensor(a) for a in inputs]).data))

    def scalar(*arrays) -> float:
        return float(np.sum(op(*[Tensor(a) for a in arrays]).data * weights))

    tensors = [Tensor(a, requires_grad=True) for a in inputs]
    F.sum(F.mul(op(*tensors), Tensor(weights))).backward()

    worst = 0.0
    for k, t in enumerate(tensors):
        def along(value, k=k):
            arrays = list(inputs)
            arrays[k] = value
            return scalar(*arrays)
        numeric = numeric_grad(along, inputs[k])
        analytic = t.grad if t.grad is not None else np.zeros_like(inputs[k])
        worst = max(worst, relative_error(analytic, numeric))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_vit_config():
    return ViTConfig(image_size=8, channels=1, patch_size=4, embed_dim=8, num_heads=2, head_dim=4,
                     num_blocks=1, ffn_hidden=16)


@pytest.fixture
def tiny_noise_aware_config():
    return NoiseAwareConfig(
        image_size=8, channels=1,
        denoiser=DenoiserConfig(num_layers=3, width=4, dilations=(1, 2, 1)),
        classifier=ResidualCNNConfig(width=4, num_blocks=1),
    )


@pytest.fixture
def tiny_vit(tiny_vit_config):
    return ViTClassifier(tiny_vit_config, rng=stream(0, "init", "vit"), name="vit")


@pytest.fixture
def tiny_noise_aware(tiny_noise_aware_config):
    return NoiseAwareClassifier(tiny_noise_aware_config, rng=stream(0, "init", "noise_aware"),
                                name="noise_aware")


@pytest.fixture
def tiny_params():
    return DatasetParams(n_identities=10, bonafide_per_id=2, n_morphs=20, image_size=8)


@pytest.fixture
def tiny_dataset(tiny_params):
    return gen_dataset(7, tiny_params)


def planted_linear(direction: np.ndarray, bias: float, name: str) -> LinearClassifier:
    """
    Linear detector whose morph-minus-bona-fide logit is direction . x + bias.

    The gradient of every attack objective is then available in closed form.
    """
    d = direction.reshape(-1)
    weight = np.stack([-0.5 * d, 0.5 * d], axis=1)
    return LinearClassifier.from_weights(weight, np.array([-0.5 * bias, 0.5 * bias]),
                                         input_shape=direction.shape, name=name)


@pytest.fixture
def linear_pair():
    """Two linear detectors on 1x4x4 inputs with different decision directions."""
    rng = np.random.default_rng(5)
    shape = (1, 4, 4)
    return (planted_linear(rng.normal(size=shape), 0.0, "lin_a"),
            planted_linear(rng.normal(size=shape), 0.0, "lin_b"))
