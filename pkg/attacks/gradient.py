"""
White-box gradient attacks: FGSM, BIM, RFGSM, PGD (l-inf / l2), TPGD,
MIFGSM, DIFGSM and TIFGSM.

All of them run one shared iteration

    x_{t+1} = project_eps(clip01(x_t + step * direction(grad)))

and differ only in the start point, the objective and how the gradient is
post-processed (momentum, input diversity, translation smoothing). Sharing
the loop makes the reductions exact: PGD with one step of size eps and no
random start is FGSM, and MIFGSM with zero decay, DIFGSM with zero
probability and TIFGSM with a 1x1 kernel are all BIM.
"""

import logging
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage
from scipy.stats import norm as normal_dist

from attacks.spec import AdvResult, AttackSpec
from engine import functional as F
from engine.errors import DimensionError
from engine.tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

TINY = 1e-12

Transform = Callable[[Tensor], Tensor]


# ---------- building blocks ----------

def flat_norm(values: np.ndarray, norm: str) -> np.ndarray:
    flat = values.reshape(len(values), -1)
    if norm == "linf":
        return np.max(np.abs(flat), axis=1)
    if norm == "l1":
        return np.sum(np.abs(flat), axis=1)
    return np.sqrt(np.sum(flat * flat, axis=1))


def _per_example(values: np.ndarray, ndim: int) -> np.ndarray:
    return values.reshape((-1,) + (1,) * (ndim - 1))


def loss_and_grad(model, x: np.ndarray, y: np.ndarray, objective: str = "ce",
                  target_probs: Optional[np.ndarray] = None,
                  transform: Optional[Transform] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Per-example objective and its gradient w.r.t. the input.

    Args:
        objective: "ce" (cross-entropy against y) or "kl"
            (KL(target_probs || model(x)), target held constant)
        transform: differentiable input transform applied before the model
    """
    xt = Tensor(x, requires_grad=True)
    inputs = transform(xt) if transform is not None else xt
    logits = model.forward(inputs)
    if objective == "kl":
        per_example = F.kl_divergence(target_probs, logits)
    else:
        per_example = F.cross_entropy(logits, y, reduction="none")
    total = F.sum(per_example)
    if not total.requires_grad:
        # non-differentiable target (e.g. majority voting)
        return per_example.data.copy(), np.zeros_like(x)
    total.backward()
    grad = xt.grad if xt.grad is not None else np.zeros_like(x)
    return per_example.data.copy(), grad


def example_losses(model, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    with no_grad():
        return F.cross_entropy(model.forward(Tensor(x)), y, reduction="none").data


def step_direction(grad: np.ndarray, norm: str) -> np.ndarray:
    """sign(grad) for l-inf, grad / ||grad||_2 for l2."""
    if norm == "linf":
        return np.sign(grad)
    return grad / _per_example(np.maximum(flat_norm(grad, "l2"), TINY), grad.ndim)


def project(x_adv: np.ndarray, x: np.ndarray, eps: float, norm: str) -> np.ndarray:
    """Map onto the eps-ball around x: coordinate clip for l-inf, radial scaling for l2."""
    if norm == "linf":
        return np.clip(x_adv, x - eps, x + eps)
    delta = x_adv - x
    length = flat_norm(delta, "l2")
    factor = np.where(length > eps, eps / np.maximum(length, TINY), 1.0)
    return x + delta * _per_example(factor, x.ndim)


def advance(x_t: np.ndarray, x: np.ndarray, direction: np.ndarray, step: Union[float, np.ndarray], eps: float,
            norm: str) -> np.ndarray:
    return project(np.clip(x_t + step * direction, 0.0, 1.0), x, eps, norm)


def random_start(x: np.ndarray, eps: float, norm: str, rng: np.random.Generator) -> np.ndarray:
    if norm == "linf":
        start = x + rng.uniform(-eps, eps, size=x.shape)
    else:
        direction = rng.normal(size=x.shape)
        direction /= _per_example(np.maximum(flat_norm(direction, "l2"), TINY), x.ndim)
        radius = eps * rng.uniform(0.0, 1.0, size=len(x))
        start = x + direction * _per_example(radius, x.ndim)
    return project(np.clip(start, 0.0, 1.0), x, eps, norm)


def finish(model, x: np.ndarray, x_adv: np.ndarray, y: np.ndarray, queries: np.ndarray,
           flagged: np.ndarray, trace: List[np.ndarray], loss: Optional[np.ndarray] = None) -> AdvResult:
    success = model.predict(x_adv) != y
    if loss is None:
        loss = example_losses(model, x_adv, y)
    return AdvResult(x_adv=x_adv, delta=x_adv - x, success=success, queries=queries,
                     loss=loss, flagged=flagged, trace=trace)


def iterate(model, x: np.ndarray, y: np.ndarray, spec: AttackSpec, start: np.ndarray,
            step: float, objective: str = "ce", target_probs: Optional[np.ndarray] = None,
            momentum: Optional[float] = None, transform_fn: Optional[Callable[[], Optional[Transform]]] = None,
            smooth: Optional[Callable[[np.ndarray], np.ndarray]] = None) -> AdvResult:
    """The shared projected-ascent loop."""
    x_t = start
    accumulated = np.zeros_like(x)
    saw_gradient = np.zeros(len(x), dtype=bool)
    trace = []
    for _ in range(spec.num_steps):
        transform = transform_fn() if transform_fn is not None else None
        loss, grad = loss_and_grad(model, x_t, y, objective, target_probs, transform)
        saw_gradient |= flat_norm(grad, "linf") > 0
        if smooth is not None:
            grad = smooth(grad)
        if momentum is not None:
            l1 = np.maximum(flat_norm(grad, "l1"), TINY)
            accumulated = momentum * accumulated + grad / _per_example(l1, grad.ndim)
            grad = accumulated
        x_t = advance(x_t, x, step_direction(grad, spec.norm), step, spec.epsilon, spec.norm)
        trace.append(loss)
    queries = np.full(len(x), spec.num_steps, dtype=np.int64)
    flagged = ~saw_gradient
    if np.any(flagged):
        logger.debug(f"{spec.method}: {int(flagged.sum())} examples had a vanishing gradient")
    return finish(model, x, x_t, y, queries, flagged, trace)


# ---------- attacks ----------

def fgsm(model, x: np.ndarray, y: np.ndarray, spec: AttackSpec, rng: Optional[np.random.Generator] = None) -> AdvResult:
    """x* = clip01(x + eps * sign(grad CE)): one PGD step of size eps from x."""
    single = spec.model_copy(update={"num_steps": 1, "norm": "linf"})
    return iterate(model, x, y, single, start=x.copy(), step=spec.epsilon)


def pgd(model, x: np.ndarray, y: np.ndarray, spec: AttackSpec, rng: Optional[np.random.Generator] = None) -> AdvResult:
    """PGD under spec.norm; BIM when random_start is off, PGD_L2 under the l2 norm."""
    start = random_start(x, spec.epsilon, spec.norm, rng) if spec.random_start else x.copy()
    return iterate(model, x, y, spec, start=start, step=spec.step)


def bim(model, x, y, spec: AttackSpec, rng=None) -> AdvResult:
    return pgd(model, x, y, spec.model_copy(update={"random_start": False}), rng)


def rfgsm(model, x, y, spec: AttackSpec, rng: np.random.Generator) -> AdvResult:
    """Random sign step of eps/2, then gradient steps covering the remaining budget."""
    alpha = spec.epsilon / 2.0
    start = project(np.clip(x + alpha * np.sign(rng.normal(size=x.shape)), 0.0, 1.0),
                    x, spec.epsilon, spec.norm)
    step = spec.step_size if spec.step_size is not None else (spec.epsilon - alpha) / spec.num_steps
    return iterate(model, x, y, spec, start=start, step=step)


def tpgd(model, x, y, spec: AttackSpec, rng: Optional[np.random.Generator] = None) -> AdvResult:
    """PGD ascent on KL(p(x) || p(x_t)) with p(x) held constant."""
    clean = model.predict_proba(x)
    start = x.copy()
    if spec.random_start:
        start = project(np.clip(x + 0.001 * rng.normal(size=x.shape), 0.0, 1.0), x, spec.epsilon, spec.norm)
    return iterate(model, x, y, spec, start=start, step=spec.step, objective="kl", target_probs=clean)


def mifgsm(model, x, y, spec: AttackSpec, rng=None) -> AdvResult:
    """g <- decay * g + grad / ||grad||_1; step along sign(g)."""
    return iterate(model, x, y, spec, start=x.copy(), step=spec.step, momentum=spec.decay)


def diverse_input(shape: Sequence[int], resize_min: float, rng: np.random.Generator) -> Transform:
    """Random nearest-neighbour downscale, zero-padded back to full size at a random offset."""
    if len(shape) != 4:
        raise DimensionError(f"input diversity needs [B, C, H, W] images, got {tuple(shape)}")
    h, w = shape[2], shape[3]
    size = int(rng.integers(max(1, int(resize_min * h)), h + 1))
    rows = np.floor(np.arange(size) * h / size).astype(np.int64)
    cols = np.floor(np.arange(size) * w / size).astype(np.int64)
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))

    def transform(images: Tensor) -> Tensor:
        resized = F.take(F.take(images, rows, axis=2), cols, axis=3)
        return F.pad2d(resized, top, h - size - top, left, w - size - left)

    return transform


def difgsm(model, x, y, spec: AttackSpec, rng: np.random.Generator) -> AdvResult:
    """BIM whose gradient is taken through a random resize-and-pad with probability p per step."""
    if x.ndim != 4:
        raise DimensionError(f"DIFGSM needs [B, C, H, W] images, got {x.shape}")

    def transform_fn():
        if rng.random() < spec.diversity_prob:
            return diverse_input(x.shape, spec.resize_min, rng)
        return None

    return iterate(model, x, y, spec, start=x.copy(), step=spec.step, transform_fn=transform_fn)


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    """Normalized 2-D Gaussian, sums to 1."""
    taps = normal_dist.pdf(np.arange(size) - (size - 1) / 2.0, scale=sigma)
    kernel = np.outer(taps, taps)
    return kernel / kernel.sum()


def smooth_gradient(grad: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    out = np.empty_like(grad)
    for b in range(grad.shape[0]):
        for c in range(grad.shape[1]):
            out[b, c] = ndimage.convolve(grad[b, c], kernel, mode="constant", cval=0.0)
    return out


def tifgsm(model, x, y, spec: AttackSpec, rng=None) -> AdvResult:
    """BIM on the gradient convolved with a Gaussian kernel."""
    if x.ndim != 4:
        raise DimensionError(f"TIFGSM needs [B, C, H, W] images, got {x.shape}")
    kernel = gaussian_kernel(spec.kernel_size, spec.kernel_sigma)
    return iterate(model, x, y, spec, start=x.copy(), step=spec.step,
                   smooth=lambda g: smooth_gradient(g, kernel))
