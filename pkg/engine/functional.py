"""
Differentiable operations on engine.tensor.Tensor.

Broadcasting is limited to scalar-tensor arithmetic and per-channel affine
(``channel_affine``); every other binary op needs identical shapes.
"""

import math
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from engine.errors import DimensionError, NumericError
from engine.tensor import DTYPE, Tensor, as_tensor

Scalar = Union[int, float]
Axis = Union[None, int, Tuple[int, ...]]

GELU_C = math.sqrt(2.0 / math.pi)


def _is_scalar(value) -> bool:
    return isinstance(value, (int, float, np.floating, np.integer))


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} must match")


def _unreduce(grad: np.ndarray, shape: Tuple[int, ...], axis: Axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(grad, shape).copy()
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else axis
        axes = tuple(a % len(shape) for a in axes)
        for a in sorted(axes):
            grad = np.expand_dims(grad, a)
    return np.broadcast_to(grad, shape).copy()


# ---------- elementwise arithmetic ----------

def add(a, b) -> Tensor:
    a = as_tensor(a)
    if _is_scalar(b):
        return Tensor.from_op(a.data + float(b), (a,), "add_scalar", lambda g: (g,))
    b = as_tensor(b)
    if b.ndim == 0 and a.ndim > 0:
        return Tensor.from_op(a.data + b.data, (a, b), "add", lambda g: (g, np.sum(g)))
    if a.ndim == 0 and b.ndim > 0:
        return Tensor.from_op(a.data + b.data, (a, b), "add", lambda g: (np.sum(g), g))
    _check_same_shape(a, b, "add")
    return Tensor.from_op(a.data + b.data, (a, b), "add", lambda g: (g, g))


def neg(x: Tensor) -> Tensor:
    return Tensor.from_op(-x.data, (x,), "neg", lambda g: (-g,))


def sub(a, b) -> Tensor:
    if _is_scalar(b):
        return add(a, -float(b))
    return add(a, neg(as_tensor(b)))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if _is_scalar(b):
        return mul_scalar(a, b)
    b = as_tensor(b)
    if b.ndim == 0 and a.ndim > 0:
        a, b = b, a
    if a.ndim == 0 and b.ndim > 0:
        av, bv = a.data, b.data
        return Tensor.from_op(av * bv, (a, b), "mul",
                              lambda g: (np.sum(g * bv), g * av))
    _check_same_shape(a, b, "mul")
    av, bv = a.data, b.data
    return Tensor.from_op(av * bv, (a, b), "mul", lambda g: (g * bv, g * av))


def mul_scalar(x: Tensor, c: Scalar) -> Tensor:
    c = float(c)
    return Tensor.from_op(x.data * c, (x,), "mul_scalar", lambda g: (g * c,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor.from_op(out, (x,), "exp", lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xv = x.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(xv)
    return Tensor.from_op(out, (x,), "log", lambda g: (g / xv,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return Tensor.from_op(out, (x,), "sqrt", lambda g: (g * 0.5 / out,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return Tensor.from_op(out, (x,), "tanh", lambda g: (g * (1.0 - out * out),))


def sign(x: Tensor) -> Tensor:
    return Tensor.from_op(np.sign(x.data), (x,), "sign", lambda g: (np.zeros_like(g),))


def clamp(x: Tensor, lo: Optional[float] = None, hi: Optional[float] = None) -> Tensor:
    """Clip values; gradient is 1 inside [lo, hi] and 0 outside."""
    lo_v = -np.inf if lo is None else lo
    hi_v = np.inf if hi is None else hi
    xv = x.data
    mask = ((xv >= lo_v) & (xv <= hi_v)).astype(DTYPE)
    return Tensor.from_op(np.clip(xv, lo_v, hi_v), (x,), "clamp", lambda g: (g * mask,))


def relu(x: Tensor) -> Tensor:
    mask = (x.data > 0).astype(DTYPE)
    return Tensor.from_op(x.data * mask, (x,), "relu", lambda g: (g * mask,))


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    slopes = np.where(x.data > 0, 1.0, slope)
    return Tensor.from_op(x.data * slopes, (x,), "leaky_relu", lambda g: (g * slopes,))


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xv = x.data
    inner = GELU_C * (xv + 0.044715 * xv ** 3)
    t = np.tanh(inner)
    out = 0.5 * xv * (1.0 + t)

    def backward(g):
        d_inner = GELU_C * (1.0 + 3.0 * 0.044715 * xv ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t * t) * d_inner),)

    return Tensor.from_op(out, (x,), "gelu", backward)


# ---------- structural ----------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    original = x.shape
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {original} to {tuple(shape)}") from exc
    return Tensor.from_op(out, (x,), "reshape", lambda g: (g.reshape(original),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return Tensor.from_op(np.transpose(x.data, axes), (x,), "transpose",
                          lambda g: (np.transpose(g, inverse),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat needs at least one tensor")
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors[1:]:
        off_a = tensors[0].shape[:axis] + tensors[0].shape[axis + 1:]
        off_b = t.shape[:axis] + t.shape[axis + 1:] if t.ndim == ndim else None
        if off_a != off_b:
            raise DimensionError(
                f"concat along axis {axis}: shapes {tensors[0].shape} and {t.shape} differ off-axis"
            )
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return Tensor.from_op(out, tensors, "concat",
                          lambda g: tuple(np.split(g, splits, axis=axis)))


def take(x: Tensor, indices, axis: int) -> Tensor:
    """Select slices along ``axis`` (repeats allowed); backward scatter-adds."""
    idx = np.asarray(indices, dtype=np.int64)
    axis = axis % x.ndim
    shape = x.shape

    def backward(g):
        grad = np.zeros(shape, dtype=DTYPE)
        moved = np.moveaxis(grad, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (grad,)

    return Tensor.from_op(np.take(x.data, idx, axis=axis), (x,), "take", backward)


def pick(x: Tensor, indices) -> Tensor:
    """out[b] = x[b, indices[b]] for a [B, C] tensor."""
    idx = np.asarray(indices, dtype=np.int64)
    if x.ndim != 2 or idx.shape != (x.shape[0],):
        raise DimensionError(f"pick needs [B, C] input and B indices, got {x.shape} and {idx.shape}")
    rows = np.arange(x.shape[0])
    shape = x.shape

    def backward(g):
        grad = np.zeros(shape, dtype=DTYPE)
        grad[rows, idx] = g
        return (grad,)

    return Tensor.from_op(x.data[rows, idx], (x,), "pick", backward)


def repeat_leading(x: Tensor, n: int) -> Tensor:
    """Tile a tensor with leading extent 1 to leading extent n."""
    if x.shape[0] != 1:
        raise DimensionError(f"repeat_leading needs leading extent 1, got {x.shape}")
    out = np.repeat(x.data, n, axis=0)
    return Tensor.from_op(out, (x,), "repeat_leading",
                          lambda g: (np.sum(g, axis=0, keepdims=True),))


def pad2d(x: Tensor, top: int, bottom: int, left: int, right: int) -> Tensor:
    """Zero-pad the last two axes."""
    widths = [(0, 0)] * (x.ndim - 2) + [(top, bottom), (left, right)]
    h, w = x.shape[-2:]
    out = np.pad(x.data, widths)
    return Tensor.from_op(out, (x,), "pad2d",
                          lambda g: (g[..., top:top + h, left:left + w],))


# ---------- reductions ----------

def sum(x: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape
    out = np.sum(x.data, axis=axis, keepdims=keepdims)
    return Tensor.from_op(out, (x,), "sum",
                          lambda g: (_unreduce(g, shape, axis, keepdims),))


def mean(x: Tensor, axis: Axis = None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul_scalar(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def amax(x: Tensor, axis: int) -> Tensor:
    """Max along one axis; gradient goes to the first maximal entry."""
    axis = axis % x.ndim
    arg = np.argmax(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(arg, axis), axis=axis).squeeze(axis)
    shape = x.shape

    def backward(g):
        grad = np.zeros(shape, dtype=DTYPE)
        np.put_along_axis(grad, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        return (grad,)

    return Tensor.from_op(out, (x,), "amax", backward)


def l2_norm(x: Tensor, axes: Axis = None) -> Tensor:
    """Euclidean norm over ``axes``; the subgradient at zero is zero."""
    xv = x.data
    out = np.sqrt(np.sum(xv * xv, axis=axes))
    shape = x.shape

    def backward(g):
        norm = _unreduce(out, shape, axes, False)
        with np.errstate(divide="ignore", invalid="ignore"):
            unit = np.where(norm > 0, xv / norm, 0.0)
        return (_unreduce(g, shape, axes, False) * unit,)

    return Tensor.from_op(out, (x,), "l2_norm", backward)


# ---------- linear algebra ----------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """[m,k]@[k,n], or batched [...,m,k]@[...,k,n] with identical leading extents."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.data, b.data

    def backward(g):
        return (g @ np.swapaxes(bv, -1, -2), np.swapaxes(av, -1, -2) @ g)

    return Tensor.from_op(av @ bv, (a, b), "matmul", backward)


def channel_affine(x: Tensor, scale=None, shift=None, axis: int = 1) -> Tensor:
    """
    y = x * scale + shift with scale/shift of length x.shape[axis],
    broadcast along every other axis. Either may be a Tensor or an array.
    """
    axis = axis % x.ndim
    extent = x.shape[axis]
    view = [1] * x.ndim
    view[axis] = extent
    others = tuple(i for i in range(x.ndim) if i != axis)
    out = x
    if scale is not None:
        scale = as_tensor(scale)
        if scale.shape != (extent,):
            raise DimensionError(f"channel scale shape {scale.shape} does not match extent {extent}")
        xv, sv = out.data, scale.data.reshape(view)
        out = Tensor.from_op(xv * sv, (out, scale), "channel_scale",
                             lambda g: (g * sv, np.sum(g * xv, axis=others)))
    if shift is not None:
        shift = as_tensor(shift)
        if shift.shape != (extent,):
            raise DimensionError(f"channel shift shape {shift.shape} does not match extent {extent}")
        bv = shift.data.reshape(view)
        out = Tensor.from_op(out.data + bv, (out, shift), "channel_shift",
                             lambda g: (g, np.sum(g, axis=others)))
    return out


def conv2d(x: Tensor, kernel: Tensor, dilation: int = 1, padding=0) -> Tensor:
    """
    Stride-1 dilated cross-correlation.

    Args:
        x: [B, C, H, W]
        kernel: [F, C, kh, kw]
        dilation: spacing between kernel taps
        padding: int or (pad_h, pad_w) zero padding
    Returns:
        [B, F, H + 2*pad_h - dilation*(kh-1), W + 2*pad_w - dilation*(kw-1)]
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4 or x.shape[1] != kernel.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} and kernel {kernel.shape} are incompatible")
    if dilation < 1:
        raise DimensionError(f"conv2d: dilation must be positive, got {dilation}")
    ph, pw = (padding, padding) if isinstance(padding, int) else tuple(padding)
    batch, channels, height, width = x.shape
    _, _, kh, kw = kernel.shape
    out_h = height + 2 * ph - dilation * (kh - 1)
    out_w = width + 2 * pw - dilation * (kw - 1)
    if out_h < 1 or out_w < 1:
        raise DimensionError(
            f"conv2d: kernel {kernel.shape} at dilation {dilation} exceeds padded input {x.shape}"
        )

    padded = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = np.empty((batch, channels, kh, kw, out_h, out_w), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            r, c = i * dilation, j * dilation
            cols[:, :, i, j] = padded[:, :, r:r + out_h, c:c + out_w]
    kv = kernel.data
    out = np.tensordot(cols, kv, axes=([1, 2, 3], [1, 2, 3])).transpose(0, 3, 1, 2)

    def backward(g):
        grad_kernel = np.tensordot(g, cols, axes=([0, 2, 3], [0, 4, 5]))
        grad_cols = np.tensordot(g, kv, axes=([1], [0])).transpose(0, 3, 4, 5, 1, 2)
        grad_padded = np.zeros_like(padded)
        for i in range(kh):
            for j in range(kw):
                r, c = i * dilation, j * dilation
                grad_padded[:, :, r:r + out_h, c:c + out_w] += grad_cols[:, :, i, j]
        grad_x = grad_padded[:, :, ph:ph + height, pw:pw + width]
        return (np.ascontiguousarray(grad_x), grad_kernel)

    return Tensor.from_op(np.ascontiguousarray(out), (x, kernel), "conv2d", backward)


# ---------- normalization ----------

def normalize(x: Tensor, axes: Axis, eps: float = 1e-5) -> Tensor:
    """(x - mean) / sqrt(var + eps) over ``axes`` (population variance)."""
    axes = (axes,) if isinstance(axes, int) else tuple(axes)
    xv = x.data
    mu = np.mean(xv, axis=axes, keepdims=True)
    centered = xv - mu
    var = np.mean(centered * centered, axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std

    def backward(g):
        g_mean = np.mean(g, axis=axes, keepdims=True)
        gx_mean = np.mean(g * xhat, axis=axes, keepdims=True)
        return (inv_std * (g - g_mean - xhat * gx_mean),)

    return Tensor.from_op(xhat, (x,), "normalize", backward)


def layer_norm(x: Tensor, axis: int = -1, gamma=None, beta=None, eps: float = 1e-5) -> Tensor:
    """
    Normalize each slice along ``axis`` then apply gamma/beta.

    gamma and beta may be python scalars or vectors of length x.shape[axis].
    """
    out = normalize(x, axis, eps)
    if gamma is not None:
        out = mul(out, gamma) if _is_scalar(gamma) or as_tensor(gamma).ndim == 0 \
            else channel_affine(out, scale=gamma, axis=axis)
    if beta is not None:
        out = add(out, beta) if _is_scalar(beta) or as_tensor(beta).ndim == 0 \
            else channel_affine(out, shift=beta, axis=axis)
    return out


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-example, per-channel normalization of a [B, C, H, W] tensor."""
    return normalize(x, (2, 3), eps)


# ---------- probability ----------

def _check_finite(x: Tensor, op: str) -> None:
    if not np.all(np.isfinite(x.data)):
        raise NumericError(f"{op}: input contains non-finite values")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_finite(x, "softmax")
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return Tensor.from_op(out, (x,), "softmax", backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_finite(x, "log_softmax")
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g):
        return (g - probs * np.sum(g, axis=axis, keepdims=True),)

    return Tensor.from_op(out, (x,), "log_softmax", backward)


def sum_normalize(x: Tensor, axis: int = -1) -> Tensor:
    """x / sum(x, axis): rescale positive rows onto the probability simplex."""
    xv = x.data
    total = np.sum(xv, axis=axis, keepdims=True)
    out = xv / total

    def backward(g):
        return ((g - np.sum(g * out, axis=axis, keepdims=True)) / total,)

    return Tensor.from_op(out, (x,), "sum_normalize", backward)


def cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Cross-entropy of [B, C] logits against integer labels."""
    nll = neg(pick(log_softmax(logits, axis=-1), labels))
    if reduction == "sum":
        return sum(nll)
    if reduction == "none":
        return nll
    return mean(nll)


def kl_divergence(target_probs: np.ndarray, logits: Tensor) -> Tensor:
    """Per-example KL(target || softmax(logits)); target is a constant."""
    p = np.asarray(target_probs, dtype=DTYPE)
    with np.errstate(divide="ignore", invalid="ignore"):
        entropy_term = np.sum(np.where(p > 0, p * np.log(p), 0.0), axis=-1)
    cross = sum(mul(log_softmax(logits, axis=-1), Tensor(p)), axis=-1)
    return add(neg(cross), Tensor(entropy_term))
