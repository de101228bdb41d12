import numpy as np
import pytest

from conftest import FD_TOLERANCE, check_op_gradient, numeric_grad, relative_error
from engine import functional as F
from engine.checkpoint import MAGIC, load_tensors, save_tensors, tensors_from_bytes, tensors_to_bytes
from engine.errors import ContractError, DimensionError, FormatError, MorphGuardError, NumericError
from engine.optim import Adam, AdamState, StepDecay, adam_step
from engine.tensor import Graph, Tensor, no_grad, parameter

INSTANCES = 20


def _normal(rng, *shape):
    return rng.normal(size=shape)


def _positive(rng, *shape):
    return rng.uniform(0.5, 2.0, size=shape)


# op name -> (op, input generator)
GRADIENT_CASES = {
    "add": (F.add, lambda r: [_normal(r, 3, 4), _normal(r, 3, 4)]),
    "add_scalar_tensor": (F.add, lambda r: [_normal(r, 3, 4), _normal(r)]),
    "sub": (F.sub, lambda r: [_normal(r, 3, 4), _normal(r, 3, 4)]),
    "mul": (F.mul, lambda r: [_normal(r, 3, 4), _normal(r, 3, 4)]),
    "mul_scalar_tensor": (F.mul, lambda r: [_normal(r), _normal(r, 2, 5)]),
    "mul_scalar": (lambda x: F.mul_scalar(x, -1.7), lambda r: [_normal(r, 6)]),
    "neg": (F.neg, lambda r: [_normal(r, 6)]),
    "exp": (F.exp, lambda r: [_normal(r, 3, 3)]),
    "log": (F.log, lambda r: [_positive(r, 3, 3)]),
    "sqrt": (F.sqrt, lambda r: [_positive(r, 3, 3)]),
    "tanh": (F.tanh, lambda r: [_normal(r, 3, 3)]),
    "relu": (F.relu, lambda r: [_normal(r, 4, 4)]),
    "leaky_relu": (lambda x: F.leaky_relu(x, 0.2), lambda r: [_normal(r, 4, 4)]),
    "gelu": (F.gelu, lambda r: [_normal(r, 4, 4)]),
    "clamp": (lambda x: F.clamp(x, -0.5, 0.5), lambda r: [_normal(r, 4, 4)]),
    "reshape": (lambda x: F.reshape(x, (6, 2)), lambda r: [_normal(r, 3, 4)]),
    "transpose": (lambda x: F.transpose(x, (2, 0, 1)), lambda r: [_normal(r, 2, 3, 4)]),
    "concat": (lambda a, b: F.concat([a, b], axis=1), lambda r: [_normal(r, 2, 3), _normal(r, 2, 2)]),
    "take": (lambda x: F.take(x, [2, 0, 2], axis=1), lambda r: [_normal(r, 2, 3, 2)]),
    "pick": (lambda x: F.pick(x, [1, 0, 1]), lambda r: [_normal(r, 3, 2)]),
    "repeat_leading": (lambda x: F.repeat_leading(x, 3), lambda r: [_normal(r, 1, 2, 2)]),
    "pad2d": (lambda x: F.pad2d(x, 1, 0, 2, 1), lambda r: [_normal(r, 1, 2, 3, 3)]),
    "sum": (lambda x: F.sum(x, axis=1), lambda r: [_normal(r, 3, 4)]),
    "mean": (lambda x: F.mean(x, axis=(0, 2), keepdims=True), lambda r: [_normal(r, 2, 3, 4)]),
    "amax": (lambda x: F.amax(x, axis=-1), lambda r: [_normal(r, 3, 5)]),
    "l2_norm": (lambda x: F.l2_norm(x, axes=(1, 2)), lambda r: [_normal(r, 3, 2, 2)]),
    "matmul": (F.matmul, lambda r: [_normal(r, 3, 4), _normal(r, 4, 2)]),
    "batched_matmul": (F.matmul, lambda r: [_normal(r, 2, 3, 4), _normal(r, 2, 4, 2)]),
    "channel_affine": (lambda x, s, b: F.channel_affine(x, scale=s, shift=b, axis=1),
                       lambda r: [_normal(r, 2, 3, 2, 2), _normal(r, 3), _normal(r, 3)]),
    "conv2d": (lambda x, k: F.conv2d(x, k, dilation=1, padding=1),
               lambda r: [_normal(r, 2, 2, 4, 4), _normal(r, 3, 2, 3, 3)]),
    "conv2d_dilated": (lambda x, k: F.conv2d(x, k, dilation=2, padding=2),
                       lambda r: [_normal(r, 1, 2, 5, 5), _normal(r, 2, 2, 3, 3)]),
    "normalize": (lambda x: F.normalize(x, (0, 2, 3)), lambda r: [_normal(r, 3, 2, 2, 2)]),
    "layer_norm": (lambda x, g, b: F.layer_norm(x, -1, g, b, 1e-6),
                   lambda r: [_normal(r, 2, 3, 4), _normal(r, 4), _normal(r, 4)]),
    "instance_norm": (F.instance_norm, lambda r: [_normal(r, 2, 2, 3, 3)]),
    "softmax": (lambda x: F.softmax(x, axis=-1), lambda r: [_normal(r, 3, 4)]),
    "log_softmax": (lambda x: F.log_softmax(x, axis=-1), lambda r: [_normal(r, 3, 4)]),
    "sum_normalize": (lambda x: F.sum_normalize(x, axis=-1), lambda r: [_positive(r, 3, 4)]),
    "cross_entropy": (lambda z: F.cross_entropy(z, [0, 1, 1]), lambda r: [_normal(r, 3, 2)]),
    "cross_entropy_none": (lambda z: F.cross_entropy(z, [1, 0], reduction="none"), lambda r: [_normal(r, 2, 2)]),
    "kl_divergence": (lambda z: F.kl_divergence(np.array([[0.3, 0.7], [1.0, 0.0]]), z),
                      lambda r: [_normal(r, 2, 2)]),
}


@pytest.mark.parametrize("name", sorted(GRADIENT_CASES))
def test_op_gradients_match_finite_differences(name):
    """backward() agrees with central differences on 20 random instances of each op."""
    op, make_inputs = GRADIENT_CASES[name]
    rng = np.random.default_rng(sorted(GRADIENT_CASES).index(name))
    for _ in range(INSTANCES):
        assert check_op_gradient(op, make_inputs(rng), rng) < FD_TOLERANCE


# ---------- forward values ----------

def _naive_conv2d(x, kernel, dilation, pad):
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    batch, channels, height, width = padded.shape
    filters, _, kh, kw = kernel.shape
    out_h, out_w = height - dilation * (kh - 1), width - dilation * (kw - 1)
    out = np.zeros((batch, filters, out_h, out_w))
    for n in range(batch):
        for f in range(filters):
            for y in range(out_h):
                for x_ in range(out_w):
                    total = 0.0
                    for c in range(channels):
                        for i in range(kh):
                            for j in range(kw):
                                total += padded[n, c, y + i * dilation, x_ + j * dilation] * kernel[f, c, i, j]
                    out[n, f, y, x_] = total
    return out


def test_matmul_matches_triple_loop(rng):
    a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
    expected = np.zeros((4, 3))
    for i in range(4):
        for j in range(3):
            for t in range(5):
                expected[i, j] += a[i, t] * b[t, j]
    assert np.max(np.abs(F.matmul(Tensor(a), Tensor(b)).data - expected)) < 1e-12
    assert np.array_equal(F.matmul(Tensor(np.eye(2)), Tensor(b[:2, :2])).data, b[:2, :2])
    assert F.matmul(Tensor([[2.0]]), Tensor([[3.0]])).data.tolist() == [[6.0]]


@pytest.mark.parametrize("x_shape, k_shape, dilation, pad", [
    ((1, 1, 5, 5), (1, 1, 3, 3), 2, 2),
    ((2, 3, 6, 6), (4, 3, 3, 3), 1, 1),
    ((1, 2, 7, 7), (2, 2, 3, 3), 3, 0),
])
def test_conv2d_matches_sliding_window(x_shape, k_shape, dilation, pad, rng):
    x, kernel = rng.normal(size=x_shape), rng.normal(size=k_shape)
    out = F.conv2d(Tensor(x), Tensor(kernel), dilation=dilation, padding=pad).data
    expected = _naive_conv2d(x, kernel, dilation, pad)
    assert out.shape == expected.shape
    assert np.max(np.abs(out - expected)) < 1e-10


def test_conv2d_trivial_kernels(rng):
    x = rng.normal(size=(2, 1, 4, 4))
    assert np.array_equal(F.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1)))).data, x)
    assert not np.any(F.conv2d(Tensor(x), Tensor(np.zeros((3, 1, 3, 3))), padding=1).data)


def test_gelu_and_layer_norm_by_hand():
    assert F.gelu(Tensor([0.0])).data.tolist() == [0.0]
    row = F.layer_norm(Tensor([[1.0, 2.0, 3.0]]), eps=0.0).data
    std = np.sqrt(2.0 / 3.0)
    assert np.allclose(row, [[-1.0 / std, 0.0, 1.0 / std]], atol=1e-12)
    assert not np.any(F.layer_norm(Tensor(np.full((2, 4), 3.5)), gamma=1.0, beta=0.0).data)
    shifted = F.layer_norm(Tensor(np.random.default_rng(0).normal(size=(3, 5))), gamma=2.0, beta=0.7).data
    assert np.allclose(shifted.mean(axis=-1), 0.7, atol=1e-9)


def test_shared_subexpression_accumulates():
    x = parameter([1.5, -2.0])
    y = F.sum(F.mul(x, x))  # x used twice
    y.backward()
    assert np.allclose(x.grad, 2.0 * x.data)


def test_gradients_accumulate_until_zero_grad():
    x = parameter([1.0, 2.0])
    F.sum(x).backward()
    F.sum(x).backward()
    assert np.array_equal(x.grad, [2.0, 2.0])
    x.zero_grad()
    assert x.grad is None


def test_no_grad_records_nothing():
    x = parameter(np.ones(3))
    with no_grad():
        y = F.sum(F.exp(x))
    assert not y.requires_grad
    assert y.node is None
    with pytest.raises(ContractError):
        y.backward()


def test_detach_cuts_the_graph():
    x = parameter(np.ones(3))
    y = F.exp(x)
    assert x.is_leaf and not y.is_leaf
    cut = y.detach()
    assert cut.is_leaf and not cut.requires_grad
    assert np.array_equal(cut.data, y.data)


def test_backward_needs_scalar():
    x = parameter(np.ones(3))
    with pytest.raises(ContractError):
        F.exp(x).backward()


def test_graph_records_follow_creation_order():
    x = parameter(np.ones((2, 2)))
    loss = F.sum(F.tanh(F.mul_scalar(x, 2.0)))
    graph = Graph.trace(loss)
    assert graph.ops() == ["mul_scalar", "tanh", "sum"]
    assert len(graph) == 3


def test_shape_mismatch_raises_dimension_error():
    with pytest.raises(DimensionError):
        F.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))
    with pytest.raises(DimensionError):
        F.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(DimensionError):
        F.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))


def test_softmax_rejects_non_finite():
    with pytest.raises(NumericError):
        F.softmax(Tensor([[0.0, np.inf]]))


def test_softmax_is_stable_for_large_logits():
    out = F.softmax(Tensor([[1000.0, 0.0]])).data
    assert np.all(np.isfinite(out))
    assert out[0, 0] == pytest.approx(1.0)


def test_errors_carry_codes():
    err = ContractError("bad input")
    assert isinstance(err, MorphGuardError)
    assert isinstance(err, ValueError)
    assert err.to_dict() == {"code": "CONTRACT_ERROR", "message": "bad input"}


def test_finite_difference_helper_on_quadratic():
    x = np.array([1.0, -3.0, 0.5])
    numeric = numeric_grad(lambda v: float(np.sum(v ** 2)), x)
    assert relative_error(2.0 * x, numeric) < 1e-8


# ---------- optimizer ----------

def test_first_adam_step_moves_by_lr_times_sign():
    """After bias correction the first step is lr * g / (|g| + eps)."""
    p = parameter([1.0, -1.0, 0.5])
    grad = np.array([0.3, -2.0, 0.0])
    state = AdamState.like([p])
    adam_step([p], [grad], state, lr=0.1)
    expected = np.array([1.0, -1.0, 0.5]) - 0.1 * grad / (np.abs(grad) + 1e-8)
    assert np.allclose(p.data, expected)
    assert state.t == 1


def test_adam_skips_parameters_without_gradient():
    a, b = parameter([1.0]), parameter([2.0])
    opt = Adam([a, b], lr=0.5)
    F.sum(a).backward()
    opt.step()
    assert b.data[0] == 2.0
    assert a.data[0] < 1.0


def test_adam_minimizes_a_quadratic():
    x = parameter([3.0, -4.0])
    opt = Adam([x], lr=0.1)
    for _ in range(1000):
        opt.zero_grad()
        F.sum(F.mul(x, x)).backward()
        opt.step()
    assert np.all(np.abs(x.data) < 0.1)


def test_step_decay_halves_at_milestones():
    schedule = StepDecay(5e-5, milestones=(20, 30), factor=0.5)
    assert schedule.lr_at(0) == 5e-5
    assert schedule.lr_at(19) == 5e-5
    assert schedule.lr_at(20) == 2.5e-5
    assert schedule.lr_at(30) == 1.25e-5


# ---------- MGT1 ----------

def test_tensor_file_round_trip_is_exact(tmp_path, rng):
    named = {"w": rng.normal(size=(3, 4)), "scalar": np.array(2.5), "empty": np.zeros((0, 2)),
             "ünïcode": rng.normal(size=5)}
    path = save_tensors(tmp_path / "nested" / "t.mgt", named)
    loaded = load_tensors(path)
    assert list(loaded) == list(named)
    for name, value in named.items():
        assert loaded[name].shape == value.shape
        assert np.array_equal(loaded[name], value)
    assert path.read_bytes() == tensors_to_bytes(loaded)


def test_tensor_file_bad_magic():
    with pytest.raises(FormatError, match="magic"):
        tensors_from_bytes(b"XXXX")


def test_tensor_file_truncated_reports_offset(rng):
    buffer = tensors_to_bytes({"w": rng.normal(size=(2, 2))})
    with pytest.raises(FormatError, match="offset"):
        tensors_from_bytes(buffer[:-3])
    assert buffer.startswith(MAGIC)
