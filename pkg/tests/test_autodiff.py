import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from heatood.autodiff import (
    AdamState,
    Tensor,
    activation,
    adam_step,
    backward,
    conv2d,
    conv_transpose2d,
    cross_entropy,
    dense,
    get_tape,
    gradcheck,
    load_checkpoint,
    mul,
    no_grad,
    save_checkpoint,
    softmax,
    sum_all,
    tanh,
    weighted_mse,
)
from heatood.errors import ConfigurationError, FormatError, InputError, UsageError
from oracles import REGISTERED_OPS, grad_case


def naive_conv2d(x, k, stride, pad):
    n, c, h, w = x.shape
    o, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for a in range(n):
        for b in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ch in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[a, ch, i * stride + u, j * stride + v] * k[b, ch, u, v]
                    out[a, b, i, j] = acc
    return out


def naive_matmul(x, w):
    n, d = x.shape
    m = w.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            for k in range(d):
                out[i, j] += x[i, k] * w[k, j]
    return out


# ---------------------------------------------------------------- conv2d


def test_conv2d_identity_kernel():
    x = Tensor(np.ones((1, 1, 3, 3)))
    k = Tensor(np.ones((1, 1, 1, 1)))
    np.testing.assert_array_equal(conv2d(x, k).data, x.data)


def test_conv2d_sum_of_ones():
    out = conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 1, 1)
    assert out.data.item() == 9.0


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv2d_matches_naive_loops(stride, pad):
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
    k = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    got = conv2d(Tensor(x), Tensor(k), stride=stride, padding=pad).data
    want = naive_conv2d(x.astype(np.float64), k.astype(np.float64), stride, pad)
    np.testing.assert_allclose(got, want, atol=1e-5, rtol=1e-5)


def test_conv2d_shape_errors():
    with pytest.raises(ConfigurationError, match="channels"):
        conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))
    with pytest.raises(ConfigurationError, match="smaller than kernel"):
        conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))


# ---------------------------------------------------------------- conv_transpose2d


def test_conv_transpose_single_tap_spread():
    out = conv_transpose2d(Tensor(np.ones((1, 1, 1, 1))), Tensor(np.ones((1, 1, 2, 2))), stride=2)
    np.testing.assert_array_equal(out.data, np.ones((1, 1, 2, 2)))


def test_conv_transpose_shape_law():
    out = conv_transpose2d(Tensor(np.zeros((1, 8, 4, 4))), Tensor(np.zeros((8, 16, 4, 4))), stride=2, padding=1)
    assert out.shape == (1, 16, 8, 8)


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("geom", [(8, 4, 2, 1), (7, 3, 1, 1), (9, 3, 2, 0), (6, 2, 2, 0)])
def test_conv_transpose_is_adjoint_of_conv(seed, geom):
    side, ksz, stride, pad = geom
    rng = np.random.default_rng(seed)
    k = rng.standard_normal((4, 3, ksz, ksz)).astype(np.float32)
    x = rng.standard_normal((2, 3, side, side)).astype(np.float32)
    cx = conv2d(Tensor(x), Tensor(k), stride=stride, padding=pad)
    y = rng.standard_normal(cx.shape).astype(np.float32)
    ty = conv_transpose2d(Tensor(y), Tensor(k), stride=stride, padding=pad)
    assert ty.shape == x.shape
    lhs = np.sum(cx.data.astype(np.float64) * y)
    rhs = np.sum(x.astype(np.float64) * ty.data)
    assert abs(lhs - rhs) <= 1e-4 * max(1.0, abs(lhs))


def test_conv_transpose_channel_mismatch():
    with pytest.raises(ConfigurationError):
        conv_transpose2d(Tensor(np.ones((1, 2, 2, 2))), Tensor(np.ones((3, 1, 2, 2))))


# ---------------------------------------------------------------- dense


def test_dense_identity():
    x = np.array([[1.5, -2.0], [3.0, 4.0]], dtype=np.float32)
    out = dense(Tensor(x), Tensor(np.eye(2)), Tensor(np.zeros(2)))
    np.testing.assert_array_equal(out.data, x)


def test_dense_direct_arithmetic():
    out = dense(Tensor([[1.0, 2.0]]), Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([10.0, 10.0]))
    np.testing.assert_array_equal(out.data, [[11.0, 12.0]])


@pytest.mark.parametrize("seed", range(3))
def test_dense_matches_naive(seed):
    rng = np.random.default_rng(seed)
    n, d, m = rng.integers(1, 7, size=3)
    x = rng.standard_normal((n, d)).astype(np.float32)
    w = rng.standard_normal((d, m)).astype(np.float32)
    b = rng.standard_normal(m).astype(np.float32)
    want = naive_matmul(x.astype(np.float64), w.astype(np.float64)) + b
    np.testing.assert_allclose(dense(Tensor(x), Tensor(w), Tensor(b)).data, want, atol=1e-5)


def test_dense_inner_dim_mismatch():
    with pytest.raises(ConfigurationError):
        dense(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))), Tensor(np.ones(3)))


# ---------------------------------------------------------------- activations


def test_relu_values():
    np.testing.assert_array_equal(activation(Tensor([-1.0, 0.0, 2.0]), "relu").data, [0, 0, 2])


def test_tanh_zero_and_range():
    assert tanh(Tensor([0.0])).data[0] == 0.0
    y = tanh(Tensor(np.linspace(-5, 5, 101))).data
    assert np.all(np.abs(y) < 1)


def test_softmax_is_stable():
    np.testing.assert_array_equal(softmax(Tensor([1000.0, 1000.0])).data, [0.5, 0.5])


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 12), st.floats(1e-3, 1e4))
def test_softmax_rows_sum_to_one(seed, width, mag):
    x = np.random.default_rng(seed).uniform(-mag, mag, size=(5, width))
    s = softmax(Tensor(x)).data
    assert np.all(np.isfinite(s))
    np.testing.assert_allclose(s.sum(axis=-1, dtype=np.float64), 1.0, atol=1e-6)


def test_unknown_activation():
    with pytest.raises(ConfigurationError):
        activation(Tensor([1.0]), "gelu")


# ---------------------------------------------------------------- losses


def test_cross_entropy_uniform():
    assert math.isclose(cross_entropy(Tensor([[0.0, 0.0]]), [0]).item(), math.log(2), rel_tol=1e-6)


def test_cross_entropy_saturated():
    logits = np.zeros((3, 4), dtype=np.float32)
    labels = np.array([0, 2, 3])
    logits[np.arange(3), labels] = 20.0
    assert cross_entropy(Tensor(logits), labels).item() < 1e-6


def test_cross_entropy_direct_formula():
    rng = np.random.default_rng(7)
    logits = rng.standard_normal((4, 3))
    labels = np.array([0, 2, 1, 2])
    want = np.mean([-math.log(math.exp(r[y]) / sum(math.exp(v) for v in r)) for r, y in zip(logits, labels)])
    assert abs(cross_entropy(Tensor(logits, dtype=np.float64), labels).item() - want) < 1e-6


def test_cross_entropy_bad_label():
    with pytest.raises(InputError):
        cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


def test_weighted_mse_cases():
    assert weighted_mse(Tensor([0.3, -0.2]), Tensor([0.3, -0.2]), np.array([7.0, 2.0])).item() == 0.0
    assert weighted_mse(Tensor([0.0]), Tensor([0.5]), np.array([1 + 5 * 0.5])).item() == 0.875


def test_weighted_mse_direct_summation():
    rng = np.random.default_rng(11)
    p, t = rng.standard_normal((2, 3, 4, 5))
    w = rng.uniform(0, 3, size=p.shape)
    want = sum(float(wi * (pi - ti) ** 2) for wi, pi, ti in zip(w.ravel(), p.ravel(), t.ravel())) / p.size
    got = weighted_mse(Tensor(p, dtype=np.float64), Tensor(t, dtype=np.float64), w).item()
    assert abs(got - want) < 1e-6
    plain = weighted_mse(Tensor(p, dtype=np.float64), Tensor(t, dtype=np.float64), np.ones_like(p)).item()
    assert abs(plain - np.mean((p - t) ** 2)) < 1e-12


def test_weighted_mse_shape_mismatch():
    with pytest.raises(ConfigurationError):
        weighted_mse(Tensor(np.zeros(3)), Tensor(np.zeros(4)))


# ---------------------------------------------------------------- backward


def test_backward_square():
    x = Tensor([3.0], requires_grad=True)
    backward(sum_all(mul(x, x)))
    assert x.grad[0] == 6.0


def test_backward_tanh_at_zero():
    x = Tensor(np.zeros(5), requires_grad=True)
    backward(sum_all(tanh(x)))
    np.testing.assert_array_equal(x.grad, np.ones(5))


def test_backward_twice_is_an_error():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = sum_all(mul(x, x))
    backward(loss)
    with pytest.raises(UsageError):
        backward(loss)


def test_backward_non_scalar_is_an_error():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(UsageError):
        backward(mul(x, x))


def test_detached_inputs_get_no_grad():
    x = Tensor([1.0, 2.0])
    w = Tensor([3.0, 4.0], requires_grad=True)
    backward(sum_all(mul(x, w)))
    assert x.grad is None
    np.testing.assert_array_equal(w.grad, [1.0, 2.0])
    backward(sum_all(mul(x, x)))  # nothing requires grad: silently a no-op


def test_tape_cleared_after_backward_and_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    backward(sum_all(tanh(x)))
    assert len(get_tape()) == 0
    with no_grad():
        y = tanh(x)
    assert not y.requires_grad and len(get_tape()) == 0


@pytest.mark.parametrize("op", REGISTERED_OPS)
def test_gradients_match_finite_differences(op):
    for seed in range(20):
        fn, inputs = grad_case(op, np.random.default_rng(seed))
        assert all(t.size <= 64 for t in inputs)
        assert gradcheck(fn, inputs, step=1e-3) < 1e-3, (op, seed)


def test_float32_forward_stays_finite():
    x = Tensor(np.array([[1e4, -1e4, 0.0]], dtype=np.float32))
    for kind in ("relu", "tanh", "softmax_lastdim"):
        assert np.all(np.isfinite(activation(x, kind).data))
    assert np.isfinite(cross_entropy(x, [1]).item())


# ---------------------------------------------------------------- Adam


def test_adam_zero_gradient_leaves_params():
    w = Tensor(np.array([1.0, -2.0], dtype=np.float32), requires_grad=True)
    w.grad = np.zeros(2, dtype=np.float32)
    before = w.data.copy()
    adam_step([w], AdamState(lr=0.1))
    np.testing.assert_array_equal(w.data, before)


@pytest.mark.parametrize("g", [-3.0, 0.01, 2.5])
def test_adam_first_step_magnitude_is_lr(g):
    w = Tensor(np.zeros(4, dtype=np.float32), requires_grad=True)
    w.grad = np.full(4, g, dtype=np.float32)
    state = AdamState(lr=2e-4, beta1=0.5, beta2=0.999)
    adam_step([w], state)
    np.testing.assert_allclose(np.abs(w.data), 2e-4, rtol=0.01)
    np.testing.assert_array_equal(w.grad, np.full(4, g, dtype=np.float32))
    assert state.t == 1


def _scalar_adam(w0, steps, lr, b1, b2, eps):
    w, m, v = w0, 0.0, 0.0
    traj = []
    for t in range(1, steps + 1):
        g = 2 * (w - 3)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w = w - lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        traj.append(w)
    return traj


def test_adam_matches_scalar_reimplementation():
    w = Tensor(np.zeros(1, dtype=np.float64), requires_grad=True, dtype=np.float64)
    state = AdamState(lr=0.1, beta1=0.9, beta2=0.999, epsilon=1e-8)
    traj = []
    for _ in range(10):
        w.grad = None
        d = w - Tensor(np.array([3.0]))
        backward(sum_all(mul(d, d)))
        adam_step([w], state)
        traj.append(float(w.data[0]))
    np.testing.assert_allclose(traj, _scalar_adam(0.0, 10, 0.1, 0.9, 0.999, 1e-8), atol=1e-6)
    assert state.t == 10


def test_adam_requires_grad():
    w = Tensor(np.zeros(2), requires_grad=True, name="w")
    with pytest.raises(UsageError, match="w"):
        adam_step([w], AdamState())


def test_training_is_deterministic():
    def run():
        rng = np.random.default_rng(5)
        x = Tensor(rng.standard_normal((8, 4)).astype(np.float32))
        labels = rng.integers(0, 3, size=8)
        w = Tensor(rng.standard_normal((4, 3)).astype(np.float32), requires_grad=True)
        b = Tensor(np.zeros(3, dtype=np.float32), requires_grad=True)
        state = AdamState(lr=0.01)
        for _ in range(5):
            w.grad = b.grad = None
            backward(cross_entropy(dense(x, w, b), labels))
            adam_step([w, b], state)
        return w.data.tobytes() + b.data.tobytes()

    assert run() == run()


# ---------------------------------------------------------------- checkpoint


def test_checkpoint_round_trip(tmp_path):
    layers = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "bias": np.array([0.5], dtype=np.float32)}
    p = tmp_path / "m.ckpt"
    save_checkpoint(p, layers, kind="decoder")
    raw = p.read_bytes()
    assert raw[:8] == b"HOODCKPT" and raw[8:10] == b"\x01\x00"
    back = load_checkpoint(p, kind="decoder")
    assert list(back) == ["a", "bias"]
    for k in layers:
        assert back[k].tobytes() == layers[k].tobytes()
    with pytest.raises(FormatError):
        load_checkpoint(p, kind="classifier")


def test_checkpoint_rejects_bad_magic_and_version(tmp_path):
    p = tmp_path / "m.ckpt"
    save_checkpoint(p, {"a": np.zeros(2, dtype=np.float32)})
    raw = bytearray(p.read_bytes())
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(FormatError, match="magic"):
        load_checkpoint(bad)
    raw[8] = 9
    bad.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="version"):
        load_checkpoint(bad)
