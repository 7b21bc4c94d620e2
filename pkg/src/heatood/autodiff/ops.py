"""Differentiable ops over :class:`Tensor`.

No broadcasting: elementwise binary ops need equal shapes. Convolutions use
NCHW activations; ``conv2d`` kernels are OIHW, ``conv_transpose2d`` kernels
are IOHW so that the same kernel array gives an adjoint pair.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ConfigurationError, InputError
from .tensor import Tensor, record


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def _check_same_shape(op: str, *tensors: Tensor) -> None:
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ConfigurationError(f"{op}: shape mismatch {[t.shape for t in tensors]}")


def _mean64(values: np.ndarray) -> float:
    return float(np.sum(values, dtype=np.float64) / max(values.size, 1))


# ----------------------------------------------------------------------
# elementwise and structural


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    _check_same_shape("add", a, b)
    return record("add", a.data + b.data, (a, b), lambda g: (g, g))


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    _check_same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return record("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = a.dtype.type(c)
    return record("scale", a.data * c, (a,), lambda g: (g * c,))


def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(np.sum(a.data, dtype=np.float64), dtype=a.dtype)
    shape = a.shape
    return record("sum", out, (a,), lambda g: (np.broadcast_to(g, shape).astype(a.dtype),))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ConfigurationError(f"reshape: cannot view {a.shape} as {shape}") from exc
    src = a.shape
    return record("reshape", out, (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return record("transpose", out, (a,), lambda g: (g.transpose(inv),))


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    """``a[start:stop]`` along the leading axis."""
    shape = a.shape

    def _bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[start:stop] = g
        return (full,)

    return record("slice_rows", np.ascontiguousarray(a.data[start:stop]), (a,), _bw)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum(sizes)[:-1]
    return record("concat", out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


# ----------------------------------------------------------------------
# activations


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record("relu", np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return record("tanh", y, (x,), lambda g: (g * (1 - y * y),))


def _softmax_np(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last dimension with max subtraction."""
    if x.data.ndim == 0 or x.shape[-1] < 1:
        raise InputError("softmax needs a last dimension of size >= 1")
    s = _softmax_np(x.data)

    def _bw(g):
        return (s * (g - np.sum(g * s, axis=-1, keepdims=True)),)

    return record("softmax", s, (x,), _bw)


_ACTIVATIONS = {"relu": relu, "tanh": tanh, "softmax_lastdim": softmax}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ConfigurationError(f"unknown activation {kind!r}; choose from {sorted(_ACTIVATIONS)}") from None
    return fn(x)


# ----------------------------------------------------------------------
# affine maps


def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` for ``x`` of shape (N, D) and ``w`` of shape (D, M)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ConfigurationError(f"dense: input {x.shape} incompatible with weights {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ConfigurationError(f"dense: bias {b.shape} does not match output width {w.shape[1]}")
    xd, wd = x.data, w.data
    out = xd @ wd
    if b is not None:
        out = out + b.data

    def _bw(g):
        gx = g @ wd.T
        gw = xd.T @ g
        gb = g.sum(axis=0) if b is not None else None
        return (gx, gw, gb)

    inputs = (x, w, b) if b is not None else (x, w)
    return record("dense", out, inputs, _bw)


def _conv_out_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Patch matrix (N*ho*wo, kh*kw*C) from a padded NHWC array, channels innermost."""
    n, _, _, c = xp.shape
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * c)


def _scatter_taps(rows: np.ndarray, taps: np.ndarray, shape, stride: int, ho: int, wo: int) -> np.ndarray:
    """Sum over kernel taps of ``rows @ taps[i, j]`` placed at the tap's strided offset.

    ``rows`` is (N*ho*wo, A), ``taps`` is (kh, kw, A, B); the result is an
    NHWC array of ``shape`` with B channels. One small GEMM per tap keeps
    every scatter source contiguous.
    """
    n = shape[0]
    kh, kw, _, cout = taps.shape
    out = np.zeros(shape, dtype=rows.dtype)
    hi = (ho - 1) * stride + 1
    wi = (wo - 1) * stride + 1
    for i in range(kh):
        for j in range(kw):
            out[:, i : i + hi : stride, j : j + wi : stride] += (rows @ taps[i, j]).reshape(n, ho, wo, cout)
    return out


def _pad_nhwc(x: np.ndarray, p: int) -> np.ndarray:
    return np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else x


def _nhwc(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1))


def _nchw(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2))


def _check_int(name: str, value: int, minimum: int) -> int:
    if int(value) != value or value < minimum:
        raise ConfigurationError(f"{name} must be an integer >= {minimum}, got {value}")
    return int(value)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of NCHW input with an OIHW kernel."""
    stride = _check_int("stride", stride, 1)
    padding = _check_int("padding", padding, 0)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ConfigurationError(f"conv2d: expected 4-d input and kernel, got {x.shape} and {w.shape}")
    n, c, h, wd_ = x.shape
    o, ci, kh, kw = w.shape
    if c != ci:
        raise ConfigurationError(f"conv2d: input has {c} channels, kernel expects {ci}")
    if h + 2 * padding < kh or wd_ + 2 * padding < kw:
        raise ConfigurationError(
            f"conv2d: padded input {h + 2 * padding}x{wd_ + 2 * padding} smaller than kernel {kh}x{kw}"
        )
    if b is not None and b.shape != (o,):
        raise ConfigurationError(f"conv2d: bias {b.shape} does not match {o} output channels")
    ho = _conv_out_size(h, kh, stride, padding)
    wo = _conv_out_size(wd_, kw, stride, padding)
    xp = _pad_nhwc(_nhwc(x.data), padding)
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wmat = w.data.transpose(0, 2, 3, 1).reshape(o, -1)
    out = cols @ wmat.T
    if b is not None:
        out += b.data
    out = _nchw(out.reshape(n, ho, wo, o))
    padded_shape = xp.shape

    def _bw(g):
        gm = _nhwc(g).reshape(-1, o)
        gw = np.ascontiguousarray((gm.T @ cols).reshape(o, kh, kw, c).transpose(0, 3, 1, 2))
        gx = None
        if x.requires_grad:
            gxp = _scatter_taps(gm, np.ascontiguousarray(w.data.transpose(2, 3, 0, 1)), padded_shape, stride, ho, wo)
            gx = _nchw(gxp[:, padding : padding + h, padding : padding + wd_] if padding else gxp)
        gb = gm.sum(axis=0) if b is not None else None
        return (gx, gw, gb)

    inputs = (x, w, b) if b is not None else (x, w)
    return record("conv2d", out, inputs, _bw)


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed convolution; IOHW kernel, output side ``(H-1)*stride - 2*padding + KH``.

    For a shared kernel this is the exact adjoint of :func:`conv2d`.
    """
    stride = _check_int("stride", stride, 1)
    padding = _check_int("padding", padding, 0)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ConfigurationError(f"conv_transpose2d: expected 4-d input and kernel, got {x.shape} and {w.shape}")
    n, ci, h, wd_ = x.shape
    i_, o, kh, kw = w.shape
    if ci != i_:
        raise ConfigurationError(f"conv_transpose2d: input has {ci} channels, kernel expects {i_}")
    hf = (h - 1) * stride + kh
    wf = (wd_ - 1) * stride + kw
    ho, wo = hf - 2 * padding, wf - 2 * padding
    if ho < 1 or wo < 1:
        raise ConfigurationError(f"conv_transpose2d: padding {padding} leaves empty output")
    if b is not None and b.shape != (o,):
        raise ConfigurationError(f"conv_transpose2d: bias {b.shape} does not match {o} output channels")
    xm = _nhwc(x.data).reshape(n * h * wd_, ci)
    wmat = w.data.transpose(0, 2, 3, 1).reshape(ci, kh * kw * o)
    full = _scatter_taps(xm, np.ascontiguousarray(w.data.transpose(2, 3, 0, 1)), (n, hf, wf, o), stride, h, wd_)
    out = full[:, padding : padding + ho, padding : padding + wo]
    if b is not None:
        out = out + b.data
    out = _nchw(out)

    def _bw(g):
        gcols = _im2col(_pad_nhwc(_nhwc(g), padding), kh, kw, stride, h, wd_)
        gx = None
        if x.requires_grad:
            gx = _nchw((gcols @ wmat.T).reshape(n, h, wd_, ci))
        gw = np.ascontiguousarray((xm.T @ gcols).reshape(ci, kh, kw, o).transpose(0, 3, 1, 2))
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        return (gx, gw, gb)

    inputs = (x, w, b) if b is not None else (x, w)
    return record("conv_transpose2d", out, inputs, _bw)


# ----------------------------------------------------------------------
# losses


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    if logits.data.ndim != 2:
        raise ConfigurationError(f"cross_entropy: logits must be N x C, got {logits.shape}")
    n, c = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise InputError(f"cross_entropy: expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c or not np.issubdtype(labels.dtype, np.integer)):
        raise InputError(f"cross_entropy: labels must be integers in [0, {c})")
    z = logits.data.astype(np.float64)
    zmax = z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=1)) + zmax[:, 0]
    nll = lse - z[np.arange(n), labels]
    out = np.asarray(nll.sum() / n, dtype=logits.dtype)

    def _bw(g):
        p = _softmax_np(z)
        p[np.arange(n), labels] -= 1.0
        return ((p * (float(g) / n)).astype(logits.dtype),)

    return record("cross_entropy", out, (logits,), _bw)


def weighted_mse(pred: Tensor, target, weight=None) -> Tensor:
    """Mean of ``weight * (pred - target)**2``; ``weight`` is a constant."""
    target = _as_tensor(target, like=pred)
    _check_same_shape("weighted_mse", pred, target)
    if weight is None:
        wd = None
    else:
        wd = weight.data if isinstance(weight, Tensor) else np.asarray(weight, dtype=pred.dtype)
        if wd.shape != pred.shape:
            raise ConfigurationError(f"weighted_mse: weight {wd.shape} does not match {pred.shape}")
        if np.any(wd < 0):
            raise InputError("weighted_mse: weights must be non-negative")
    diff = pred.data - target.data
    sq = diff * diff if wd is None else wd * diff * diff
    n = max(pred.size, 1)
    out = np.asarray(_mean64(sq), dtype=pred.dtype)

    def _bw(g):
        gp = diff * (2.0 * float(g) / n) if wd is None else wd * diff * (2.0 * float(g) / n)
        gp = gp.astype(pred.dtype)
        return (gp, -gp)

    return record("weighted_mse", out, (pred, target), _bw)
