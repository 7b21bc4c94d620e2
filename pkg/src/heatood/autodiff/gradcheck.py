"""Central finite-difference gradient checks."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad


def numerical_grad(fn: Callable[[], Tensor], t: Tensor, step: float = 1e-3) -> np.ndarray:
    """d fn() / d t by central differences, perturbing ``t.data`` in place."""
    grad = np.zeros(t.shape, dtype=np.float64)
    flat = t.data.reshape(-1)
    g = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(fn().data)
            flat[i] = orig - step
            fm = float(fn().data)
            flat[i] = orig
            g[i] = (fp - fm) / (2 * step)
    return grad


def gradcheck(fn: Callable[[], Tensor], inputs: Sequence[Tensor], step: float = 1e-3) -> float:
    """Largest relative error between tape gradients and finite differences.

    The relative error of each input is ``|a - n| / max(|a|, |n|, 1e-8)`` taken
    over the whole gradient vector (norm-wise) so that isolated near-zero
    entries do not dominate.
    """
    for t in inputs:
        t.grad = None
    backward(fn())
    worst = 0.0
    for t in inputs:
        analytic = np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64)
        numeric = numerical_grad(fn, t, step)
        denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-8)
        worst = max(worst, float(np.linalg.norm(analytic - numeric) / denom))
    return worst
