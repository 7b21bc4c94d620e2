"""Dense tensor with a thread-local reverse-mode tape.

Every differentiable op records one node on the active tape: the output
tensor, its inputs, and a closure mapping the output gradient to input
gradients. Recording order is a topological order of the graph, so the
backward pass simply replays the tape in reverse.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from ..errors import UsageError

DEFAULT_DTYPE = np.float32


class Tensor:
    """An n-dimensional array that may participate in the autodiff tape.

    ``data`` is float32 unless a dtype is requested explicitly (gradient
    checks run in float64 to keep finite differences meaningful).
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
        self.data = np.asarray(arr, dtype=dtype, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # arithmetic sugar; the ops module owns the implementations
    def __add__(self, other):
        from .ops import add
        return add(self, other)

    def __mul__(self, other):
        from .ops import mul
        return mul(self, other)

    def __neg__(self):
        from .ops import scale
        return scale(self, -1.0)

    def __sub__(self, other):
        from .ops import add, scale
        return add(self, scale(other, -1.0))

    def sum(self):
        from .ops import sum_all
        return sum_all(self)

    def reshape(self, *shape):
        from .ops import reshape
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@dataclass
class Node:
    op: str
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward_fn: BackwardFn


class Tape:
    """Ordered log of executed ops plus whatever each op saved for backward."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self._outputs: set[int] = set()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, out: Tensor, inputs: tuple[Tensor, ...], backward_fn: BackwardFn) -> None:
        self.nodes.append(Node(op, out, inputs, backward_fn))
        self._outputs.add(id(out))

    def produced(self, t: Tensor) -> bool:
        return id(t) in self._outputs

    def clear(self) -> None:
        # dropping the nodes releases the closures and every saved array
        self.nodes = []
        self._outputs = set()


class _TapeState(threading.local):
    def __init__(self) -> None:
        self.tape = Tape()
        self.enabled = True


_state = _TapeState()


def get_tape() -> Tape:
    return _state.tape


def grad_enabled() -> bool:
    return _state.enabled


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run ops without recording them."""
    prev = _state.enabled
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def record(op: str, out_data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn: BackwardFn) -> Tensor:
    """Wrap an op result and put it on the tape when any input needs grad."""
    needs = _state.enabled and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs, dtype=out_data.dtype)
    if needs:
        _state.tape.record(op, out, inputs, backward_fn)
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires_grad tensor feeding ``loss``.

    Gradients accumulate into existing ``.grad`` arrays; the tape is consumed,
    so a second call on the same loss raises ``UsageError``.
    """
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tape = _state.tape
    if not tape.produced(loss):
        raise UsageError("loss is not on the active tape (backward already ran or grads were reset)")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    touched: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        g_out = grads.pop(id(node.out), None)
        if g_out is None:
            continue
        in_grads = node.backward_fn(g_out)
        for t, g in zip(node.inputs, in_grads):
            if g is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
                touched[key] = t
        _accumulate(node.out, g_out)

    # leaves (parameters, inputs) never appear as node outputs
    for key, g in grads.items():
        _accumulate(touched[key], g)
    tape.clear()


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.data.dtype).reshape(t.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g
