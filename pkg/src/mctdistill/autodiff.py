"""Tape-based reverse-mode automatic differentiation on dense float64 arrays.

Every backward rule is written with the same primitives that the forward
pass uses, so the gradients returned by :func:`grad` are themselves nodes on
the active tape and can be differentiated again.  That is what lets the
distiller backpropagate through an unrolled inner SGD loop.

Usage::

    with Tape():
        x = Tensor([1.0, 2.0, 3.0])
        f = sum(mul(x, x))
        (g,) = grad(f, [x])        # g is on the tape
        (h,) = grad(sum(mul(g, g)), [x])

Outside a tape, operations compute values only and record nothing.
"""

from __future__ import annotations

import itertools
import threading
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import GradientError, NonFiniteError, ShapeError

__all__ = [
    "Tensor",
    "Tape",
    "current_tape",
    "grad",
    "finite_difference_check",
    "add",
    "sub",
    "mul",
    "div",
    "matmul",
    "transpose",
    "relu",
    "exp",
    "square",
    "sqrt",
    "scalar_mul",
    "sum",
    "mean",
    "sum_to",
    "broadcast_to",
    "log_softmax",
    "gather_rows",
    "scatter_rows",
]

_node_ids = itertools.count()
_local = threading.local()

# Debug verification mode: every op result is checked for NaN/Inf.
VERIFY_FINITE = False


class Tensor:
    """A dense float64 array plus the bookkeeping needed for reverse mode."""

    __slots__ = ("data", "parents", "vjp", "op", "order", "__weakref__")

    def __init__(self, data, *, _parents=(), _vjp=None, _op="leaf"):
        arr = np.array(data, dtype=np.float64, order="C")
        self.data = arr
        self.parents: tuple = _parents
        self.vjp: Optional[Callable] = _vjp
        self.op = _op
        self.order = next(_node_ids)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape})"

    # Arithmetic sugar; all routes through the primitives below.
    def __add__(self, other):
        return add(self, _lift(other, self.shape))

    def __sub__(self, other):
        return sub(self, _lift(other, self.shape))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scalar_mul(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scalar_mul(self, -1.0)


def _lift(value, shape):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.broadcast_to(np.asarray(value, dtype=np.float64), shape))


class Tape:
    """Ordered record of primitive applications.

    Tapes nest: entering a tape makes it the recording target for the current
    thread until it exits.  ``release`` drops every recorded node's links to
    its inputs so that the whole graph can be reclaimed at once.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self):
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        stack.pop()
        return False

    def record(self, node: Tensor) -> None:
        self.nodes.append(node)

    def release(self) -> None:
        for node in self.nodes:
            node.parents = ()
            node.vjp = None
        self.nodes.clear()

    def __len__(self):
        return len(self.nodes)


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def current_tape() -> Optional[Tape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _make(value: np.ndarray, op: str, parents: tuple, vjp: Callable) -> Tensor:
    if VERIFY_FINITE and not np.all(np.isfinite(value)):
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(value, dtype=np.float64)
    out.op = op
    out.order = next(_node_ids)
    tape = current_tape()
    if tape is None:
        out.parents, out.vjp = (), None
    else:
        out.parents, out.vjp = parents, vjp
        tape.record(out)
    return out


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(op, a.shape, b.shape)


# ---------------------------------------------------------------------------
# primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same("add", a, b)
    return _make(a.data + b.data, "add", (a, b), lambda g, need: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same("sub", a, b)
    return _make(a.data - b.data, "sub", (a, b), lambda g, need: (g, scalar_mul(g, -1.0) if need[1] else None))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same("mul", a, b)
    return _make(a.data * b.data, "mul", (a, b), lambda g, need: (mul(g, b) if need[0] else None, mul(g, a) if need[1] else None))


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same("div", a, b)
    out_val = a.data / b.data

    def vjp(g, need):
        ga = div(g, b)
        # d(a/b)/db = -(a/b)/b
        gb = scalar_mul(mul(ga, out), -1.0) if need[1] else None
        return ga, gb

    out = _make(out_val, "div", (a, b), vjp)
    return out


def scalar_mul(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _make(a.data * s, "scalar_mul", (a,), lambda g, need: (scalar_mul(g, s),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    return _make(
        a.data @ b.data,
        "matmul",
        (a, b),
        lambda g, need: (
            matmul(g, transpose(b)) if need[0] else None,
            matmul(transpose(a), g) if need[1] else None,
        ),
    )


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError("transpose", a.shape)
    return _make(np.ascontiguousarray(a.data.T), "transpose", (a,), lambda g, need: (transpose(g),))


def relu(a: Tensor) -> Tensor:
    # The mask is a constant: the second derivative of relu is zero a.e.
    mask = Tensor((a.data > 0).astype(np.float64))
    return _make(np.maximum(a.data, 0.0), "relu", (a,), lambda g, need: (mul(g, mask),))


def exp(a: Tensor) -> Tensor:
    def vjp(g, need):
        return (mul(g, out),)

    out = _make(np.exp(a.data), "exp", (a,), vjp)
    return out


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, "square", (a,), lambda g, need: (scalar_mul(mul(g, a), 2.0),))


def sqrt(a: Tensor) -> Tensor:
    def vjp(g, need):
        return (scalar_mul(div(g, out), 0.5),)

    out = _make(np.sqrt(a.data), "sqrt", (a,), vjp)
    return out


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors the primitive name
    shape = a.shape
    return _make(np.asarray(a.data.sum()), "sum", (a,), lambda g, need: (broadcast_to(g, shape),))


def mean(a: Tensor) -> Tensor:
    return scalar_mul(sum(a), 1.0 / a.size)


def _reduce_axes(src: tuple, dst: tuple) -> Optional[tuple]:
    """Axes of ``src`` to sum so that the result has shape ``dst``."""
    if len(dst) > len(src):
        return None
    lead = len(src) - len(dst)
    axes = list(range(lead))
    for i, d in enumerate(dst):
        s = src[lead + i]
        if d == s:
            continue
        if d != 1:
            return None
        axes.append(lead + i)
    return tuple(axes)


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if _reduce_axes(shape, a.shape) is None:
        raise ShapeError("broadcast", a.shape, shape)
    src = a.shape
    value = np.ascontiguousarray(np.broadcast_to(a.data, shape))
    return _make(value, "broadcast", (a,), lambda g, need: (sum_to(g, src),))


def sum_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    axes = _reduce_axes(a.shape, shape)
    if axes is None:
        raise ShapeError("sum_to", a.shape, shape)
    src = a.shape
    value = a.data.sum(axis=axes).reshape(shape) if axes else a.data.copy()
    return _make(value, "sum_to", (a,), lambda g, need: (broadcast_to(g, src),))


def log_softmax(a: Tensor) -> Tensor:
    """Row-wise log-softmax of a 2-D tensor."""
    if a.data.ndim != 2:
        raise ShapeError("log_softmax", a.shape)
    x = a.data
    shifted = x - x.max(axis=1, keepdims=True)
    value = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = (a.shape[0], 1)

    def vjp(g, need):
        soft = exp(out)
        return (sub(g, mul(soft, broadcast_to(sum_to(g, rows), a.shape))),)

    out = _make(value, "log_softmax", (a,), vjp)
    return out


def gather_rows(a: Tensor, index) -> Tensor:
    """``out[i] = a[i, index[i]]`` for a 2-D ``a``."""
    idx = np.asarray(index, dtype=np.int64)
    if a.data.ndim != 2 or idx.shape != (a.shape[0],):
        raise ShapeError("gather_rows", a.shape, idx.shape)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[1]):
        raise ShapeError("gather_rows", a.shape, idx.shape)
    shape = a.shape
    value = a.data[np.arange(shape[0]), idx]
    return _make(value, "gather_rows", (a,), lambda g, need: (scatter_rows(g, idx, shape),))


def scatter_rows(a: Tensor, index, shape) -> Tensor:
    """Adjoint of :func:`gather_rows`: place ``a[i]`` at ``(i, index[i])``."""
    idx = np.asarray(index, dtype=np.int64)
    shape = tuple(shape)
    if a.data.ndim != 1 or len(shape) != 2 or a.shape[0] != shape[0] or idx.shape != a.shape:
        raise ShapeError("scatter_rows", a.shape, shape)
    value = np.zeros(shape)
    value[np.arange(shape[0]), idx] = a.data
    return _make(value, "scatter_rows", (a,), lambda g, need: (gather_rows(g, idx),))


# ---------------------------------------------------------------------------
# differentiation


def grad(output: Tensor, wrt: Sequence[Tensor], *, allow_unused: bool = False) -> list[Tensor]:
    """Gradients of a scalar ``output`` with respect to each tensor in ``wrt``.

    Must be called while a tape is active; the backward computation is
    recorded on it, so the returned tensors are differentiable.  A ``wrt``
    tensor that ``output`` does not depend on raises :class:`GradientError`
    unless ``allow_unused`` is set, in which case its gradient is zeros.
    """
    if output.size != 1:
        raise GradientError(f"grad needs a scalar output, got shape {output.shape}")
    if current_tape() is None:
        raise GradientError("grad must run inside an active Tape")

    targets = {id(t) for t in wrt}

    # Collect the subgraph reachable from the output.
    reachable: dict[int, Tensor] = {}
    stack = [output]
    while stack:
        node = stack.pop()
        if id(node) in reachable:
            continue
        reachable[id(node)] = node
        stack.extend(node.parents)
    nodes = sorted(reachable.values(), key=lambda n: n.order)

    # Only nodes downstream of some target need an adjoint.
    needed: set[int] = set()
    for node in nodes:
        if id(node) in targets or any(id(p) in needed for p in node.parents):
            needed.add(id(node))

    missing = [i for i, t in enumerate(wrt) if id(t) not in needed]
    if missing and not allow_unused:
        raise GradientError(f"output does not depend on wrt tensor(s) at position(s) {missing}")

    adjoints: dict[int, Tensor] = {}
    if id(output) in needed:
        adjoints[id(output)] = Tensor(np.ones(output.shape))
    for node in reversed(nodes):
        if not node.parents or node.vjp is None:
            continue
        g = adjoints.get(id(node))
        if g is None:
            continue
        if id(node) not in targets:
            del adjoints[id(node)]
        parent_grads = node.vjp(g, tuple(id(p) in needed for p in node.parents))
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or id(parent) not in needed:
                continue
            acc = adjoints.get(id(parent))
            adjoints[id(parent)] = pg if acc is None else add(acc, pg)

    out = []
    for t in wrt:
        g = adjoints.get(id(t))
        out.append(g if g is not None else Tensor(np.zeros(t.shape)))
    return out


def finite_difference_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5) -> float:
    """Max relative error between the tape gradient of ``f`` and central differences.

    The error per coordinate is ``|analytic - numeric| / (|analytic| + 1e-12)``.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    tape = Tape()
    with tape:
        xt = Tensor(x0)
        (g,) = grad(f(xt), [xt], allow_unused=True)
        analytic = g.data.copy()
    tape.release()

    numeric = np.zeros_like(x0)
    flat = numeric.reshape(-1)
    for i in range(x0.size):
        xp = x0.copy().reshape(-1)
        xm = x0.copy().reshape(-1)
        xp[i] += h
        xm[i] -= h
        fp = f(Tensor(xp.reshape(x0.shape))).item()
        fm = f(Tensor(xm.reshape(x0.shape))).item()
        flat[i] = (fp - fm) / (2 * h)
    err = np.abs(analytic - numeric) / (np.abs(analytic) + 1e-12)
    return float(err.max()) if err.size else 0.0
