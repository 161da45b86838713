"""Tape-free reverse-mode autodiff over dense numpy arrays.

Every op records its parents and a vector-Jacobian product written in terms
of other ops, so a backward pass run with recording enabled yields gradients
that are themselves differentiable (see :func:`backward_as_graph`).
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_recording = True


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested op."""


class GraphError(RuntimeError):
    """Misuse of the graph: non-scalar root, unreachable target, missing grad."""


@contextlib.contextmanager
def no_grad():
    global _recording
    prev = _recording
    _recording = False
    try:
        yield
    finally:
        _recording = prev


@contextlib.contextmanager
def _record(enabled: bool):
    global _recording
    prev = _recording
    _recording = enabled
    try:
        yield
    finally:
        _recording = prev


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "parents", "vjp", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.vjp = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def numpy(self) -> np.ndarray:
        return self.value

    def detach(self) -> "Tensor":
        return Tensor(self.value)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar; every path goes through the ops below
    def __add__(self, other):
        return add(self, _lift(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __rsub__(self, other):
        return sub(_lift(other, self), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / float(other))
        return mul(self, reciprocal(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.broadcast_to(np.asarray(x, dtype=DTYPE), like.shape).copy())


def make_node(value, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Create an op output. ``vjp(g, needed)`` returns one grad (or None) per parent.

    Public so that tests and extensions can define custom primitives.
    """
    out = Tensor(value)
    if _recording and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.vjp = vjp
    return out


def _need_same(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a bias whose shape is ``a.shape[-1:]``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        return make_node(a.value + b.value, (a, b), lambda g, n: (g if n[0] else None, g if n[1] else None))
    if b.value.ndim == 1 and a.value.ndim >= 1 and a.shape[-1:] == b.shape:
        lead = tuple(range(a.value.ndim - 1))
        return make_node(
            a.value + b.value,
            (a, b),
            lambda g, n: (g if n[0] else None, sum(g, axis=lead) if n[1] else None),
        )
    raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _need_same(a, b, "sub")
    return make_node(
        a.value - b.value, (a, b), lambda g, n: (g if n[0] else None, scale(g, -1.0) if n[1] else None)
    )


def scale(a: Tensor, k: float) -> Tensor:
    a = as_tensor(a)
    return make_node(a.value * k, (a,), lambda g, n: (scale(g, k),))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _need_same(a, b, "mul")
    return make_node(
        a.value * b.value,
        (a, b),
        lambda g, n: (mul(g, b) if n[0] else None, mul(g, a) if n[1] else None),
    )


def reciprocal(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out_holder = []

    def vjp(g, n):
        out = out_holder[0]
        return (scale(mul(g, mul(out, out)), -1.0),)

    out = make_node(1.0 / a.value, (a,), vjp)
    out_holder.append(out)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    return make_node(
        a.value @ b.value,
        (a, b),
        lambda g, n: (
            matmul(g, transpose(b)) if n[0] else None,
            matmul(transpose(a), g) if n[1] else None,
        ),
    )


def transpose(a: Tensor) -> Tensor:
    a = as_tensor(a)
    if a.value.ndim != 2:
        raise ShapeError(f"transpose: expected 2-d, got {a.shape}")
    return make_node(a.value.T, (a,), lambda g, n: (transpose(g),))


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        value = a.value.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from exc
    src = a.shape
    return make_node(value, (a,), lambda g, n: (reshape(g, src),))


def broadcast_to(a: Tensor, shape) -> Tensor:
    """Explicit broadcast (numpy rules); the only broadcasting the engine performs."""
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        value = np.broadcast_to(a.value, shape).copy()
    except ValueError as exc:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from exc
    src = a.shape
    return make_node(value, (a,), lambda g, n: (_sum_to(g, src),))


def _sum_to(g: Tensor, shape) -> Tensor:
    extra = g.value.ndim - len(shape)
    axes = tuple(range(extra)) + tuple(
        i + extra for i, s in enumerate(shape) if s == 1 and g.shape[i + extra] != 1
    )
    out = sum(g, axis=axes, keepdims=True) if axes else g
    return reshape(out, shape)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    src = a.shape
    if axis is None:
        axes = tuple(range(a.value.ndim))
    elif isinstance(axis, int):
        axes = (axis % a.value.ndim,)
    else:
        axes = tuple(ax % a.value.ndim for ax in axis)
    value = a.value.sum(axis=axes, keepdims=keepdims)
    kept = tuple(1 if i in axes else s for i, s in enumerate(src))

    def vjp(g, n):
        return (broadcast_to(reshape(g, kept), src),)

    return make_node(value, (a,), vjp)


def mean(a: Tensor, axis=None) -> Tensor:
    a = as_tensor(a)
    total = sum(a, axis=axis)
    count = a.size // max(total.size, 1)
    return scale(total, 1.0 / count)


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    mask = (a.value > 0).astype(DTYPE)
    return make_node(np.maximum(a.value, 0.0), (a,), lambda g, n: (mul(g, Tensor(mask)),))


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    holder = []
    out = make_node(np.exp(a.value), (a,), lambda g, n: (mul(g, holder[0]),))
    holder.append(out)
    return out


def _sigmoid_np(x):
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    holder = []

    def vjp(g, n):
        s = holder[0]
        return (mul(g, mul(s, sub(Tensor(np.ones(s.shape)), s))),)

    out = make_node(_sigmoid_np(a.value), (a,), vjp)
    holder.append(out)
    return out


def softplus(a: Tensor) -> Tensor:
    a = as_tensor(a)
    x = a.value
    value = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return make_node(value, (a,), lambda g, n: (mul(g, sigmoid(a)),))


def sin(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return make_node(np.sin(a.value), (a,), lambda g, n: (mul(g, cos(a)),))


def cos(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return make_node(np.cos(a.value), (a,), lambda g, n: (scale(mul(g, sin(a)), -1.0),))


def square(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return make_node(a.value * a.value, (a,), lambda g, n: (scale(mul(g, a), 2.0),))


def sqrt(a: Tensor) -> Tensor:
    a = as_tensor(a)
    holder = []
    out = make_node(np.sqrt(a.value), (a,), lambda g, n: (scale(mul(g, reciprocal(holder[0])), 0.5),))
    holder.append(out)
    return out


def squared_norm(a: Tensor) -> Tensor:
    return sum(square(a))


def norm(a: Tensor) -> Tensor:
    return sqrt(squared_norm(a))


def take(a: Tensor, index) -> Tensor:
    """Gather rows ``a[index]``; the adjoint scatters (adds) back."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    rows = a.shape[0]
    return make_node(a.value[index], (a,), lambda g, n: (scatter_add(g, index, rows),))


def scatter_add(a: Tensor, index, rows: int) -> Tensor:
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    out = np.zeros((rows,) + a.shape[index.ndim:], dtype=DTYPE)
    np.add.at(out, index, a.value)
    return make_node(out, (a,), lambda g, n: (take(g, index),))


# ---------------------------------------------------------------- backward


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order  # parents before children


def _run_backward(root: Tensor, seed: Tensor, keep: set[int] | None):
    order = _topo_order(root)
    if keep is not None:
        # restrict to nodes lying on a path towards one of the targets
        on_path: set[int] = set()
        for node in order:
            if id(node) in keep or any(id(p) in on_path for p in node.parents):
                on_path.add(id(node))
        order = [n for n in order if id(n) in on_path]
        live = on_path
    else:
        live = None
    grads: dict[int, Tensor] = {id(root): seed}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node.vjp is None:
            continue
        needed = tuple(
            p.requires_grad and (live is None or id(p) in live) for p in node.parents
        )
        if not any(needed):
            continue
        parent_grads = node.vjp(g, needed)
        for p, pg, need in zip(node.parents, parent_grads, needed):
            if not need or pg is None:
                continue
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else add(prev, pg)
    return grads, order


def backward(root: Tensor, retain_graph: bool = False) -> None:
    """Populate ``.grad`` (numpy) on every reachable node that requires grad.

    Existing ``.grad`` values are overwritten, not accumulated across calls.
    Unless ``retain_graph`` is set, interior nodes are detached afterwards: the
    vjp closures form reference cycles that would otherwise keep every
    intermediate array alive until the cyclic collector runs.
    """
    if root.size != 1:
        raise GraphError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    with _record(False):
        grads, order = _run_backward(root, Tensor(np.ones(root.shape)), None)
    for node in order:
        g = grads.get(id(node))
        node.grad = g.value if g is not None else np.zeros(node.shape)
    if not retain_graph:
        for node in order:
            if node.vjp is not None:
                node.vjp = None
                node.parents = ()


def backward_as_graph(root: Tensor, wrt):
    """Return d(root)/d(wrt) as a differentiable Tensor (or a list for a list ``wrt``)."""
    single = isinstance(wrt, Tensor)
    targets = [wrt] if single else list(wrt)
    if root.size != 1:
        raise GraphError(f"backward_as_graph needs a scalar root, got shape {root.shape}")
    reachable = {id(n) for n in _topo_order(root)} if root.requires_grad else set()
    for t in targets:
        if id(t) not in reachable:
            raise GraphError(f"target {t!r} is not reachable from the root")
    with _record(True):
        grads, _ = _run_backward(root, Tensor(np.ones(root.shape)), {id(t) for t in targets})
    out = [grads.get(id(t)) for t in targets]
    out = [g if g is not None else Tensor(np.zeros(t.shape)) for g, t in zip(out, targets)]
    return out[0] if single else out


def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], step: float = 1e-5,
               max_coords: int | None = 64, rng: np.random.Generator | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` rebuilds the scalar graph from the current ``params`` values. Error per
    coordinate is ``|a - fd| / (|a| + step)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    params = list(params)
    rng = rng or np.random.default_rng(0)
    for p in params:
        p.grad = None
    root = f()
    backward(root)
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.value.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            # recording stays on so objectives built from backward_as_graph still work
            flat[i] = orig + step
            up = float(f().value)
            flat[i] = orig - step
            down = float(f().value)
            flat[i] = orig
            fd = (up - down) / (2.0 * step)
            ai = a.reshape(-1)[i]
            worst = max(worst, abs(ai - fd) / (abs(ai) + step))
    return worst
