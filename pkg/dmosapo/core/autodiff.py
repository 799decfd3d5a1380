"""
Reverse-mode differentiation over numpy float64 arrays.

Every op returns a ``Value``. When gradients are enabled and at least one input is
tracked (a parameter, or the output of a recorded op), the op also records a ``Node``
holding its inputs and a vector-Jacobian rule. Node indices come from a global
counter, so creation order is a topological order of the graph; ``Tape`` collects
the nodes reachable from a root and replays them in reverse index order.

Two primitives exist specifically for decoupled rollouts:

* ``stop_gradient(v)``: same data, no upstream gradient.
* ``decoupled_anchor(forward, local)``: data is ``forward`` (bitwise), gradient is
  routed to ``local`` unchanged. Algebraically this is
  ``stop_gradient(forward) + local - stop_gradient(local)``; it is recorded as a
  single node so the value path is exact instead of ``(f + l) - l``.
"""

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from dmosapo.core.exceptions import NonScalarRootError, ShapeMismatchError

_node_ids = itertools.count()
_grad_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextmanager
def no_grad():
    """Ops inside the block produce untracked leaves."""
    previous = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


class Node:
    __slots__ = ("index", "kind", "inputs", "live", "vjp")

    def __init__(self, kind: str, inputs: tuple, vjp: Callable):
        self.index = next(_node_ids)
        self.kind = kind
        self.inputs = inputs
        # inputs tracked when the op ran; freezing a module later does not reopen them
        self.live = tuple(v.tracked for v in inputs)
        self.vjp = vjp


class Value:
    """A float64 array that may take part in reverse-mode differentiation."""

    __slots__ = ("data", "_grad", "node", "requires_grad", "name")
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self._grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None
        self.requires_grad = requires_grad
        self.name = name

    # ── gradient buffer ─────────────────────────────────────────

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value):
        self._grad = None if value is None else np.array(value, dtype=np.float64)

    @property
    def has_grad(self) -> bool:
        """True once a backward pass has written into this value."""
        return self._grad is not None

    def zero_grad(self):
        self._grad = None

    @property
    def tracked(self) -> bool:
        return self.requires_grad or self.node is not None

    # ── array-like helpers ──────────────────────────────────────

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise NonScalarRootError(self.shape, "item()")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Value(shape={self.shape}{label}, tracked={self.tracked})"

    # ── operators ───────────────────────────────────────────────

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return take(self, index)

    def tanh(self):
        return tanh(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sum(self, axis=None, keepdims: bool = False):
        return vsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_value(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


def _record(data: np.ndarray, kind: str, inputs: Sequence[Value], vjp: Callable) -> Value:
    out = Value(data)
    if is_grad_enabled() and any(v.tracked for v in inputs):
        out.node = Node(kind, tuple(inputs), vjp)
    return out


def _broadcast(op: str, a: Value, b: Value) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(op, a.shape, b.shape) from None


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ==========================================
# ELEMENTWISE BINARY OPS
# ==========================================

def add(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _broadcast("add", a, b)
    return _record(a.data + b.data, "add", (a, b), lambda g: (g, g))


def sub(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _broadcast("sub", a, b)
    return _record(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def mul(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _broadcast("mul", a, b)
    return _record(a.data * b.data, "mul", (a, b), lambda g: (g * b.data, g * a.data))


def div(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _broadcast("div", a, b)
    out = a.data / b.data
    return _record(out, "div", (a, b), lambda g: (g / b.data, -g * out / b.data))


def minimum(a, b) -> Value:
    """Elementwise min; ties send the gradient to ``a``."""
    a, b = as_value(a), as_value(b)
    _broadcast("minimum", a, b)
    pick_a = a.data <= b.data
    return _record(
        np.where(pick_a, a.data, b.data), "minimum", (a, b),
        lambda g: (g * pick_a, g * ~pick_a),
    )


def maximum(a, b) -> Value:
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = as_value(a), as_value(b)
    _broadcast("maximum", a, b)
    pick_a = a.data >= b.data
    return _record(
        np.where(pick_a, a.data, b.data), "maximum", (a, b),
        lambda g: (g * pick_a, g * ~pick_a),
    )


# ==========================================
# ELEMENTWISE UNARY OPS
# ==========================================

def neg(a) -> Value:
    a = as_value(a)
    return _record(-a.data, "neg", (a,), lambda g: (-g,))


def power(a, exponent: float) -> Value:
    a = as_value(a)
    exponent = float(exponent)
    return _record(
        a.data ** exponent, "pow", (a,),
        lambda g: (g * exponent * a.data ** (exponent - 1.0),),
    )


def tanh(a) -> Value:
    a = as_value(a)
    out = np.tanh(a.data)
    return _record(out, "tanh", (a,), lambda g: (g * (1.0 - out * out),))


def exp(a) -> Value:
    a = as_value(a)
    out = np.exp(a.data)
    return _record(out, "exp", (a,), lambda g: (g * out,))


def log(a) -> Value:
    a = as_value(a)
    return _record(np.log(a.data), "log", (a,), lambda g: (g / a.data,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -x))


def sigmoid(a) -> Value:
    a = as_value(a)
    out = _sigmoid(a.data)
    return _record(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Value:
    a = as_value(a)
    return _record(np.logaddexp(0.0, a.data), "softplus", (a,), lambda g: (g * _sigmoid(a.data),))


def clip(a, low: float, high: float) -> Value:
    """Hard clamp; gradient passes only strictly inside the bounds."""
    a = as_value(a)
    inside = (a.data > low) & (a.data < high)
    return _record(np.clip(a.data, low, high), "clip", (a,), lambda g: (g * inside,))


def gaussian_sample(mu, log_std, eps) -> Value:
    """Reparameterized draw ``mu + exp(log_std) * eps``; ``eps`` is a constant."""
    mu, log_std = as_value(mu), as_value(log_std)
    eps = np.asarray(eps.data if isinstance(eps, Value) else eps, dtype=np.float64)
    shape = _broadcast("gaussian_sample", mu, log_std)
    if np.broadcast_shapes(shape, eps.shape) != shape:
        raise ShapeMismatchError("gaussian_sample", shape, eps.shape)
    scaled = np.exp(log_std.data) * eps
    return _record(mu.data + scaled, "gaussian_sample", (mu, log_std), lambda g: (g, g * scaled))


# ==========================================
# LINEAR ALGEBRA & SHAPE OPS
# ==========================================

def matmul(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatchError("matmul", a.shape, b.shape)
    return _record(
        a.data @ b.data, "matmul", (a, b),
        lambda g: (g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g),
    )


def concat(values: Iterable, axis: int = -1) -> Value:
    values = [as_value(v) for v in values]
    ndim = values[0].ndim
    ax = axis % ndim
    for v in values[1:]:
        same = v.ndim == ndim and all(
            s == t for i, (s, t) in enumerate(zip(v.shape, values[0].shape)) if i != ax
        )
        if not same:
            raise ShapeMismatchError("concat", values[0].shape, v.shape)
    splits = np.cumsum([v.shape[ax] for v in values])[:-1]
    return _record(
        np.concatenate([v.data for v in values], axis=ax), "concat", tuple(values),
        lambda g: tuple(np.split(g, splits, axis=ax)),
    )


def take(a, index) -> Value:
    """Basic or fancy indexing (``a[index]``)."""
    a = as_value(a)

    basic = all(
        isinstance(i, (slice, int, type(Ellipsis), type(None)))
        for i in (index if isinstance(index, tuple) else (index,))
    )

    def vjp(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _record(a.data[index], "slice", (a,), vjp)


def reshape(a, shape: tuple) -> Value:
    a = as_value(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeMismatchError("reshape", a.shape, tuple(shape)) from None
    return _record(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def transpose(a) -> Value:
    """Swap the last two axes."""
    a = as_value(a)
    if a.ndim < 2:
        raise ShapeMismatchError("transpose", a.shape, a.shape)
    return _record(np.swapaxes(a.data, -1, -2).copy(), "transpose", (a,), lambda g: (np.swapaxes(g, -1, -2),))


def vsum(a, axis=None, keepdims: bool = False) -> Value:
    a = as_value(a)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(a.data.sum(axis=axis, keepdims=keepdims), "sum", (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Value:
    a = as_value(a)
    count = a.data.size if axis is None else np.prod(
        [a.shape[i] for i in np.atleast_1d(axis)]
    )
    return vsum(a, axis=axis, keepdims=keepdims) * (1.0 / float(count))


# ==========================================
# GRADIENT ROUTING
# ==========================================

def stop_gradient(v) -> Value:
    """Same data, detached from the graph."""
    v = as_value(v)
    return Value(v.data.copy())


def decoupled_anchor(forward_value, local_value: Value) -> Value:
    """Value of ``forward_value``, gradient of ``local_value``."""
    forward = np.asarray(
        forward_value.data if isinstance(forward_value, Value) else forward_value,
        dtype=np.float64,
    )
    local_value = as_value(local_value)
    if forward.shape != local_value.shape:
        raise ShapeMismatchError("decoupled_anchor", forward.shape, local_value.shape)
    return _record(forward.copy(), "anchor", (local_value,), lambda g: (g,))


# Registry used by ``forward_op`` and the gradient oracle suite
OPS = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "pow": power,
    "matmul": matmul,
    "tanh": tanh,
    "exp": exp,
    "log": log,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "clip": clip,
    "minimum": minimum,
    "maximum": maximum,
    "gaussian_sample": gaussian_sample,
    "concat": concat,
    "slice": take,
    "reshape": reshape,
    "transpose": transpose,
    "sum": vsum,
    "mean": mean,
}


def forward_op(kind: str, *inputs, **kwargs) -> Value:
    try:
        fn = OPS[kind]
    except KeyError:
        raise ValueError(f"Unknown op '{kind}'") from None
    if kind == "concat":
        return fn(inputs, **kwargs)
    return fn(*inputs, **kwargs)


# ==========================================
# TAPE & BACKWARD
# ==========================================

class Tape:
    """Recorded nodes reachable from a scalar root, in creation order."""

    def __init__(self, root: Value, entries: list):
        self.root = root
        self.entries = entries

    @classmethod
    def record(cls, root: Value) -> "Tape":
        seen = set()
        entries = []
        stack = [root]
        while stack:
            v = stack.pop()
            if v.node is None or id(v) in seen:
                continue
            seen.add(id(v))
            entries.append((v.node.index, v))
            stack.extend(v.node.inputs)
        entries.sort(key=lambda e: e[0])
        return cls(root, [v for _, v in entries])

    def kinds(self) -> list:
        return [v.node.kind for v in self.entries]

    def leaves(self) -> list:
        found, seen = [], set()
        for v in self.entries:
            for inp in v.node.inputs:
                if inp.node is None and inp.requires_grad and id(inp) not in seen:
                    seen.add(id(inp))
                    found.append(inp)
        if self.root.node is None and self.root.requires_grad:
            found.append(self.root)
        return found

    def backward(self) -> dict:
        root = self.root
        if root.data.size != 1:
            raise NonScalarRootError(root.shape)
        touched = {}
        seed = np.ones_like(root.data)
        if root.node is None:
            if root.requires_grad:
                root._grad = root.grad + seed
                touched[id(root)] = root
            return {v: v.grad for v in touched.values()}

        pending = {id(root): seed}
        for v in reversed(self.entries):
            g = pending.pop(id(v), None)
            if g is None:
                continue
            for inp, live, gi in zip(v.node.inputs, v.node.live, v.node.vjp(g)):
                if gi is None or not live:
                    continue
                gi = _unbroadcast(np.asarray(gi, dtype=np.float64), inp.shape)
                if inp.node is not None:
                    prev = pending.get(id(inp))
                    pending[id(inp)] = gi if prev is None else prev + gi
                else:
                    inp._grad = gi.copy() if inp._grad is None else inp._grad + gi
                    touched[id(inp)] = inp
        return {v: v.grad for v in touched.values()}


def backward(root: Value) -> dict:
    """Accumulate d(root)/d(param) into every reachable parameter's ``grad``.

    Returns a mapping from parameter ``Value`` to its accumulated gradient.
    """
    if root.data.size != 1:
        raise NonScalarRootError(root.shape)
    return Tape.record(root).backward()
