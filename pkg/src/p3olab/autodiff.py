"""Reverse-mode automatic differentiation over dense float64 arrays.

Every operation returns a new :class:`Tensor` that remembers its parents and a
closure mapping the upstream gradient to per-parent gradients.  The graph is
built by running ordinary Python code; :func:`backward` walks it in reverse
topological order.  Tensors are at most rank 2.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np


class AutodiffError(Exception):
    """Base class for errors raised by the engine."""


class ShapeError(AutodiffError):
    def __init__(self, op: str, *shapes: tuple):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {', '.join(str(s) for s in shapes)}")


class NonFiniteError(AutodiffError):
    def __init__(self, op: str, where: str = "output"):
        self.op = op
        super().__init__(f"{op}: non-finite {where}")


def _as_array(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    if arr.ndim > 2:
        raise ShapeError("tensor", arr.shape)
    return arr


class Tensor:
    """A float64 array with an optional gradient slot.

    Leaves are created directly; interior nodes are created by operations and
    carry ``_parents`` and ``_backward``.  ``requires_grad`` propagates: an op
    output requires grad when any input does.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, *, _op: str = "leaf",
                 _parents: tuple = (), _backward: Optional[Callable] = None):
        self.data = data if isinstance(data, np.ndarray) and data.dtype == np.float64 else _as_array(data)
        if self.data.ndim > 2:
            raise ShapeError(_op, self.data.shape)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.op = _op
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", self.shape)
        return float(self.data.reshape(()))

    def __float__(self) -> float:
        return self.item()

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(op={self.op!r}, shape={self.shape}, data={self.data!r})"

    def backward(self) -> None:
        backward(self)

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return subtract(self, other)
    def __rsub__(self, other): return subtract(other, self)
    def __mul__(self, other): return multiply(self, other)
    def __rmul__(self, other): return multiply(other, self)
    def __truediv__(self, other): return divide(self, other)
    def __rtruediv__(self, other): return divide(other, self)
    def __matmul__(self, other): return matmul(self, other)
    def __rmatmul__(self, other): return matmul(other, self)
    def __neg__(self): return negate(self)

    def sum(self, axis=None): return sum_(self, axis)
    def mean(self, axis=None): return mean(self, axis)
    def exp(self): return exp(self)
    def log(self): return log(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op: str, data: np.ndarray, parents: tuple, backward_fn: Callable) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(op)
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, _op=op)
    return Tensor(data, requires_grad=True, _op=op, _parents=parents, _backward=backward_fn)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# binary elementwise


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("add", a, b)
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def subtract(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("subtract", a, b)
    return _make("subtract", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def multiply(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("multiply", a, b)
    return _make("multiply", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def divide(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("divide", a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def grad_fn(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make("divide", out, (a, b), grad_fn)


def minimum(a, b) -> Tensor:
    """Elementwise min; at ties the gradient goes to ``a`` only."""
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("minimum", a, b)
    pick_a = a.data <= b.data
    return _make("minimum", np.where(pick_a, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)))


def maximum(a, b) -> Tensor:
    """Elementwise max; at ties the gradient goes to ``a`` only."""
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("maximum", a, b)
    pick_a = a.data >= b.data
    return _make("maximum", np.where(pick_a, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)))


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    return _make("matmul", a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g))


# unary


def negate(x) -> Tensor:
    x = _wrap(x)
    return _make("negate", -x.data, (x,), lambda g: (-g,))


def square(x) -> Tensor:
    x = _wrap(x)
    return _make("square", x.data * x.data, (x,), lambda g: (2.0 * x.data * g,))


def exp(x) -> Tensor:
    x = _wrap(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _make("exp", out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = _wrap(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return _make("log", out, (x,), lambda g: (g / x.data,))


def sigmoid(x) -> Tensor:
    x = _wrap(x)
    out = _sigmoid(x.data)
    return _make("sigmoid", out, (x,), lambda g: (g * (out * (1.0 - out)),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def tanh(x) -> Tensor:
    x = _wrap(x)
    out = np.tanh(x.data)
    return _make("tanh", out, (x,), lambda g: (g * (1.0 - out * out),))


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; boundary points pass gradient 1."""
    x = _wrap(x)
    if lo > hi:
        raise ValueError(f"clip: lo={lo} > hi={hi}")
    inside = (x.data >= lo) & (x.data <= hi)
    return _make("clip", np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def stop_gradient(x) -> Tensor:
    return Tensor(_wrap(x).data)


# shape and reductions


def sum_(x, axis: Optional[int] = None) -> Tensor:
    x = _wrap(x)
    if axis is None:
        return _make("sum", np.asarray(x.data.sum()), (x,),
                     lambda g: (np.broadcast_to(g, x.shape).copy(),))
    if not -x.data.ndim <= axis < x.data.ndim:
        raise ShapeError("sum", x.shape)
    return _make("sum", x.data.sum(axis=axis), (x,),
                 lambda g: (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),))


def mean(x, axis: Optional[int] = None) -> Tensor:
    x = _wrap(x)
    if x.size == 0:
        raise ShapeError("mean", x.shape)
    n = x.size if axis is None else x.shape[axis]
    if axis is None:
        return _make("mean", np.asarray(x.data.mean()), (x,),
                     lambda g: (np.full(x.shape, float(g) / n),))
    return _make("mean", x.data.mean(axis=axis), (x,),
                 lambda g: (np.broadcast_to(np.expand_dims(g, axis), x.shape) / n,))


def broadcast(x, shape: Sequence[int]) -> Tensor:
    x = _wrap(x)
    shape = tuple(shape)
    if len(shape) > 2:
        raise ShapeError("broadcast", x.shape, shape)
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise ShapeError("broadcast", x.shape, shape) from None
    return _make("broadcast", out, (x,), lambda g: (_unbroadcast(g, x.shape),))


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = _wrap(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, tuple(shape)) from None
    return _make("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def max_const(x, axis: int) -> np.ndarray:
    """Row max as a plain array, for numerically stable softmax shifts."""
    return _wrap(x).data.max(axis=axis, keepdims=True)


# graph traversal


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that require grad, inputs before consumers."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if root.size != 1:
        raise ShapeError("backward", root.shape)
    if not root.requires_grad:
        raise AutodiffError("backward: root does not depend on any leaf requiring grad")
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(topological_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            if not np.isfinite(g).all():
                raise NonFiniteError(node.op, "gradient")
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def zero_grads(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None


class Adam:
    """Bias-corrected Adam over a fixed list of parameter tensors.

    ``step`` refuses non-finite gradients and leaves parameters untouched in
    that case.
    """

    def __init__(self, params: Sequence[Tensor], alpha: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.alpha = alpha
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: Optional[Sequence[np.ndarray]] = None) -> None:
        if grads is None:
            grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in self.params]
        if len(grads) != len(self.params):
            raise ValueError("adam: one gradient per parameter required")
        for p, g in zip(self.params, grads):
            if g.shape != p.shape:
                raise ShapeError("adam", p.shape, g.shape)
            if not np.isfinite(g).all():
                raise NonFiniteError("adam", "gradient")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data = p.data - self.alpha * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self) -> None:
        zero_grads(self.params)

    def state_dict(self) -> dict:
        return {"step": self.step_count, "m": [m.copy() for m in self.m], "v": [v.copy() for v in self.v]}

    def load_state_dict(self, state: dict) -> None:
        self.step_count = state["step"]
        self.m = [m.copy() for m in state["m"]]
        self.v = [v.copy() for v in state["v"]]


def finite_diff_check(fn: Callable[[], Tensor], leaf: Tensor, h: float = 1e-5) -> float:
    """Max relative error between autodiff and central differences.

    ``fn`` rebuilds the scalar graph from the current value of ``leaf``.  The
    error per entry is ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if not 1e-7 <= h <= 1e-4:
        raise ValueError(f"finite_diff_check: h={h} outside [1e-7, 1e-4]")
    saved_grad = leaf.grad
    leaf.grad = None
    out = fn()
    backward(out)
    analytic = leaf.grad.copy()
    leaf.grad = saved_grad

    base = leaf.data.copy()
    numeric = np.empty_like(base)
    flat = numeric.reshape(-1)
    try:
        for i in range(base.size):
            shifted = base.copy().reshape(-1)
            x0 = shifted[i]
            hi, lo = x0 + h, x0 - h
            shifted[i] = hi
            leaf.data = shifted.reshape(base.shape)
            plus = fn().item()
            shifted[i] = lo
            leaf.data = shifted.reshape(base.shape)
            minus = fn().item()
            if not (np.isfinite(plus) and np.isfinite(minus)):
                raise NonFiniteError("finite_diff_check", "perturbation result")
            # divide by the realized step, not 2h, to cancel representation error
            flat[i] = (plus - minus) / (hi - lo)
    finally:
        leaf.data = base
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0
