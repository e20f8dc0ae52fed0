"""Reverse-mode automatic differentiation on float64 numpy arrays.

Every differentiable quantity is a :class:`Tensor`.  Operations on tensors
that require gradients are recorded as graph nodes stamped with a
monotonically increasing id from the global :data:`tape`; ``backward`` walks
the nodes reachable from a scalar root in decreasing id order, which is a
valid reverse topological order because a node is always created after its
inputs.

Leaf gradients accumulate across ``backward`` calls until reset
(:meth:`Tensor.zero_grad` or an optimizer step).
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class Tape:
    """Global op recorder.

    Hands out node ids and keeps counters so tests can assert that a
    backward pass visits exactly the nodes recorded in the forward pass.
    """

    def __init__(self):
        self.next_id = 0
        self.enabled = True
        self.ops_recorded = 0
        self.nodes_visited = 0

    def stamp(self):
        self.next_id += 1
        self.ops_recorded += 1
        return self.next_id

    def reset_counters(self):
        self.ops_recorded = 0
        self.nodes_visited = 0


tape = Tape()


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    prev = tape.enabled
    tape.enabled = False
    try:
        yield
    finally:
        tape.enabled = prev


def _as_array(values):
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(())
    return arr


class Tensor:
    """A float64 array that can take part in reverse-mode differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_id")
    __array_priority__ = 100.0

    def __init__(self, values, requires_grad=False, name=None):
        self.data = _as_array(values)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._id = 0

    @classmethod
    def from_op(cls, data, parents: Sequence["Tensor"], backward: Callable):
        """Build the output of an op.

        ``backward(g)`` receives the upstream gradient and returns one array
        (or ``None``) per parent, in order.
        """
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        if tape.enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
            out._id = tape.stamp()
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
            out._id = 0
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def values(self):
        return self.data

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._backward is None

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return len(self.data)

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __truediv__ = lambda self, other: div(self, other)
    __rtruediv__ = lambda self, other: div(other, self)
    __matmul__ = lambda self, other: matmul(self, other)
    __neg__ = lambda self: neg(self)
    __abs__ = lambda self: absolute(self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def backward(root: Tensor):
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
    if root.data.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    nodes = {}
    stack = [root]
    while stack:
        node = stack.pop()
        if node._id in nodes or node._backward is None:
            continue
        nodes[node._id] = node
        for p in node._parents:
            if p._backward is not None and p._id not in nodes:
                stack.append(p)

    grads = {root._id: np.ones_like(root.data)}
    for nid in sorted(nodes, reverse=True):
        node = nodes[nid]
        g = grads.pop(nid, None)
        tape.nodes_visited += 1
        if g is None:
            continue
        pgrads = node._backward(g)
        for p, pg in zip(node._parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            if p._backward is None:
                if p.grad is None:
                    p.grad = np.array(pg, dtype=np.float64, copy=True).reshape(p.shape)
                else:
                    p.grad += pg
            elif p._id in grads:
                grads[p._id] = grads[p._id] + pg
            else:
                grads[p._id] = pg


# ---------------------------------------------------------------------------
# broadcasting helpers


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# element-wise binary ops


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return Tensor.from_op(
        a.data + b.data, (a, b), lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape))
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return Tensor.from_op(
        a.data - b.data, (a, b), lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape))
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def bw(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor.from_op(a.data * b.data, (a, b), bw)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    if np.any(b.data == 0):
        raise DomainError("div: division by zero")
    out = a.data / b.data

    def bw(g):
        ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor.from_op(out, (a, b), bw)


def neg(a):
    a = as_tensor(a)
    return Tensor.from_op(-a.data, (a,), lambda g: (-g,))


def matmul(a, b):
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return Tensor.from_op(out, (a, b), bw)


# ---------------------------------------------------------------------------
# element-wise unary ops


def _sigmoid(x, out=None):
    # tanh form: no overflow for any finite x and cheaper than exp-based splitting
    if out is None:
        out = np.array(x * 0.5, dtype=np.float64)
    else:
        np.multiply(x, 0.5, out=out)
    np.tanh(out, out=out)
    out *= 0.5
    out += 0.5
    return out


def sigmoid(a):
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * (1.0 - out * out),))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    if np.any(~(a.data > 0)):
        raise DomainError("log: argument must be strictly positive")
    return Tensor.from_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def square(a):
    a = as_tensor(a)
    return Tensor.from_op(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def sqrt(a):
    a = as_tensor(a)
    if np.any(~(a.data >= 0)):
        raise DomainError("sqrt: argument must be non-negative")
    out = np.sqrt(a.data)

    def bw(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(out > 0, 0.5 / out, 0.0)
        return (g * d,)

    return Tensor.from_op(out, (a,), bw)


def absolute(a):
    a = as_tensor(a)
    return Tensor.from_op(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def clip(a, lo, hi):
    """Clamp to [lo, hi]; gradient is zero where clamping is active."""
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = (a.data >= lo) & (a.data <= hi)
    return Tensor.from_op(out, (a,), lambda g: (g * inside,))


def l2norm(a, axis=-1):
    """Euclidean norm along ``axis``; the subgradient at the origin is taken as 0."""
    a = as_tensor(a)
    out = np.sqrt(np.sum(a.data * a.data, axis=axis))

    def bw(g):
        n = np.expand_dims(out, axis)
        with np.errstate(divide="ignore", invalid="ignore"):
            unit = np.where(n > 0, a.data / n, 0.0)
        return (np.expand_dims(g, axis) * unit,)

    return Tensor.from_op(out, (a,), bw)


# ---------------------------------------------------------------------------
# reductions and structural ops


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = np.sum(a.data, axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes) if axes else g
        return (np.broadcast_to(g, a.shape),)

    return Tensor.from_op(np.asarray(out, dtype=np.float64), (a,), bw)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = math.prod(a.shape[ax] for ax in axes) if axes else 1
    out = np.mean(a.data, axis=axes, keepdims=keepdims) if axes else a.data.copy()

    def bw(g):
        if not keepdims and axes:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape),)

    return Tensor.from_op(np.asarray(out, dtype=np.float64), (a,), bw)


def concat(tensors: Iterable, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            i != ax and x != y for i, (x, y) in enumerate(zip(ref, t.shape))
        ):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return Tensor.from_op(out, tensors, bw)


def getitem(a, index):
    """Basic slicing (e.g. a time-axis window ``x[:, 1:]``)."""
    a = as_tensor(a)
    out = a.data[index]

    def bw(g):
        full = np.zeros_like(a.data)
        if _is_advanced(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return Tensor.from_op(np.array(out, dtype=np.float64), (a,), bw)


def _is_advanced(index):
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def slice_time(a, start, stop):
    """Slice the time axis (axis 1) of an N x T x F tensor."""
    return getitem(a, (slice(None), slice(start, stop)))


def reshape(a, shape):
    a = as_tensor(a)
    out = a.data.reshape(shape)
    if out.size != a.size:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {shape}")
    return Tensor.from_op(out, (a,), lambda g: (g.reshape(a.shape),))


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam with bias correction.  One instance per network."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = np.zeros_like(p.data)

    def step(self):
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise ValueError(f"adam_step: parameter {p.name or i} has no gradient")
            if p.grad.shape != self.m[i].shape:
                raise ShapeError(
                    f"adam_step: gradient shape {p.grad.shape} != state shape {self.m[i].shape}"
                )
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.grad = np.zeros_like(p.data)


def adam_step(params, state: Adam):
    """Apply one Adam update to ``params`` using ``state``'s moments."""
    if list(params) != state.params:
        raise ValueError("adam_step: parameters do not match optimizer state")
    state.step()


# ---------------------------------------------------------------------------
# random numbers


class SeededRng:
    """Seeded PCG64 stream; normals come from Box-Muller on its uniforms.

    PCG64 output and numpy's uniform double conversion are specified
    bit-for-bit, so a seed reproduces the same draws on every platform.
    """

    def __init__(self, seed: int = 0):
        if not 0 <= int(seed) < 2**64:
            raise ValueError(f"seed must fit in 64 unsigned bits, got {seed}")
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def uniform(self, low=0.0, high=1.0, size=None):
        return low + (high - low) * self._gen.random(size)

    def normal(self, size=None):
        if size is None:
            return float(self.normal(1)[0])
        n = math.prod(size) if isinstance(size, tuple) else int(size)
        pairs = (n + 1) // 2
        u1 = 1.0 - self._gen.random(pairs)  # (0, 1], keeps log finite
        u2 = self._gen.random(pairs)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.empty(2 * pairs)
        z[0::2] = r * np.cos(2.0 * np.pi * u2)
        z[1::2] = r * np.sin(2.0 * np.pi * u2)
        return z[:n].reshape(size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def get_state(self) -> dict:
        return {"seed": self.seed, "bit_generator": self._gen.bit_generator.state}

    def set_state(self, state: dict):
        self.seed = int(state["seed"])
        self._gen.bit_generator.state = state["bit_generator"]


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(f, params: Sequence[Tensor], h=1e-5):
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    ``f`` takes no arguments, reads ``params`` and returns a scalar Tensor.
    """
    if h <= 0:
        raise ValueError("grad_check: h must be positive")
    saved = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = True
        p.grad = None
    out = f()
    if out.requires_grad:
        backward(out)
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]

    worst = 0.0
    with no_grad():
        for p, ga in zip(params, analytic):
            flat = p.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = float(f().data)
                flat[i] = orig - h
                fm = float(f().data)
                flat[i] = orig
                if not (math.isfinite(fp) and math.isfinite(fm)):
                    raise DomainError(f"grad_check: non-finite value near coordinate {i}")
                num = (fp - fm) / (2.0 * h)
                a = ga.reshape(-1)[i]
                worst = max(worst, abs(a - num) / max(1.0, abs(a)))
    for p, flag in zip(params, saved):
        p.requires_grad = flag
        p.grad = None
    return worst
