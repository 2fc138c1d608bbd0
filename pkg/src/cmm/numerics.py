"""Dense float64 tensors with reverse-mode automatic differentiation.

Every primitive defines a forward computation on numpy arrays and an
adjoint that accumulates into its parents' grad buffers. Graphs are
acyclic by construction; `backward` runs a reverse topological sweep.
Summation order inside each op is numpy's sequential row-major order,
so forward and gradient values are bit-reproducible on one thread.

A central-difference checker (`finite_diff_check`) is the independent
oracle for every adjoint.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

LOG_FLOOR = 1e-12
LAYERNORM_EPS = 1e-5
COSINE_GUARD = 1e-12


class ShapeError(ValueError):
    """Operand shapes incompatible with the requested primitive."""


class GraphError(RuntimeError):
    """Misuse of the differentiation graph (non-scalar loss, blocked rows, ...)."""


class Tensor:
    """A node in the differentiation graph.

    data is always a float64 ndarray. Interior-node grads are allocated
    lazily during backward and reset per call; leaf grads (parameters)
    are preallocated accumulators, so repeated backward calls without a
    reset exactly double them.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    def accumulate_grad(self, g) -> None:
        """Add g into this node's grad, allocating on first touch.

        The first contribution is copied: g may alias another node's
        buffer (identity-passing adjoints) or be a read-only broadcast
        view, and this grad must be a private accumulator.
        """
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
            if self.grad.shape != self.data.shape:
                self.grad = np.broadcast_to(self.grad, self.data.shape).copy()
        else:
            self.grad += g

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    # operator sugar; floats and arrays are lifted to constant tensors
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return mul_scalar(self, 1.0 / other)
        raise TypeError("tensor/tensor division is not a primitive; use explicit ops")


class Parameter:
    """A named trainable tensor. Names must be unique within a model."""

    __slots__ = ("name", "tensor")

    def __init__(self, name: str, data):
        self.name = name
        self.tensor = Tensor(data, requires_grad=True)
        self.tensor.grad = np.zeros_like(self.tensor.data)

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self) -> np.ndarray:
        return self.tensor.grad

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.tensor.shape})"


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make(data: np.ndarray, parents: tuple[Tensor, ...]) -> Tensor:
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
    out._parents = parents
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum grad over axes that were broadcast up from `shape`."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if g != s and s == 1)
    if keep:
        grad = grad.sum(axis=keep, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# arithmetic primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    out = _make(a.data + b.data, (a, b))

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.data.shape))

    out._backward = bw
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = _make(a.data - b.data, (a, b))

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(-_unbroadcast(g, b.data.shape))

    out._backward = bw
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = _make(a.data * b.data, (a, b))

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.data.shape))

    out._backward = bw
    return out


def mul_scalar(a: Tensor, s: float) -> Tensor:
    out = _make(a.data * s, (a,))

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(g * s)

    out._backward = bw
    return out


def add_scalar(a: Tensor, s: float) -> Tensor:
    out = _make(a.data + s, (a,))

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(g)

    out._backward = bw
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product A[..,m,k] @ B[..,k,n] with broadcastable batch dims."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.data.shape} x {b.data.shape}")
    out = _make(a.data @ b.data, (a, b))

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))

    out._backward = bw
    return out


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    out = _make(np.transpose(a.data, axes), (a,))
    inv = np.argsort(axes)

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(np.transpose(g, inv))

    out._backward = bw
    return out


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = _make(a.data.reshape(shape), (a,))

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(g.reshape(a.data.shape))

    out._backward = bw
    return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = tuple(tensors)
    out = _make(np.concatenate([t.data for t in parts], axis=axis), parts)
    sizes = [t.data.shape[axis] for t in parts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t.accumulate_grad(g[tuple(idx)])

    out._backward = bw
    return out


def gather_rows(a: Tensor, idx) -> Tensor:
    """Row gather along axis 0 (embedding lookup); adjoint scatter-adds."""
    index = np.asarray(idx, dtype=np.intp)
    out = _make(a.data[index], (a,))

    def bw(g):
        if a.requires_grad:
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            np.add.at(a.grad, index, g)

    out._backward = bw
    return out


def take_per_row(a: Tensor, idx) -> Tensor:
    """out[i] = a[i, idx[i]] for a 2-d tensor."""
    if a.data.ndim != 2:
        raise ShapeError(f"take_per_row needs a 2-d tensor, got {a.data.shape}")
    index = np.asarray(idx, dtype=np.intp)
    rows = np.arange(a.data.shape[0])
    out = _make(a.data[rows, index], (a,))

    def bw(g):
        if a.requires_grad:
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            np.add.at(a.grad, (rows, index), g)

    out._backward = bw
    return out


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = _make(a.data.sum(axis=axis, keepdims=keepdims), (a,))

    def bw(g):
        if a.requires_grad:
            if axis is None:
                a.accumulate_grad(np.broadcast_to(g, a.data.shape))
            elif keepdims:
                a.accumulate_grad(np.broadcast_to(g, a.data.shape))
            else:
                a.accumulate_grad(np.broadcast_to(np.expand_dims(g, axis), a.data.shape))

    out._backward = bw
    return out


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul_scalar(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# nonlinearities


def relu(a: Tensor) -> Tensor:
    out = _make(np.maximum(a.data, 0.0), (a,))

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(g * (a.data > 0.0))

    out._backward = bw
    return out


def sigmoid(a: Tensor) -> Tensor:
    """Numerically stable logistic: branches on sign to avoid overflow."""
    x = a.data
    s = np.empty_like(x)
    pos = x >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    s[~pos] = ex / (1.0 + ex)
    out = _make(s, (a,))

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(g * s * (1.0 - s))

    out._backward = bw
    return out


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    out = _make(e, (a,))

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(g * e)

    out._backward = bw
    return out


def log(a: Tensor) -> Tensor:
    """Natural log with inputs floored at LOG_FLOOR; flat below the floor."""
    clipped = np.maximum(a.data, LOG_FLOOR)
    out = _make(np.log(clipped), (a,))
    live = a.data > LOG_FLOOR

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(g * live / clipped)

    out._backward = bw
    return out


def masked_softmax(logits: Tensor, allow: np.ndarray) -> Tensor:
    """Softmax over the allowed subset of the last axis.

    Blocked entries get probability exactly 0. Every row must keep at
    least one allowed entry; a fully blocked row is a layout bug
    upstream and raises.
    """
    mask = np.broadcast_to(np.asarray(allow, dtype=bool), logits.data.shape)
    if not mask.any(axis=-1).all():
        raise GraphError("masked_softmax: fully blocked row")
    neg = np.where(mask, logits.data, -np.inf)
    m = neg.max(axis=-1, keepdims=True)
    e = np.exp(neg - m)
    e = np.where(mask, e, 0.0)
    p = e / e.sum(axis=-1, keepdims=True)
    out = _make(p, (logits,))

    def bw(g):
        if logits.requires_grad:
            dot = (g * p).sum(axis=-1, keepdims=True)
            logits.accumulate_grad(p * (g - dot))

    out._backward = bw
    return out


def layer_norm(a: Tensor, eps: float = LAYERNORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean, unit variance (no gain/bias).

    Constant rows map to 0 through the epsilon guard.
    """
    mu = a.data.mean(axis=-1, keepdims=True)
    var = a.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (a.data - mu) * inv
    out = _make(y, (a,))

    def bw(g):
        if a.requires_grad:
            gm = g.mean(axis=-1, keepdims=True)
            gym = (g * y).mean(axis=-1, keepdims=True)
            a.accumulate_grad(inv * (g - gm - y * gym))

    out._backward = bw
    return out


def dropout(a: Tensor, p: float, rng: np.random.Generator, train: bool) -> Tensor:
    """Inverted dropout; identity (and no RNG draw) when p == 0 or not training."""
    if not train or p == 0.0:
        return a
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    keep = (rng.random(a.data.shape) >= p) / (1.0 - p)
    out = _make(a.data * keep, (a,))

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(g * keep)

    out._backward = bw
    return out


def cosine_rows(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity over the last axis; a and b must share shape [.., d].

    The denominator is guarded at COSINE_GUARD, which only binds for
    zero vectors.
    """
    if a.data.shape != b.data.shape:
        raise ShapeError(f"cosine_rows shapes differ: {a.data.shape} vs {b.data.shape}")
    s = (a.data * b.data).sum(axis=-1)
    na = np.sqrt((a.data * a.data).sum(axis=-1))
    nb = np.sqrt((b.data * b.data).sum(axis=-1))
    denom = np.maximum(na * nb, COSINE_GUARD)
    c = s / denom
    out = _make(c, (a, b))

    def bw(g):
        ge = g[..., None]
        if a.requires_grad:
            a.accumulate_grad(ge * (b.data / denom[..., None] - c[..., None] * a.data / np.maximum(na * na, COSINE_GUARD)[..., None]))
        if b.requires_grad:
            b.accumulate_grad(ge * (a.data / denom[..., None] - c[..., None] * b.data / np.maximum(nb * nb, COSINE_GUARD)[..., None]))

    out._backward = bw
    return out


# ---------------------------------------------------------------------------
# backward pass and gradient checking


def _topo_order(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(node) into every reachable leaf grad buffer.

    loss must be scalar. Interior-node grads are recomputed per call;
    leaf grads (parameters) accumulate, so calling twice without a reset
    exactly doubles them. Parameters not on the graph keep their zeros.
    """
    if loss.data.shape != ():
        raise GraphError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    for node in order:
        if node._parents:
            node.grad = None
    loss.accumulate_grad(np.ones(()))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def finite_diff_check(
    loss_fn: Callable[[], Tensor],
    params: Iterable[Parameter],
    eps: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between analytic grads and central differences.

    loss_fn rebuilds the forward pass from the current parameter values.
    When max_coords is set, a seeded subsample of at least that many
    coordinates is checked instead of every coordinate.
    """
    if not 0.0 < eps <= 1e-2:
        raise ValueError(f"eps must be in (0, 1e-2], got {eps}")
    params = list(params)
    for p in params:
        p.tensor.zero_grad()
    loss = loss_fn()
    backward(loss)
    analytic = {p.name: p.grad.copy() for p in params}

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        n = flat.size
        coords = range(n)
        if max_coords is not None and n > max_coords:
            coords = rng.choice(n, size=max_coords, replace=False)
        ana = analytic[p.name].reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_fn().item()
            flat[i] = orig - eps
            down = loss_fn().item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * eps)
            err = abs(ana[i] - numeric) / max(abs(ana[i]), abs(numeric), 1e-8)
            if err > worst:
                worst = err
    return worst


def sinusoidal_positions(n: int, d: int) -> np.ndarray:
    """Fixed sine/cosine position table, shape [n, d]."""
    pos = np.arange(n, dtype=np.float64)[:, None]
    dim = np.arange(d, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * (dim // 2) / d)
    table = np.empty((n, d), dtype=np.float64)
    table[:, 0::2] = np.sin(angle[:, 0::2])
    table[:, 1::2] = np.cos(angle[:, 1::2])
    return table
