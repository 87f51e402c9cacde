"""Dense tensors with tape-based reverse-mode differentiation.

Every op takes and returns :class:`Tensor` objects backed by numpy arrays.
When at least one input requires a gradient (and recording is enabled), the
op attaches a :class:`TapeNode` to its output holding the inputs and a
closure that maps the output cotangent to input cotangents. :func:`backward`
walks those nodes in reverse topological order.

Shapes are explicit. Elementwise binary ops require identical shapes except
for a Python scalar or a 0-d tensor operand; anything else goes through
:func:`broadcast_to`.
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

_serial = itertools.count()
_state = threading.local()


class NumericError(FloatingPointError):
    """A forward op produced NaN or Inf from finite inputs."""


class ShapeError(ValueError):
    pass


class InvalidMaskError(ValueError):
    pass


class InvalidLossError(ValueError):
    pass


def _recording() -> bool:
    return getattr(_state, "recording", True)


def _finite_checks() -> bool:
    return getattr(_state, "finite_checks", True)


@contextmanager
def no_grad():
    """Disable tape recording on the current thread."""
    prev = _recording()
    _state.recording = False
    try:
        yield
    finally:
        _state.recording = prev


@contextmanager
def finite_checks(enabled: bool):
    prev = _finite_checks()
    _state.finite_checks = enabled
    try:
        yield
    finally:
        _state.finite_checks = prev


@dataclass(eq=False)
class TapeNode:
    op: str
    inputs: tuple
    backward: Optional[Callable[[np.ndarray], tuple]]
    serial: int = field(default_factory=lambda: next(_serial))


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: TapeNode | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        op = f" op={self.node.op}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}{tag}{op}, requires_grad={self.requires_grad})"

    __array_priority__ = 1000

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, op: str, inputs: Sequence[Tensor], backward) -> Tensor:
    if _finite_checks() and data.dtype.kind == "f" and not np.isfinite(data).all():
        if all(np.isfinite(t.data).all() for t in inputs):
            raise NumericError(f"non-finite output from {op}")
    out = Tensor(data)
    if _recording() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = TapeNode(op, tuple(inputs), backward)
    return out


def _is_scalar(x) -> bool:
    return not isinstance(x, Tensor) or x.ndim == 0


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def _binary_operands(a, b, op: str):
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        if a.shape != b.shape and a.ndim and b.ndim:
            raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ; use broadcast_to")
        return a, b
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    return a, b


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "add")

    def bw(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _make(a.data + b.data, "add", (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "sub")

    def bw(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return _make(a.data - b.data, "sub", (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b, "mul")

    def bw(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return _make(a.data * b.data, "mul", (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, "neg", (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a constant (no gradient w.r.t. ``c``)."""
    return _make(a.data * c, "scale", (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0.0).astype(a.dtype), "relu", (a,), lambda g: (g * pos,))


def dropout(a: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rate == 0`` or ``rng is None``."""
    if rate <= 0.0 or rng is None:
        return a
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    keep = keep.astype(a.dtype)
    return _make(a.data * keep, "dropout", (a,), lambda g: (g * keep,))


def stop_gradient(a: Tensor) -> Tensor:
    """Same values, no path back to ``a``."""
    out = Tensor(a.data)
    out.node = TapeNode("stop_gradient", (), None)
    return out


# -------------------------------------------------------------- reductions


def sum_(a: Tensor) -> Tensor:
    return _make(np.asarray(a.data.sum()), "sum", (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean(a: Tensor) -> Tensor:
    n = a.size
    return _make(np.asarray(a.data.mean()), "mean", (a,), lambda g: (np.full(a.shape, g / n, dtype=a.dtype),))


# ------------------------------------------------------------------ shapes


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _make(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), "transpose", (a,), lambda g: (g.transpose(inv),))


def broadcast_to(a: Tensor, shape) -> Tensor:
    """Explicit broadcast following numpy rules; backward sums the expanded axes."""
    shape = tuple(shape)
    lead = len(shape) - a.ndim
    expanded = tuple(i + lead for i, n in enumerate(a.shape) if n == 1 and shape[i + lead] != 1)

    def bw(g):
        g = g.sum(axis=tuple(range(lead)) + expanded, keepdims=True)
        return (g.reshape(a.shape),)

    return _make(np.broadcast_to(a.data, shape), "broadcast_to", (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return _make(np.concatenate([t.data for t in tensors], axis=axis), "concat", tensors, bw)


def slice_(a: Tensor, index) -> Tensor:
    """Basic (view) indexing: ints, slices, Ellipsis, None."""
    items = index if isinstance(index, tuple) else (index,)
    for it in items:
        if not (it is None or it is Ellipsis or isinstance(it, (int, np.integer, slice))):
            raise TypeError("slice_ supports basic indexing only; use gather ops for arrays")

    def bw(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return _make(a.data[index], "slice", (a,), bw)


def embedding(table: Tensor, ids) -> Tensor:
    """Row gather ``table[ids]`` with scatter-add backward."""
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise TypeError("token ids must be integers")
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"token id out of range [0, {n})")

    def bw(g):
        full = np.zeros(table.shape, dtype=g.dtype)
        np.add.at(full, ids, g)
        return (full,)

    return _make(table.data[ids], "embedding", (table,), bw)


def gather_last(a: Tensor, index: np.ndarray, valid: np.ndarray) -> Tensor:
    """``out[..., k] = a[..., index[..., k]]`` where ``valid``, else exactly 0.

    ``index`` and ``valid`` broadcast against the output shape, which is
    ``a.shape[:-1] + index.shape[-1:]``. Invalid indices may hold anything in
    range; they are neither read into the output nor written in backward.
    """
    out_shape = a.shape[:-1] + index.shape[-1:]
    idx = np.broadcast_to(index, out_shape)
    ok = np.broadcast_to(valid, out_shape)
    picked = np.take_along_axis(a.data, idx, axis=-1)
    data = np.where(ok, picked, 0.0).astype(a.dtype)
    n_in = a.shape[-1]

    def bw(g):
        rows = int(np.prod(out_shape[:-1], dtype=np.int64))
        base = (np.arange(rows, dtype=np.int64) * n_in)[:, None]
        flat = (base + idx.reshape(rows, -1)).ravel()
        w = np.where(ok, g, 0.0).ravel()
        full = np.bincount(flat, weights=w, minlength=rows * n_in)
        return (full.reshape(a.shape).astype(g.dtype),)

    return _make(data, "gather_last", (a,), bw)


# ------------------------------------------------------------------ linalg


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    Leading (batch) axes must match exactly, except that a 2-d ``b`` is
    shared across all of ``a``'s batch axes (a weight matrix).
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs at least 2-d operands")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions {a.shape} @ {b.shape} disagree")
    shared = b.ndim == 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch axes {a.shape[:-2]} and {b.shape[:-2]} differ")

    def bw(g):
        da = g @ np.swapaxes(b.data, -1, -2)
        if shared:
            k, n = b.shape
            db = a.data.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            db = np.swapaxes(a.data, -1, -2) @ g
        return da, db

    return _make(a.data @ b.data, "matmul", (a, b), bw)


# ---------------------------------------------------------- nn primitives


def masked_softmax(scores: Tensor, mask: np.ndarray) -> Tensor:
    """Softmax over the last axis restricted to ``mask == True`` entries.

    ``mask`` is a constant boolean array broadcastable to ``scores``.
    Masked entries come out exactly 0.
    """
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), scores.shape)
    if not mask.any(axis=-1).all():
        raise InvalidMaskError("masked_softmax: a row has no unmasked entry")
    x = np.where(mask, scores.data, -np.inf)
    x = x - x.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(x), 0.0)
    p = (e / e.sum(axis=-1, keepdims=True)).astype(scores.dtype)

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, "masked_softmax", (scores,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        lead = tuple(range(x.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        dxhat = g * gain.data
        dx = inv / d * (
            d * dxhat
            - dxhat.sum(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
        )
        return dx, dgain, dbias

    return _make(xhat * gain.data + bias.data, "layer_norm", (x, gain, bias), bw)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def token_nll(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Per-position negative log-likelihood in nats (no tape)."""
    lp = log_softmax(np.asarray(logits))
    return -np.take_along_axis(lp, np.asarray(targets)[..., None], axis=-1)[..., 0]


def cross_entropy(logits: Tensor, targets, active=None) -> Tensor:
    """Mean nll (nats) over active positions.

    ``logits`` is ``[..., V]``; ``targets`` and ``active`` are ``[...]``.
    """
    targets = np.asarray(targets)
    V = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"cross_entropy: targets {targets.shape} vs logits {logits.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= V):
        raise IndexError(f"target id out of range [0, {V})")
    active = np.ones(targets.shape, bool) if active is None else np.broadcast_to(np.asarray(active, bool), targets.shape)
    n = int(active.sum())
    if n == 0:
        raise InvalidLossError("cross_entropy: no active positions")
    lp = log_softmax(logits.data)
    nll = -np.take_along_axis(lp, targets[..., None], axis=-1)[..., 0]
    loss = np.asarray(np.where(active, nll, 0.0).sum() / n, dtype=logits.dtype)

    def bw(g):
        grad = np.exp(lp)
        np.put_along_axis(grad, targets[..., None], np.take_along_axis(grad, targets[..., None], -1) - 1.0, -1)
        return (grad * (active[..., None] * (g / n)),)

    return _make(loss, "cross_entropy", (logits,), bw)


# ---------------------------------------------------------------- backward


def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        t, done = stack.pop()
        if done:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for inp in t.node.inputs:
                if inp.requires_grad and id(inp) not in seen:
                    stack.append((inp, False))
    return order


def tape_nodes(root: Tensor) -> list[TapeNode]:
    """All recorded nodes reachable from ``root`` through gradient paths."""
    return [t.node for t in _topo_order(root) if t.node is not None]


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.size != 1 or loss.ndim != 0:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype)}
    for t in reversed(_topo_order(loss)):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for inp, gi in zip(t.node.inputs, t.node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            grads[key] = gi if key not in grads else grads[key] + gi
