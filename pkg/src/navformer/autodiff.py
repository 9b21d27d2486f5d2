"""Dense f64 tensors with reverse-mode automatic differentiation.

Just enough machinery for a small transformer: 2-D matrix algebra,
row-wise softmax with masking, layer normalisation, embedding lookup and
the usual pointwise ops. Every operation records a backward closure on a
tape; ``backward(loss)`` walks the tape once in reverse topological order
and accumulates gradients additively into every tensor that requires them.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class MaskError(ValueError):
    """An attention mask leaves a query row with no admissible key."""


class VocabError(KeyError):
    """An embedding lookup index lies outside the table."""


class ContractError(RuntimeError):
    """An operation precondition was violated by the caller."""


class NumericFault(RuntimeError):
    """A non-finite value surfaced where finite math is required."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (forward-only rollouts)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """A dense double-precision array plus optional gradient state.

    ``data`` is always a C-contiguous float64 ndarray. ``grad`` stays None
    until a backward pass deposits something; repeated backward passes
    accumulate. Leaves with ``requires_grad=False`` never receive gradient.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], list]] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """A gradient-free leaf sharing this tensor's values."""
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _node(data: np.ndarray, parents: Sequence[Tensor],
          backward: Callable[[np.ndarray], list]) -> Tensor:
    """Wrap an op result, recording tape state only when gradients can flow."""
    out = Tensor.__new__(Tensor)
    out.data = data if data.dtype == np.float64 else data.astype(np.float64)
    out.grad = None
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast")

    def bw(g):
        out = []
        if a.requires_grad:
            out.append((a, _unbroadcast(g, a.data.shape)))
        if b.requires_grad:
            out.append((b, _unbroadcast(g, b.data.shape)))
        return out

    return _node(data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scale(as_tensor(b), -1.0))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")

    def bw(g):
        out = []
        if a.requires_grad:
            out.append((a, _unbroadcast(g * b.data, a.data.shape)))
        if b.requires_grad:
            out.append((b, _unbroadcast(g * a.data, b.data.shape)))
        return out

    return _node(data, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)

    def bw(g):
        return [(a, g * c)] if a.requires_grad else []

    return _node(a.data * c, (a,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    data = a.data @ b.data

    def bw(g):
        out = []
        if a.requires_grad:
            out.append((a, g @ b.data.T))
        if b.requires_grad:
            out.append((b, a.data.T @ g))
        return out

    return _node(data, (a, b), bw)


def transpose(a: Tensor) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected 2-D, got {a.shape}")

    def bw(g):
        return [(a, g.T)] if a.requires_grad else []

    return _node(np.ascontiguousarray(a.data.T), (a,), bw)


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    keep = a.data > 0.0

    def bw(g):
        return [(a, g * keep)] if a.requires_grad else []

    return _node(np.where(keep, a.data, 0.0), (a,), bw)


def tensor_sum(a: Tensor) -> Tensor:
    """Sum of all entries, as a 0-d tensor."""
    a = as_tensor(a)

    def bw(g):
        return [(a, np.broadcast_to(g, a.data.shape).copy())] if a.requires_grad else []

    return _node(np.asarray(a.data.sum()), (a,), bw)


def log_clamped(a: Tensor, floor: float = 1e-12) -> Tensor:
    """log(max(x, floor)); gradient is zero wherever the floor is active."""
    a = as_tensor(a)
    clipped = np.maximum(a.data, floor)
    above = a.data > floor

    def bw(g):
        return [(a, g * above / clipped)] if a.requires_grad else []

    return _node(np.log(clipped), (a,), bw)


def row_max(a: Tensor) -> Tensor:
    """Per-row maximum, shape [m, 1]; subgradient routes to the first argmax."""
    a = as_tensor(a)
    if a.data.ndim != 2 or a.data.shape[1] == 0:
        raise ShapeError(f"row_max: expected non-empty 2-D, got {a.shape}")
    idx = np.argmax(a.data, axis=1)
    data = a.data[np.arange(a.data.shape[0]), idx][:, None]

    def bw(g):
        if not a.requires_grad:
            return []
        ga = np.zeros_like(a.data)
        ga[np.arange(a.data.shape[0]), idx] = g[:, 0]
        return [(a, ga)]

    return _node(data, (a,), bw)


# ---------------------------------------------------------------------------
# structural ops


def _concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of zero tensors")
    for t in ts:
        if t.data.ndim != 2:
            raise ShapeError(f"concat: expected 2-D tensors, got {t.shape}")
    other = 1 - axis
    if len({t.data.shape[other] for t in ts}) != 1:
        raise ShapeError(
            f"concat axis={axis}: mismatched shapes {[t.shape for t in ts]}")
    data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        out = []
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                piece = g[lo:hi] if axis == 0 else g[:, lo:hi]
                out.append((t, piece.copy()))
        return out

    return _node(data, ts, bw)


def concat_rows(tensors: Sequence[Tensor]) -> Tensor:
    return _concat(tensors, axis=0)


def concat_cols(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenation along the last (feature) dimension."""
    return _concat(tensors, axis=1)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    if not (0 <= start <= stop <= a.data.shape[0]):
        raise ShapeError(f"slice_rows[{start}:{stop}] of shape {a.shape}")

    def bw(g):
        if not a.requires_grad:
            return []
        ga = np.zeros_like(a.data)
        ga[start:stop] = g
        return [(a, ga)]

    return _node(a.data[start:stop].copy(), (a,), bw)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2 or not (0 <= start <= stop <= a.data.shape[1]):
        raise ShapeError(f"slice_cols[{start}:{stop}] of shape {a.shape}")

    def bw(g):
        if not a.requires_grad:
            return []
        ga = np.zeros_like(a.data)
        ga[:, start:stop] = g
        return [(a, ga)]

    return _node(a.data[:, start:stop].copy(), (a,), bw)


def embedding_lookup(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Gather rows of ``table``; gradients scatter-add back onto the rows."""
    table = as_tensor(table)
    idx = np.asarray(list(ids), dtype=np.int64)
    if idx.ndim != 1 or idx.size == 0:
        raise ContractError("embedding_lookup: need a non-empty 1-D id sequence")
    vocab = table.data.shape[0]
    if idx.min() < 0 or idx.max() >= vocab:
        bad = int(idx[(idx < 0) | (idx >= vocab)][0])
        raise VocabError(f"embedding id {bad} outside table of {vocab} rows")

    def bw(g):
        if not table.requires_grad:
            return []
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return [(table, gt)]

    return _node(table.data[idx].copy(), (table,), bw)


def dropout(a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when rate is zero."""
    if rate <= 0.0:
        return a
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout rate {rate} outside [0, 1)")
    a = as_tensor(a)
    keep = (rng.random(a.data.shape) >= rate) / (1.0 - rate)

    def bw(g):
        return [(a, g * keep)] if a.requires_grad else []

    return _node(a.data * keep, (a,), bw)


# ---------------------------------------------------------------------------
# normalisation


def softmax_rows(x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """Row-wise softmax; masked entries get exactly zero weight.

    Stabilised by subtracting each row's maximum over the admissible
    entries. A row with no admissible entry is a caller error.
    """
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError(f"softmax_rows: expected 2-D, got {x.shape}")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.data.shape:
            raise ShapeError(
                f"softmax mask shape {mask.shape} != input shape {x.data.shape}")
        if not mask.any(axis=1).all():
            raise MaskError("softmax_rows: a row is fully masked")
        shifted = np.where(mask, x.data, -np.inf)
        shifted = shifted - shifted.max(axis=1, keepdims=True)
        e = np.where(mask, np.exp(shifted), 0.0)
    else:
        if x.data.shape[1] == 0:
            raise MaskError("softmax_rows: empty rows")
        shifted = x.data - x.data.max(axis=1, keepdims=True)
        e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        if not x.requires_grad:
            return []
        dot = (g * y).sum(axis=1, keepdims=True)
        return [(x, y * (g - dot))]

    return _node(y, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    """Per-row normalisation to zero mean / unit variance, then affine."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if x.data.ndim != 2:
        raise ShapeError(f"layer_norm: expected 2-D, got {x.shape}")
    n = x.data.shape[1]
    if gain.data.shape != (n,) or bias.data.shape != (n,):
        raise ShapeError(
            f"layer_norm: gain/bias shapes {gain.shape}/{bias.shape} "
            f"do not match feature dim {n}")
    mean = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv
    data = xhat * gain.data + bias.data

    def bw(g):
        out = []
        if gain.requires_grad:
            out.append((gain, (g * xhat).sum(axis=0)))
        if bias.requires_grad:
            out.append((bias, g.sum(axis=0)))
        if x.requires_grad:
            dxhat = g * gain.data
            m1 = dxhat.mean(axis=1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
            out.append((x, inv * (dxhat - m1 - xhat * m2)))
        return out

    return _node(data, (x, gain, bias), bw)


# ---------------------------------------------------------------------------
# backward engine


def _toposort(root: Tensor) -> list:
    """Children-after-parents ordering of the tape reachable from ``root``."""
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor on the tape."""
    if loss.data.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward: loss does not require gradients")
    order = _toposort(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.grad is None:
            node.grad = g.copy()
        else:
            node.grad = node.grad + g
        if node._backward is None:
            continue
        for parent, pg in node._backward(g):
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# parameter construction

def uniform_init(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    """Uniform [-r, r] with r = sqrt(6 / (fan_in + fan_out)); trainable."""
    r = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-r, r, size=(fan_in, fan_out)), requires_grad=True)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=requires_grad)
