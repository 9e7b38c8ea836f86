"""Dense float64 tensors with tape-based reverse-mode differentiation.

Values are numpy float64 arrays. Differentiable ops append one node to the
active :class:`Tape`; ``backward`` replays the nodes in exact reverse append
order, accumulating gradients additively across fan-out. A fresh tape is
built per forward pass and dropped after the optimizer step; evaluating
without an active tape computes values only.

Exactly one broadcast rule is supported for binary elementwise ops: the
second operand may be a 1-D vector matching the first operand's last
dimension (a bias over rows). Anything else must be reshaped explicitly.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes violate an op's shape contract."""


class ContractError(ValueError):
    """A non-shape precondition of an op was violated."""


class MaskError(ValueError):
    """A mask admits no entries where at least one is required."""


class Tensor:
    """A dense float64 value node, optionally tracked on the active tape."""

    __slots__ = ("data", "requires_grad", "grad", "node_id")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 0 and min(arr.shape) < 1:
            raise DimensionError(f"tensor dimensions must be >= 1, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node_id: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def reset_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    def _accumulate(self, g) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def _accumulate_slice(self, index, g) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad[index] += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar over the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Append-only record of differentiable ops, replayed in reverse.

    Usable as a context manager; nesting pushes a fresh innermost tape.
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, out: Tensor, backward_fn: Callable[[np.ndarray], None]) -> None:
        out.node_id = len(self._nodes)
        self._nodes.append((out, backward_fn))

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _TAPE_STACK.pop()


_TAPE_STACK: list[Tape] = []


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _track(data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data, requires_grad=any(t.requires_grad for t in inputs))
    tape = active_tape()
    if tape is not None and out.requires_grad:
        tape.record(out, backward_fn)
    return out


def backward(loss: Tensor) -> None:
    """Populate grads of every requires_grad tensor reachable from ``loss``."""
    if loss.data.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    tape = active_tape()
    if tape is None:
        raise ContractError("backward requires an active tape")
    if loss.node_id is None:
        raise ContractError("loss was not produced on the current tape")
    loss.grad = np.ones_like(loss.data)
    for out, backward_fn in reversed(tape._nodes):
        if out.grad is not None:
            backward_fn(out.grad)


# ---------------------------------------------------------------------------
# binary elementwise ops


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _binary_mode(a: Tensor, b: Tensor) -> str:
    if a.data.shape == b.data.shape:
        return "same"
    if b.data.ndim == 1 and a.data.ndim >= 2 and a.data.shape[-1] == b.data.shape[0]:
        return "trail"
    raise DimensionError(
        f"shapes {a.shape} and {b.shape} are neither identical nor "
        "trailing-vector broadcastable"
    )


def _reduce_trail(g: np.ndarray, n: int) -> np.ndarray:
    return g.reshape(-1, n).sum(axis=0)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    mode = _binary_mode(a, b)

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g if mode == "same" else _reduce_trail(g, b.data.shape[0]))

    return _track(a.data + b.data, (a, b), backward_fn)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    mode = _binary_mode(a, b)

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(-g if mode == "same" else -_reduce_trail(g, b.data.shape[0]))

    return _track(a.data - b.data, (a, b), backward_fn)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    mode = _binary_mode(a, b)
    ad, bd = a.data, b.data

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(g * bd)
        if b.requires_grad:
            gb = g * ad
            b._accumulate(gb if mode == "same" else _reduce_trail(gb, bd.shape[0]))

    return _track(ad * bd, (a, b), backward_fn)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    mode = _binary_mode(a, b)
    ad, bd = a.data, b.data

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(g / bd)
        if b.requires_grad:
            gb = -g * ad / (bd * bd)
            b._accumulate(gb if mode == "same" else _reduce_trail(gb, bd.shape[0]))

    return _track(ad / bd, (a, b), backward_fn)


# ---------------------------------------------------------------------------
# unary ops


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    xd = x.data
    s = np.empty_like(xd)
    pos = xd >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    s[~pos] = ex / (1.0 + ex)

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(g * s * (1.0 - s))

    return _track(s, (x,), backward_fn)


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    t = np.tanh(x.data)

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(g * (1.0 - t * t))

    return _track(t, (x,), backward_fn)


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(g * mask)

    return _track(np.where(mask, x.data, 0.0), (x,), backward_fn)


def log(x) -> Tensor:
    x = _as_tensor(x)
    xd = x.data

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(g / xd)

    return _track(np.log(xd), (x,), backward_fn)


def sqrt(x) -> Tensor:
    x = _as_tensor(x)
    r = np.sqrt(x.data)

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(g * 0.5 / r)

    return _track(r, (x,), backward_fn)


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient is zero on clamped cells."""
    x = _as_tensor(x)
    inside = (x.data > lo) & (x.data < hi)

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(g * inside)

    return _track(np.clip(x.data, lo, hi), (x,), backward_fn)


def scale(x, c: float) -> Tensor:
    """Multiply by a Python float constant."""
    x = _as_tensor(x)
    c = float(c)

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(g * c)

    return _track(x.data * c, (x,), backward_fn)


def shift(x, c: float) -> Tensor:
    """Add a Python float constant."""
    x = _as_tensor(x)

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(g)

    return _track(x.data + float(c), (x,), backward_fn)


# ---------------------------------------------------------------------------
# linear algebra and structure ops


def matmul(a, b) -> Tensor:
    """Matrix product on the last two axes.

    Either both operands carry identical leading (batch) dimensions, or the
    second operand is a plain 2-D matrix shared across the first operand's
    leading dimensions (its gradient then sums over them).
    """
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise DimensionError(f"matmul needs >=2-D operands, got {a.shape} x {b.shape}")
    if ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    if bd.ndim != 2 and ad.shape[:-2] != bd.shape[:-2]:
        raise DimensionError(f"matmul leading dimensions disagree: {a.shape} x {b.shape}")

    def backward_fn(g):
        if a.requires_grad:
            a._accumulate(np.matmul(g, np.swapaxes(bd, -1, -2)))
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                k, n = ad.shape[-1], g.shape[-1]
                b._accumulate(ad.reshape(-1, k).T @ g.reshape(-1, n))
            else:
                b._accumulate(np.matmul(np.swapaxes(ad, -1, -2), g))

    return _track(np.matmul(ad, bd), (a, b), backward_fn)


def softmax_masked(logits, mask) -> Tensor:
    """Row softmax over the last axis restricted to mask-true entries.

    Masked positions get exactly zero probability. Stabilized by subtracting
    the row max over unmasked entries. A fully masked row is a hard error,
    never a NaN.
    """
    logits = _as_tensor(logits)
    m = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=bool)
    if m.shape != logits.data.shape:
        raise DimensionError(f"mask shape {m.shape} != logits shape {logits.shape}")
    dead = ~m.any(axis=-1)
    if dead.any():
        where = tuple(np.argwhere(dead)[0])
        raise MaskError(f"softmax_masked: fully masked row at index {where}")
    xd = logits.data
    mx = np.max(np.where(m, xd, -np.inf), axis=-1, keepdims=True)
    e = np.exp(np.where(m, xd - mx, 0.0)) * m
    p = e / e.sum(axis=-1, keepdims=True)

    def backward_fn(g):
        if logits.requires_grad:
            inner = (g * p).sum(axis=-1, keepdims=True)
            logits._accumulate(p * (g - inner))

    return _track(p, (logits,), backward_fn)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    """Concatenate along ``axis``; backward splits the gradient back."""
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ContractError("concat requires at least one tensor")
    ref = parts[0].data.shape
    for p in parts[1:]:
        s = p.data.shape
        if len(s) != len(ref) or any(
            s[i] != ref[i] for i in range(len(ref)) if i != axis % len(ref)
        ):
            raise DimensionError(f"concat side dimensions disagree: {ref} vs {s}")
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(lo, hi)
                p._accumulate(g[tuple(index)])

    return _track(np.concatenate([p.data for p in parts], axis=axis), parts, backward_fn)


def gather_rows(table: Tensor, ids) -> Tensor:
    """Look up rows of a 2-D table by integer ids of any shape."""
    table = _as_tensor(table)
    idx = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2:
        raise DimensionError(f"gather_rows table must be 2-D, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        bad = idx.min() if idx.min() < 0 else idx.max()
        raise IndexError(f"id {int(bad)} out of range for table with {table.data.shape[0]} rows")

    def backward_fn(g):
        if table.requires_grad:
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, idx, g)

    return _track(table.data[idx], (table,), backward_fn)


def select_last(x: Tensor, ids) -> Tensor:
    """Pick one entry along the last axis per leading position."""
    x = _as_tensor(x)
    idx = np.asarray(ids, dtype=np.int64)
    if idx.shape != x.data.shape[:-1]:
        raise DimensionError(f"ids shape {idx.shape} != leading shape of {x.shape}")
    c = x.data.shape[-1]
    if idx.size and (idx.min() < 0 or idx.max() >= c):
        raise IndexError(f"index out of range for last axis of size {c}")
    out = np.take_along_axis(x.data, idx[..., None], axis=-1)[..., 0]

    def backward_fn(g):
        if x.requires_grad:
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            flat = x.grad.reshape(-1, c)
            rows = np.arange(flat.shape[0])
            np.add.at(flat, (rows, idx.reshape(-1)), g.reshape(-1))

    return _track(out, (x,), backward_fn)


def reshape(x: Tensor, shape) -> Tensor:
    x = _as_tensor(x)
    src = x.data.shape

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(g.reshape(src))

    return _track(x.data.reshape(shape), (x,), backward_fn)


def transpose(x: Tensor, axes) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(np.transpose(g, inverse))

    return _track(np.transpose(x.data, axes), (x,), backward_fn)


def take_step(x: Tensor, index: int, axis: int) -> Tensor:
    """Slice out one index along ``axis``, removing that axis."""
    x = _as_tensor(x)
    sl = [slice(None)] * x.data.ndim
    sl[axis] = index
    sl = tuple(sl)

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate_slice(sl, g)

    return _track(np.ascontiguousarray(x.data[sl]), (x,), backward_fn)


def broadcast_last(x: Tensor, n: int) -> Tensor:
    """Tile a trailing singleton axis out to ``n``; backward sums it back."""
    x = _as_tensor(x)
    if x.data.shape[-1] != 1:
        raise DimensionError(f"broadcast_last needs trailing dim 1, got {x.shape}")

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(g.sum(axis=-1, keepdims=True))

    out = np.ascontiguousarray(np.broadcast_to(x.data, x.data.shape[:-1] + (n,)))
    return _track(out, (x,), backward_fn)


def mean_last(x: Tensor) -> Tensor:
    """Mean over the last axis, keeping it as a singleton."""
    x = _as_tensor(x)
    d = x.data.shape[-1]

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(np.broadcast_to(g / d, x.data.shape))

    return _track(x.data.mean(axis=-1, keepdims=True), (x,), backward_fn)


def sum_all(x: Tensor) -> Tensor:
    """Sum every element into a scalar."""
    x = _as_tensor(x)

    def backward_fn(g):
        if x.requires_grad:
            x._accumulate(np.broadcast_to(g, x.data.shape))

    return _track(np.asarray(x.data.sum()), (x,), backward_fn)


# ---------------------------------------------------------------------------
# gradient verification


def grad_check(f: Callable[[Tensor], Tensor], point: Tensor, h: float = 1e-5) -> float:
    """Max relative error of analytic vs central-difference gradients of ``f``.

    ``f`` must be scalar-valued and deterministic. The relative error per
    coordinate is |analytic - numeric| / max(1, |analytic|); NaNs in ``f``
    propagate into the result.
    """
    x = Tensor(np.array(point.data, dtype=np.float64, copy=True), requires_grad=True)
    with Tape():
        out = f(x)
        backward(out)
    analytic = x.grad if x.grad is not None else np.zeros_like(x.data)

    base = x.data.copy()
    numeric = np.zeros_like(base)
    flat = numeric.reshape(-1)
    for i in range(base.size):
        flat[i] = (_probe(f, base, i, h) - _probe(f, base, i, -h)) / (2.0 * h)
    rel = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(rel.max()) if rel.size else 0.0


def _probe(f, base: np.ndarray, i: int, delta: float) -> float:
    shifted = base.copy()
    shifted.reshape(-1)[i] += delta
    return float(f(Tensor(shifted)).data)
