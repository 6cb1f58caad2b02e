"""Dense float64 tensors with tape-based reverse-mode autodiff.

Everything is numpy under the hood. Operations executed while a Tape is
active (and touching at least one requires_grad tensor) are recorded in
execution order; Tape.gradients walks the record once, in reverse, and
returns a gradient map. A tape is consumed by its backward pass.

The active tape is thread-local: one forward/backward pair per thread.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class TapeConsumedError(RuntimeError):
    """backward() was called on a tape that already ran its backward pass."""


class NonFiniteError(FloatingPointError):
    """A value that must be finite is inf or nan."""


class Tensor:
    """A dense float64 array, optionally tracked for gradients.

    Tensors are immutable once created; the only sanctioned mutation is an
    optimizer updating ``.data`` in place between forward passes.
    """

    __slots__ = ("data", "requires_grad", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = requires_grad
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def copy(self, requires_grad: bool | None = None) -> "Tensor":
        rg = self.requires_grad if requires_grad is None else requires_grad
        return Tensor(self.data.copy(), requires_grad=rg)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; all routed through the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, scalar):
        return mul(self, 1.0 / float(scalar))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, axes=None):
        return transpose(self, axes)


class _Node:
    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


_STATE = threading.local()


def _active_tape() -> "Tape | None":
    return getattr(_STATE, "tape", None)


class Tape:
    """Execution record for one forward pass; consumed by one backward pass."""

    def __init__(self):
        self._nodes: list[_Node] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        if _active_tape() is not None:
            raise RuntimeError("a tape is already active on this thread")
        _STATE.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _STATE.tape = None
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    def gradients(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Reverse sweep from ``loss``; returns grads for every requires_grad
        tensor that influenced it. Marks the tape consumed."""
        if self._consumed:
            raise TapeConsumedError("tape already consumed by a backward pass")
        self._consumed = True
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[Tensor, np.ndarray] = {loss: np.ones_like(loss.data)}
        for node in reversed(self._nodes):
            g_out = grads.get(node.out)
            if g_out is None:
                continue
            for inp, g_in in zip(node.inputs, node.backward_fn(g_out)):
                if g_in is None or not inp.requires_grad:
                    continue
                existing = grads.get(inp)
                if existing is None:
                    grads[inp] = g_in
                else:
                    grads[inp] = existing + g_in
        return grads


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Gradient map of a scalar loss produced under an active tape."""
    tape = loss._tape
    if tape is None:
        raise RuntimeError("loss was not produced under an active tape")
    return tape.gradients(loss)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(out_data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    """Wrap a forward result, recording it when a tape is live and needed."""
    out = Tensor(out_data)
    out.requires_grad = any(t.requires_grad for t in inputs)
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        out._tape = tape
        tape._nodes.append(_Node(out, inputs, backward_fn))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum grad over axes that were broadcast to reach its shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if keep:
        grad = grad.sum(axis=keep, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data
    need_a, need_b = a.requires_grad, b.requires_grad

    def bw(g):
        return (
            _unbroadcast(g, a.shape) if need_a else None,
            _unbroadcast(g, b.shape) if need_b else None,
        )

    return _emit(out, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data
    need_a, need_b = a.requires_grad, b.requires_grad

    def bw(g):
        return (
            _unbroadcast(g * b.data, a.shape) if need_a else None,
            _unbroadcast(g * a.data, b.shape) if need_b else None,
        )

    return _emit(out, (a, b), bw)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _emit(-a.data, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = _as_tensor(a)
    p = float(exponent)
    out = a.data**p

    def bw(g):
        return (g * p * a.data ** (p - 1.0),)

    return _emit(out, (a,), bw)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _emit(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    return _emit(np.log(a.data), (a,), lambda g: (g / a.data,))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = 1.0 / (1.0 + np.exp(-a.data))
    return _emit(out, (a,), lambda g: (g * out * (1.0 - out),))


def silu(a) -> Tensor:
    """x * sigmoid(x), the gated-FFN activation."""
    a = _as_tensor(a)
    sig = 1.0 / (1.0 + np.exp(-a.data))
    out = a.data * sig

    def bw(g):
        return (g * sig * (1.0 + a.data * (1.0 - sig)),)

    return _emit(out, (a,), bw)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit(out, (a,), bw)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.data.size if axis is None else np.prod(
        [a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape) / n,)

    return _emit(out, (a,), bw)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = a.data.reshape(shape)
    return _emit(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    out = np.transpose(a.data, axes)
    if axes is None:
        inv = None
    else:
        inv = np.argsort(axes)
    return _emit(np.ascontiguousarray(out), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a, key) -> Tensor:
    """Basic (slice/int) indexing with scatter-style backward."""
    a = _as_tensor(a)
    out = a.data[key]

    def bw(g):
        gx = np.zeros(a.shape)
        gx[key] += g
        return (gx,)

    return _emit(np.ascontiguousarray(out), (a,), bw)


def concat(tensors: Sequence["Tensor"], axis: int = 0) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        pieces = []
        for i in range(len(tensors)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            pieces.append(g[tuple(sl)])
        return tuple(pieces)

    return _emit(out, tensors, bw)


def take(a, indices, axis: int) -> Tensor:
    """Gather along ``axis`` by integer indices (repeats allowed)."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    out = np.take(a.data, idx, axis=axis)

    def bw(g):
        gx = np.zeros(a.shape)
        np.add.at(np.moveaxis(gx, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (gx,)

    return _emit(out, (a,), bw)


def gather_rows(table, ids) -> Tensor:
    """table[V, d] indexed by an integer id array; embedding lookup."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(
            f"id out of range: [{ids.min()}, {ids.max()}] vs table rows {table.shape[0]}"
        )
    out = table.data[ids]

    def bw(g):
        gt = np.zeros(table.shape)
        np.add.at(gt, ids, g)
        return (gt,)

    return _emit(out, (table,), bw)


# ---------------------------------------------------------------------------
# linear algebra and fused network ops
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree for {a.shape} @ {b.shape}")
    out = a.data @ b.data
    need_a, need_b = a.requires_grad, b.requires_grad

    if a.data.ndim > 2 and b.data.ndim == 2:
        # projection case: collapse the batch dims into plain GEMMs
        k = a.shape[-1]

        def bw(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ b.data.T).reshape(a.shape) if need_a else None
            gb = a.data.reshape(-1, k).T @ g2 if need_b else None
            return ga, gb

    else:

        def bw(g):
            ga = (
                _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
                if need_a
                else None
            )
            gb = (
                _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
                if need_b
                else None
            )
            return ga, gb

    return _emit(out, (a, b), bw)


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _emit(out, (a,), bw)


def rms_normalize(a, eps: float = 1e-6) -> Tensor:
    """Scale rows (last axis) to unit RMS; multiply by a learned scale outside."""
    a = _as_tensor(a)
    n = a.shape[-1]
    ms = (a.data * a.data).mean(axis=-1, keepdims=True) + eps
    s = ms**-0.5
    out = a.data * s

    def bw(g):
        xg = (a.data * g).sum(axis=-1, keepdims=True)
        return (s * (g - a.data * (xg * s * s / n)),)

    return _emit(out, (a,), bw)


def softmax_cross_entropy(logits, targets) -> Tensor:
    """Mean over rows of -log softmax(logits)[target]; max-stabilized.

    logits: [N, V]; targets: integer ids [N].
    """
    logits = _as_tensor(logits)
    tgt = np.asarray(targets, dtype=np.intp).reshape(-1)
    n, v = logits.shape
    if tgt.shape[0] != n:
        raise ShapeError(f"targets length {tgt.shape[0]} != logits rows {n}")
    if tgt.size and (tgt.min() < 0 or tgt.max() >= v):
        raise IndexError(f"target id out of range for vocab {v}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    out = np.asarray((lse - z[np.arange(n), tgt]).mean())

    def bw(g):
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(n), tgt] -= 1.0
        return (p * (g / n),)

    return _emit(out, (logits,), bw)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    point: Tensor,
    h: float = 1e-5,
    eps: float = 1e-6,
) -> float:
    """Max over coordinates of |analytic - central difference| / (|cd| + eps).

    ``f`` maps a tensor to a scalar Tensor. The analytic gradient comes from
    the tape; the central differences are plain re-evaluations of ``f``.
    ``eps`` floors the denominator so coordinates with a near-zero true
    derivative are judged on absolute error at that scale.
    """
    x = Tensor(point.data.copy(), requires_grad=True)
    with Tape() as tape:
        loss = f(x)
    if not np.isfinite(loss.data).all():
        raise NonFiniteError("f(point) is not finite")
    analytic = tape.gradients(loss).get(x)
    if analytic is None:
        analytic = np.zeros(x.shape)

    flat = x.data.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = float(f(Tensor(x.data)).data)
        flat[i] = orig - h
        lo = float(f(Tensor(x.data)).data)
        flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NonFiniteError(f"f not finite near coordinate {i}")
        cd = (hi - lo) / (2.0 * h)
        err = abs(analytic.reshape(-1)[i] - cd) / (abs(cd) + eps)
        worst = max(worst, err)
    return worst
