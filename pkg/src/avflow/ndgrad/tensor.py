"""Dense tensors with a dynamic reverse-mode tape.

Every op builds a node holding its parents and a closure that maps the
output gradient to parent gradients.  ``backward`` sorts the graph
topologically and walks it in reverse exactly once.

Broadcasting is restricted to *leading-batch* broadcasting: the shape of the
smaller operand must equal the trailing dimensions of the larger one, e.g.
``(d,)`` with ``(B, n, d)`` or ``(n, W)`` with ``(B, H, n, W)``.
"""

from __future__ import annotations

import contextlib
import warnings
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "NdgradError", "ShapeMismatch", "NonFinite", "NotScalar",
    "DisconnectedParameter", "tensor", "constant", "precision", "no_grad",
    "finite_checks", "get_dtype", "backward",
    "add", "sub", "mul", "neg", "matmul", "concat", "slice", "reshape",
    "transpose", "softmax", "layernorm", "gelu", "sigmoid", "exp", "log",
    "mean", "sum", "l1_loss", "l2_loss", "take", "embedding", "rotary",
    "band_scores", "band_mix",
]


class NdgradError(Exception):
    pass


class ShapeMismatch(NdgradError, ValueError):
    pass


class NonFinite(NdgradError, FloatingPointError):
    pass


class NotScalar(NdgradError, ValueError):
    pass


class DisconnectedParameter(UserWarning):
    """A requested parameter is unreachable from the loss; its gradient is zero."""


_DTYPE = np.float32
_GRAD_ENABLED = True
_CHECK_FINITE = True


def get_dtype():
    return _DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the storage dtype of newly created tensors."""
    global _DTYPE
    old, _DTYPE = _DTYPE, np.dtype(dtype).type
    try:
        yield
    finally:
        _DTYPE = old


@contextlib.contextmanager
def no_grad():
    """Run ops without recording a tape (inference)."""
    global _GRAD_ENABLED
    old, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


@contextlib.contextmanager
def finite_checks(enabled: bool):
    global _CHECK_FINITE
    old, _CHECK_FINITE = _CHECK_FINITE, enabled
    try:
        yield
    finally:
        _CHECK_FINITE = old


class Tensor:
    """An immutable array plus the graph node that produced it."""

    __slots__ = ("data", "requires_grad", "grad", "name", "op", "parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype != _DTYPE:
            arr = arr.astype(_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self.op = None
        self.parents: tuple = ()
        self._backward = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def constant(data) -> Tensor:
    return Tensor(data)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op: str, data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    if _CHECK_FINITE and not np.isfinite(data).all():
        raise NonFinite(f"{op} produced a non-finite value")
    out = Tensor.__new__(Tensor)
    out.data = data if data.dtype == _DTYPE else data.astype(_DTYPE)
    out.grad = None
    out.name = None
    out.op = op
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out.parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.parents = ()
        out._backward = None
    return out


# ---------------------------------------------------------------- broadcasting

def _check_suffix(a: tuple, b: tuple, op: str) -> tuple:
    if a == b:
        return a
    long, short = (a, b) if len(a) >= len(b) else (b, a)
    if len(short) and long[len(long) - len(short):] != short:
        raise ShapeMismatch(f"{op}: shapes {a} and {b} are not leading-batch compatible")
    if len(a) == len(b):
        raise ShapeMismatch(f"{op}: shapes {a} and {b} differ")
    return long


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_suffix(a.shape, b.shape, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_suffix(a.shape, b.shape, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _make("sub", a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_suffix(a.shape, b.shape, "mul")

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make("mul", a.data * b.data, (a, b), bw)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NonFinite("log of a non-positive value")
    x = a.data
    return _make("log", np.log(x), (a,), lambda g: (g / x,))


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))
    return _make("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(a: Tensor) -> Tensor:
    """Tanh approximation of GELU."""
    x = a.data
    x2 = x * x
    th = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + th)

    def bw(g):
        dinner = _GELU_C * (1.0 + 0.134145 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th ** 2) * dinner),)

    return _make("gelu", out, (a,), bw)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch(f"matmul needs rank >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: inner dims differ in {a.shape} @ {b.shape}")
    lead_a, lead_b = a.shape[:-2], b.shape[:-2]
    if lead_a != lead_b:
        long, short = (lead_a, lead_b) if len(lead_a) >= len(lead_b) else (lead_b, lead_a)
        if len(long) == len(short) or (short and long[len(long) - len(short):] != short):
            raise ShapeMismatch(f"matmul: batch dims {lead_a} and {lead_b} incompatible")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            if b.ndim == 2:
                ga = g @ b.data.T
            else:
                ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make("matmul", out, (a, b), bw)


# ---------------------------------------------------------------- structure

def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    nd = ts[0].ndim
    ax = axis % nd
    for t in ts[1:]:
        if t.ndim != nd or t.shape[:ax] + t.shape[ax + 1:] != ts[0].shape[:ax] + ts[0].shape[ax + 1:]:
            raise ShapeMismatch(f"concat: incompatible shapes {[t.shape for t in ts]}")
    out = np.concatenate([t.data for t in ts], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def bw(g):
        parts = []
        for i, t in enumerate(ts):
            if not t.requires_grad:
                parts.append(None)
                continue
            idx = [np.s_[:]] * nd
            idx[ax] = np.s_[bounds[i]:bounds[i + 1]]
            parts.append(g[tuple(idx)])
        return tuple(parts)

    return _make("concat", out, ts, bw)


def slice(a: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    ax = axis % a.ndim
    if not 0 <= start <= stop <= a.shape[ax]:
        raise ShapeMismatch(f"slice [{start}:{stop}] out of range for axis of size {a.shape[ax]}")
    idx = [np.s_[:]] * a.ndim
    idx[ax] = np.s_[start:stop]
    idx = tuple(idx)
    out = a.data[idx]

    def bw(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[idx] = g
        return (full,)

    return _make("slice", np.ascontiguousarray(out), (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None
    return _make("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if not axes:
        axes = tuple(range(a.ndim))[::-1]
    axes = tuple(ax % a.ndim for ax in axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(a.data, axes))
    return _make("transpose", out, (a,), lambda g: (np.transpose(g, inv),))


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather slices of ``a`` along ``axis``; ``indices`` is an int array of any rank."""
    idx = np.asarray(indices, dtype=np.intp)
    ax = axis % a.ndim
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[ax]):
        raise ShapeMismatch(f"take: index out of range for axis of size {a.shape[ax]}")
    out = np.take(a.data, idx, axis=ax)

    def bw(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        # g has shape a.shape[:ax] + idx.shape + a.shape[ax+1:]
        cols = idx.reshape(idx.shape[0], -1) if idx.ndim > 1 else idx.reshape(-1, 1)
        gg = g.reshape(a.shape[:ax] + (idx.shape[0], cols.shape[1]) + a.shape[ax + 1:])
        lead = (np.s_[:],) * ax
        for c in range(cols.shape[1]):
            col = cols[:, c]
            src = gg[lead + (np.s_[:], c)]
            if len(np.unique(col)) == len(col):
                full[lead + (col,)] += src
            else:
                np.add.at(full, lead + (col,), src)
        return (full,)

    return _make("take", out, (a,), bw)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup: ``table[ids]``."""
    return take(table, ids, axis=0)


# ---------------------------------------------------------------- reductions / norms

def _norm_axis(axis, ndim):
    if axis is None:
        return None
    return axis % ndim


def sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    ax = _norm_axis(axis, a.ndim)
    out = np.sum(a.data, axis=ax, keepdims=keepdims, dtype=np.float64)

    def bw(g):
        if ax is not None and not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, a.shape).astype(a.data.dtype),)

    return _make("sum", np.asarray(out), (a,), bw)


def mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    ax = _norm_axis(axis, a.ndim)
    count = a.size if ax is None else a.shape[ax]
    out = np.mean(a.data, axis=ax, keepdims=keepdims, dtype=np.float64)

    def bw(g):
        if ax is not None and not keepdims:
            g = np.expand_dims(g, ax)
        return ((np.broadcast_to(g, a.shape) / count).astype(a.data.dtype),)

    return _make("mean", np.asarray(out), (a,), bw)


def softmax(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis.  ``mask`` (suffix-broadcastable bool) marks allowed entries."""
    x = a.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            _check_suffix(x.shape, mask.shape, "softmax mask")
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=-1, keepdims=True)
    if not np.all(np.isfinite(m)):
        raise NonFinite("softmax: a row has no allowed entries")
    e = np.exp(x - m)
    out = e / np.sum(e, axis=-1, keepdims=True, dtype=np.float64).astype(e.dtype)

    def bw(g):
        s = np.sum(g * out, axis=-1, keepdims=True, dtype=np.float64).astype(out.dtype)
        return (out * (g - s),)

    return _make("softmax", out, (a,), bw)


def layernorm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis (no affine part)."""
    x = a.data
    mu = np.mean(x, axis=-1, keepdims=True, dtype=np.float64)
    var = np.mean((x - mu) ** 2, axis=-1, keepdims=True, dtype=np.float64)
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = ((x - mu.astype(x.dtype)) * inv).astype(x.dtype)

    def bw(g):
        gm = np.mean(g, axis=-1, keepdims=True, dtype=np.float64).astype(x.dtype)
        gx = np.mean(g * xhat, axis=-1, keepdims=True, dtype=np.float64).astype(x.dtype)
        return (inv * (g - gm - xhat * gx),)

    return _make("layernorm", xhat, (a,), bw)


def l1_loss(pred: Tensor, target) -> Tensor:
    """Mean absolute error over all elements."""
    target = _as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"l1_loss: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    out = np.mean(np.abs(diff), dtype=np.float64)
    n = diff.size

    def bw(g):
        s = (np.sign(diff) * (g / n)).astype(diff.dtype)
        return (s if pred.requires_grad else None, -s if target.requires_grad else None)

    return _make("l1_loss", np.asarray(out), (pred, target), bw)


def l2_loss(pred: Tensor, target) -> Tensor:
    """Mean squared error over all elements."""
    target = _as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"l2_loss: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    out = np.mean(diff * diff, dtype=np.float64)
    n = diff.size

    def bw(g):
        s = (diff * (2.0 * g / n)).astype(diff.dtype)
        return (s if pred.requires_grad else None, -s if target.requires_grad else None)

    return _make("l2_loss", np.asarray(out), (pred, target), bw)


# ---------------------------------------------------------------- rotary

def rotary(a: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate consecutive channel pairs ``(2i, 2i+1)`` by per-position angles.

    ``a`` has shape ``(..., n, dh)``; ``cos``/``sin`` have shape ``(n, dh // 2)``.
    """
    x = a.data
    if x.shape[-1] % 2:
        raise ShapeMismatch("rotary needs an even last dimension")
    if cos.shape != (x.shape[-2], x.shape[-1] // 2):
        raise ShapeMismatch(f"rotary tables {cos.shape} do not match input {x.shape}")
    c, s = cos.astype(x.dtype), sin.astype(x.dtype)
    x0, x1 = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = x0 * c - x1 * s
    out[..., 1::2] = x0 * s + x1 * c

    def bw(g):
        g0, g1 = g[..., 0::2], g[..., 1::2]
        gi = np.empty_like(g)
        gi[..., 0::2] = g0 * c + g1 * s
        gi[..., 1::2] = -g0 * s + g1 * c
        return (gi,)

    return _make("rotary", out, (a,), bw)


# ---------------------------------------------------------------- banded attention products

def _band_ranges(n: int, offsets):
    for w, o in enumerate(np.asarray(offsets).tolist()):
        lo, hi = max(0, -o), min(n, n - o)
        if lo < hi:
            yield w, o, lo, hi


def band_scores(q: Tensor, k: Tensor, offsets) -> Tensor:
    """``out[..., i, w] = <q[..., i, :], k[..., i + offsets[w], :]>``; zero where out of range.

    Equivalent to gathering a band of keys and a batched matmul, without
    materializing the band.
    """
    if q.shape != k.shape:
        raise ShapeMismatch(f"band_scores: {q.shape} vs {k.shape}")
    n = q.shape[-2]
    offsets = np.asarray(offsets)
    out = np.zeros(q.shape[:-1] + (len(offsets),), dtype=q.data.dtype)
    qd, kd = q.data, k.data
    for w, o, lo, hi in _band_ranges(n, offsets):
        out[..., lo:hi, w] = np.einsum("...d,...d->...", qd[..., lo:hi, :], kd[..., lo + o:hi + o, :])

    def bw(g):
        gq = np.zeros_like(qd) if q.requires_grad else None
        gk = np.zeros_like(kd) if k.requires_grad else None
        for w, o, lo, hi in _band_ranges(n, offsets):
            gw = g[..., lo:hi, w, None]
            if gq is not None:
                gq[..., lo:hi, :] += gw * kd[..., lo + o:hi + o, :]
            if gk is not None:
                gk[..., lo + o:hi + o, :] += gw * qd[..., lo:hi, :]
        return gq, gk

    return _make("band_scores", out, (q, k), bw)


def band_mix(p: Tensor, v: Tensor, offsets) -> Tensor:
    """``out[..., i, :] = sum_w p[..., i, w] * v[..., i + offsets[w], :]`` over in-range offsets."""
    n = v.shape[-2]
    offsets = np.asarray(offsets)
    if p.shape != v.shape[:-1] + (len(offsets),):
        raise ShapeMismatch(f"band_mix: weights {p.shape} do not match values {v.shape}")
    pd, vd = p.data, v.data
    out = np.zeros_like(vd)
    for w, o, lo, hi in _band_ranges(n, offsets):
        out[..., lo:hi, :] += pd[..., lo:hi, w, None] * vd[..., lo + o:hi + o, :]

    def bw(g):
        gp = np.zeros_like(pd) if p.requires_grad else None
        gv = np.zeros_like(vd) if v.requires_grad else None
        for w, o, lo, hi in _band_ranges(n, offsets):
            if gp is not None:
                gp[..., lo:hi, w] = np.einsum("...d,...d->...", g[..., lo:hi, :], vd[..., lo + o:hi + o, :])
            if gv is not None:
                gv[..., lo + o:hi + o, :] += pd[..., lo:hi, w, None] * g[..., lo:hi, :]
        return gp, gv

    return _make("band_mix", out, (p, v), bw)


# ---------------------------------------------------------------- backward

def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] | None = None,
             debug: bool = False) -> dict[Tensor, np.ndarray]:
    """Reverse-mode sweep from a scalar ``loss``.

    Returns a map from each reachable leaf that requires grad to its gradient;
    leaves also get ``.grad`` set.  If ``params`` is given, unreachable ones
    receive zero gradients (with a :class:`DisconnectedParameter` warning when
    ``debug`` is on).
    """
    if loss.size != 1:
        raise NotScalar(f"backward needs a scalar loss, got shape {loss.shape}")
    order = _topo_order(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.data.dtype)}
    result: dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node.grad = g
                result[node] = g
            continue
        grads = node._backward(g)
        for parent, pg in zip(node.parents, grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg
    if params is not None:
        for p in params:
            if p not in result:
                if debug:
                    warnings.warn(f"parameter {p.name or p!r} is disconnected from the loss",
                                  DisconnectedParameter, stacklevel=2)
                zero = np.zeros(p.shape, dtype=p.data.dtype)
                p.grad = zero
                result[p] = zero
    return result
