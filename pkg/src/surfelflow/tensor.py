"""Reverse-mode autodiff over numpy arrays with a dynamic tape.

Everything is float64. Ops record onto the active ``Tape`` (a context
manager) when any input requires gradients; ``Tape.backward`` walks the
recorded nodes once, in reverse creation order, and accumulates vector-
Jacobian products.

Broadcasting is deliberately restricted: two operands must have identical
shapes, or the smaller shape must equal a trailing suffix of the larger
(leading-dimension expansion only). Anything else raises ``ShapeError``.
This keeps every backward reduction a plain sum over leading axes.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DomainError, ShapeError, ValidationError

EXP_CLAMP = 60.0

_ACTIVE_TAPE: Optional["Tape"] = None


class Tensor:
    """Immutable float64 array plus tape bookkeeping."""

    __slots__ = ("data", "requires_grad", "node_id", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.node_id: Optional[int] = None
        self._tape: Optional["Tape"] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _coerce(other))

    def __radd__(self, other):
        return add(_coerce(other), self)

    def __sub__(self, other):
        return sub(self, _coerce(other))

    def __rsub__(self, other):
        return sub(_coerce(other), self)

    def __mul__(self, other):
        return mul(self, _coerce(other))

    def __rmul__(self, other):
        return mul(_coerce(other), self)

    def __truediv__(self, other):
        return div(self, _coerce(other))

    def __matmul__(self, other):
        return matmul(self, _coerce(other))

    def __neg__(self):
        return mul(self, Tensor(-1.0))


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Records ops for one forward pass; ``backward`` replays them once."""

    def __init__(self):
        # node i: (input node ids, vjp callables aligned with those ids)
        self._inputs: list[tuple[int, ...]] = []
        self._vjps: list[Optional[tuple[Callable, ...]]] = []

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise ValidationError("a Tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def _add_node(self, input_ids: tuple[int, ...], vjps) -> int:
        self._inputs.append(input_ids)
        self._vjps.append(vjps)
        return len(self._inputs) - 1

    def _ensure_leaf(self, t: Tensor) -> None:
        if t._tape is not self or t.node_id is None:
            t.node_id = self._add_node((), None)
            t._tape = self

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Gradients of a scalar loss w.r.t. every reachable node, keyed by
        node id. Each node's vjp runs exactly once."""
        if loss._tape is not self or loss.node_id is None:
            raise ValidationError("backward: loss was not recorded on this tape")
        if loss.data.shape != ():
            raise ValidationError(
                f"backward: loss must be a scalar, got shape {loss.data.shape}"
            )
        grads: dict[int, np.ndarray] = {loss.node_id: np.array(1.0)}
        for nid in range(loss.node_id, -1, -1):
            g = grads.get(nid)
            if g is None:
                continue
            vjps = self._vjps[nid]
            if vjps is None:
                continue
            for iid, vjp in zip(self._inputs[nid], vjps):
                piece = vjp(g)
                acc = grads.get(iid)
                grads[iid] = piece if acc is None else acc + piece
        return grads


def _record(out: Tensor, vjps: Sequence[tuple[Tensor, Callable]]) -> Tensor:
    tape = _ACTIVE_TAPE
    if tape is None:
        return out
    live = [(t, fn) for t, fn in vjps if t.requires_grad]
    if not live:
        return out
    ids = []
    fns = []
    for t, fn in live:
        tape._ensure_leaf(t)
        ids.append(t.node_id)
        fns.append(fn)
    out.requires_grad = True
    out.node_id = tape._add_node(tuple(ids), tuple(fns))
    out._tape = tape
    return out


# ---------------------------------------------------------------------------
# broadcasting helpers (leading-dimension expansion only)

def _check_suffix_broadcast(sa: tuple, sb: tuple) -> None:
    if sa == sb:
        return
    small, large = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if len(small) == len(large) or large[len(large) - len(small):] != small:
        raise ShapeError(
            f"cannot broadcast shapes {sa} and {sb}: shapes must match exactly "
            "or one must equal a trailing suffix of the other"
        )


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    k = g.ndim - len(shape)
    return g.sum(axis=tuple(range(k)))


# ---------------------------------------------------------------------------
# elementwise ops

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_suffix_broadcast(a.shape, b.shape)
    out = Tensor(a.data + b.data)
    return _record(out, [
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(g, b.shape)),
    ])


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_suffix_broadcast(a.shape, b.shape)
    out = Tensor(a.data - b.data)
    return _record(out, [
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(-g, b.shape)),
    ])


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_suffix_broadcast(a.shape, b.shape)
    out = Tensor(a.data * b.data)
    return _record(out, [
        (a, lambda g: _unbroadcast(g * b.data, a.shape)),
        (b, lambda g: _unbroadcast(g * a.data, b.shape)),
    ])


def div(a: Tensor, b: Tensor) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_suffix_broadcast(a.shape, b.shape)
    out = Tensor(a.data / b.data)
    return _record(out, [
        (a, lambda g: _unbroadcast(g / b.data, a.shape)),
        (b, lambda g: _unbroadcast(-g * a.data / (b.data * b.data), b.shape)),
    ])


def exp(a: Tensor) -> Tensor:
    # range-guarded: inputs clamp to [-EXP_CLAMP, EXP_CLAMP]; the gradient is
    # exp(x) inside the range and zero outside (clamp treated as constant)
    a = _coerce(a)
    clipped = np.clip(a.data, -EXP_CLAMP, EXP_CLAMP)
    y = np.exp(clipped)
    mask = (a.data >= -EXP_CLAMP) & (a.data <= EXP_CLAMP)
    return _record(Tensor(y), [(a, lambda g: g * y * mask)])


def log(a: Tensor) -> Tensor:
    a = _coerce(a)
    if np.any(a.data <= 0):
        raise DomainError("log: input must be strictly positive")
    y = np.log(a.data)
    return _record(Tensor(y), [(a, lambda g: g / a.data)])


def sqrt(a: Tensor) -> Tensor:
    a = _coerce(a)
    if np.any(a.data <= 0):
        raise DomainError("sqrt: input must be strictly positive")
    y = np.sqrt(a.data)
    return _record(Tensor(y), [(a, lambda g: g / (2.0 * y))])


def tanh(a: Tensor) -> Tensor:
    a = _coerce(a)
    y = np.tanh(a.data)
    return _record(Tensor(y), [(a, lambda g: g * (1.0 - y * y))])


def sigmoid(a: Tensor) -> Tensor:
    a = _coerce(a)
    x = a.data
    # stable two-sided form
    y = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.clip(x, 0, None))),
                 np.exp(np.clip(x, None, 0)) / (1.0 + np.exp(np.clip(x, None, 0))))
    return _record(Tensor(y), [(a, lambda g: g * y * (1.0 - y))])


# ---------------------------------------------------------------------------
# reductions

def _norm_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for ndim {ndim}")
    return axis % ndim


def sum(a: Tensor, axis: Optional[int] = None) -> Tensor:  # noqa: A001
    a = _coerce(a)
    if axis is None:
        out = Tensor(a.data.sum())
        return _record(out, [(a, lambda g: np.broadcast_to(g, a.shape).copy())])
    ax = _norm_axis(axis, a.ndim)
    out = Tensor(a.data.sum(axis=ax))

    def back(g):
        return np.broadcast_to(np.expand_dims(g, ax), a.shape).copy()

    return _record(out, [(a, back)])


def mean(a: Tensor, axis: Optional[int] = None) -> Tensor:
    a = _coerce(a)
    if axis is None:
        n = a.data.size
        out = Tensor(a.data.mean())
        return _record(out, [(a, lambda g: np.broadcast_to(g / n, a.shape).copy())])
    ax = _norm_axis(axis, a.ndim)
    n = a.shape[ax]
    out = Tensor(a.data.mean(axis=ax))

    def back(g):
        return np.broadcast_to(np.expand_dims(g / n, ax), a.shape).copy()

    return _record(out, [(a, back)])


# ---------------------------------------------------------------------------
# shape ops

def transpose(a: Tensor, axes: Optional[tuple] = None) -> Tensor:
    a = _coerce(a)
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    axes = tuple(int(x) for x in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} is not a permutation for ndim {a.ndim}")
    inv = np.argsort(axes)
    out = Tensor(a.data.transpose(axes))
    return _record(out, [(a, lambda g: g.transpose(inv))])


def reshape(a: Tensor, shape: tuple) -> Tensor:
    a = _coerce(a)
    try:
        y = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} (size {a.data.size}) into {tuple(shape)}")
    return _record(Tensor(y), [(a, lambda g: g.reshape(a.shape))])


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [_coerce(t) for t in tensors]
    if not ts:
        raise ValidationError("concat: need at least one tensor")
    ax = _norm_axis(axis, ts[0].ndim)
    for t in ts[1:]:
        if t.ndim != ts[0].ndim:
            raise ShapeError(f"concat: rank mismatch {ts[0].shape} vs {t.shape}")
        for d in range(t.ndim):
            if d != ax and t.shape[d] != ts[0].shape[d]:
                raise ShapeError(f"concat: shapes {ts[0].shape} and {t.shape} differ off-axis")
    out = Tensor(np.concatenate([t.data for t in ts], axis=ax))
    offsets = np.cumsum([0] + [t.shape[ax] for t in ts])

    def make_vjp(i):
        sl = [slice(None)] * ts[0].ndim

        def back(g):
            sl[ax] = slice(int(offsets[i]), int(offsets[i + 1]))
            return g[tuple(sl)]

        return back

    return _record(out, [(t, make_vjp(i)) for i, t in enumerate(ts)])


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of ``length`` entries along ``axis`` starting at ``start``."""
    a = _coerce(a)
    ax = _norm_axis(axis, a.ndim)
    if start < 0 or length < 0 or start + length > a.shape[ax]:
        raise ShapeError(
            f"narrow: [{start}, {start + length}) out of bounds for axis {ax} of {a.shape}"
        )
    sl = [slice(None)] * a.ndim
    sl[ax] = slice(start, start + length)
    sl = tuple(sl)
    out = Tensor(a.data[sl])

    def back(g):
        full = np.zeros(a.shape)
        full[sl] = g
        return full

    return _record(out, [(a, back)])


# ---------------------------------------------------------------------------
# matmul

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    Accepts 2D @ 2D, batched @ 2D, 2D @ batched, and batched @ batched with
    identical leading dims. Inner dims must agree exactly.
    """
    a, b = _coerce(a), _coerce(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims disagree for {a.shape} @ {b.shape}")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(
            f"matmul: batched operands need identical leading dims, got {a.shape} @ {b.shape}"
        )
    out = Tensor(np.matmul(a.data, b.data))

    def back_a(g):
        da = np.matmul(g, np.swapaxes(b.data, -1, -2))
        return _unbroadcast(da, a.shape)

    def back_b(g):
        db = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(db, b.shape)

    return _record(out, [(a, back_a), (b, back_b)])


# ---------------------------------------------------------------------------
# fused normalizations (all over the last axis)

def softmax(a: Tensor) -> Tensor:
    a = _coerce(a)
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return y * (g - dot)

    return _record(Tensor(y), [(a, back)])


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    a = _coerce(a)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    n = x.shape[-1]

    def back(g):
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * y).mean(axis=-1, keepdims=True)
        return inv * (g - gm - y * gym)

    del n
    return _record(Tensor(y), [(a, back)])


def l2_normalize(a: Tensor, eps: float = 1e-12) -> Tensor:
    a = _coerce(a)
    x = a.data
    s = (x * x).sum(axis=-1, keepdims=True)
    norm = np.sqrt(s + eps)
    y = x / norm

    def back(g):
        dot = (g * x).sum(axis=-1, keepdims=True)
        return g / norm - x * (dot / (norm * norm * norm))

    return _record(Tensor(y), [(a, back)])


# ---------------------------------------------------------------------------
# gradient checking

def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-4) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|).

    ``f`` maps one tensor to a scalar. ``eps`` must lie in [1e-7, 1e-3].
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ValidationError(f"grad_check: eps {eps} outside [1e-7, 1e-3]")
    x = _coerce(x)
    with Tape() as tape:
        xx = Tensor(x.data.copy(), requires_grad=True)
        y = f(xx)
        if not isinstance(y, Tensor) or y.data.shape != ():
            raise ValidationError("grad_check: f must return a scalar Tensor")
        grads = tape.backward(y)
    analytic = grads.get(xx.node_id)
    if analytic is None:
        analytic = np.zeros(x.shape)
    analytic = np.asarray(analytic, dtype=np.float64).reshape(x.shape)

    numeric = np.zeros(x.shape)
    flat = x.data.copy().reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(Tensor(flat.reshape(x.shape))).item()
        flat[i] = orig - eps
        lo = f(Tensor(flat.reshape(x.shape))).item()
        flat[i] = orig
        num_flat[i] = (hi - lo) / (2.0 * eps)

    denom = np.maximum(1.0, np.abs(analytic))
    rel = np.abs(analytic - numeric) / denom
    return float(rel.max()) if rel.size else 0.0
