"""Dense tensors with tape-based reverse-mode differentiation.

A :class:`Tensor` wraps a contiguous numpy array. Tensors become part of a
gradient graph only through :meth:`GradTape.watch`; every op applied to a
watched tensor appends a record to that tape, so records are topologically
ordered by construction. Untracked tensors run the numpy forward only.

Broadcasting between two tensor operands is limited to the case where the
smaller shape is a trailing suffix of the larger one (scalars and bias
vectors). Boolean masks passed to :func:`masked_fill` are constants and follow
plain numpy broadcasting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    ContractError,
    DegenerateInputError,
    DTypeError,
    EmptyReductionError,
    NumericError,
    ShapeError,
)

F32 = np.dtype(np.float32)
F64 = np.dtype(np.float64)
_FLOAT_DTYPES = (F32, F64)


class Tensor:
    __slots__ = ("data", "tape", "node")
    __array_priority__ = 100

    def __init__(self, data, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            dtype = arr.dtype if arr.dtype in _FLOAT_DTYPES else F32
        dtype = np.dtype(dtype)
        if dtype not in _FLOAT_DTYPES:
            raise DTypeError(f"unsupported dtype {dtype}; expected float32 or float64")
        self.data = _contig(np.asarray(data, dtype=dtype))
        self.tape: GradTape | None = None
        self.node: int | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.tape = None
        t.node = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def tracked(self) -> bool:
        return self.node is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else _not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        tag = f", node={self.node}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def _contig(x: np.ndarray) -> np.ndarray:
    # np.ascontiguousarray would promote 0-d arrays to 1-d
    return x if x.flags.c_contiguous else x.copy()


def _not_scalar(t: Tensor):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def tensor(data, dtype=None) -> Tensor:
    return Tensor(data, dtype=dtype)


def zeros(shape, dtype=F32) -> Tensor:
    return Tensor._wrap(np.zeros(shape, dtype=dtype))


def ones(shape, dtype=F32) -> Tensor:
    return Tensor._wrap(np.ones(shape, dtype=dtype))


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------

BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass(frozen=True)
class OpRecord:
    kind: str
    inputs: tuple[int | None, ...]
    output: int
    backward: BackwardFn


class GradTape:
    """Append-only record of differentiable ops.

    A tape is single-threaded. Independent tapes may be used concurrently from
    different threads as long as they only read shared parameter arrays.
    """

    def __init__(self):
        self.records: list[OpRecord] = []
        self._n_nodes = 0
        self._leaves: set[int] = set()

    def _new_node(self) -> int:
        self._n_nodes += 1
        return self._n_nodes - 1

    def watch(self, t: Tensor | np.ndarray) -> Tensor:
        """Return a leaf tensor on this tape sharing ``t``'s buffer."""
        data = t.data if isinstance(t, Tensor) else np.asarray(t)
        if data.dtype not in _FLOAT_DTYPES:
            raise DTypeError(f"cannot watch dtype {data.dtype}")
        leaf = Tensor._wrap(data)
        leaf.tape = self
        leaf.node = self._new_node()
        self._leaves.add(leaf.node)
        return leaf

    def _record(self, kind: str, inputs: Sequence[Tensor], out: Tensor, fn: BackwardFn):
        out.tape = self
        out.node = self._new_node()
        self.records.append(OpRecord(kind, tuple(t.node for t in inputs), out.node, fn))

    def backward(self, loss: Tensor) -> dict[int, Tensor]:
        """Gradients of a scalar ``loss`` for every watched leaf it reaches."""
        if loss.tape is not self:
            raise ContractError("loss is not attached to this tape")
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {loss.node: np.ones(loss.shape, dtype=loss.dtype)}
        leaf_grads: dict[int, np.ndarray] = {}
        if loss.node in self._leaves:
            leaf_grads[loss.node] = grads[loss.node]
        for rec in reversed(self.records):
            if rec.output > loss.node:
                continue
            g = grads.pop(rec.output, None)
            if g is None:
                continue
            in_grads = rec.backward(g)
            for node, gi in zip(rec.inputs, in_grads):
                if node is None or gi is None:
                    continue
                target = leaf_grads if node in self._leaves else grads
                prev = target.get(node)
                target[node] = gi if prev is None else prev + gi
        return {k: Tensor._wrap(v) for k, v in leaf_grads.items()}

    def gradient(self, loss: Tensor, sources: Iterable[Tensor]) -> list[np.ndarray]:
        """Like :meth:`backward` but ordered by ``sources``; unreached ones get zeros."""
        got = self.backward(loss)
        out = []
        for s in sources:
            g = got.get(s.node)
            out.append(g.data if g is not None else np.zeros_like(s.data))
        return out


def backward(loss: Tensor) -> dict[int, Tensor]:
    if loss.tape is None:
        raise ContractError("loss is not attached to any tape")
    return loss.tape.backward(loss)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _operands(*xs) -> list[Tensor]:
    dtype = None
    for x in xs:
        if isinstance(x, Tensor):
            if dtype is None:
                dtype = x.dtype
            elif x.dtype != dtype:
                raise DTypeError(f"mixed dtypes in one op: {dtype.name} and {x.dtype.name}")
    dtype = dtype or F32
    return [x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=dtype)) for x in xs]


def _emit(kind: str, out: np.ndarray, inputs: Sequence[Tensor], fn: BackwardFn) -> Tensor:
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is None:
                tape = t.tape
            elif t.tape is not tape:
                raise ContractError("op mixes tensors from different tapes")
    res = Tensor._wrap(out)
    if tape is not None:
        tape._record(kind, inputs, res, fn)
    return res


def _check_broadcast(a: tuple, b: tuple, op: str):
    if a == b:
        return
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    if len(short) < len(long_) and tuple(long_[len(long_) - len(short):]) == tuple(short):
        return
    raise ShapeError(f"{op}: cannot broadcast shapes {a} and {b} (only trailing-suffix broadcasting)")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))).reshape(shape)


def _norm_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for rank {ndim}")
    return axis % ndim


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _operands(a, b)
    _check_broadcast(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return _emit("add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _operands(a, b)
    _check_broadcast(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return _emit("sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _operands(a, b)
    _check_broadcast(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _emit("mul", ad * bd, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _operands(a, b)
    _check_broadcast(a.shape, b.shape, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _emit("div", out, (a, b), bw)


def neg(a) -> Tensor:
    (a,) = _operands(a)
    return _emit("neg", -a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    (a,) = _operands(a)
    out = np.exp(a.data)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    (a,) = _operands(a)
    ad = a.data
    if np.any(ad <= 0):
        raise NumericError("log of a non-positive value")
    return _emit("log", np.log(ad), (a,), lambda g: (g / ad,))


def sigmoid(a) -> Tensor:
    (a,) = _operands(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _emit("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """GELU, tanh approximation."""
    (a,) = _operands(a)
    x = a.data
    x2 = x * x
    inner = _GELU_C * (x + 0.044715 * x2 * x)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _emit("gelu", out, (a,), bw)


def masked_fill(a, mask, value: float) -> Tensor:
    """Replace entries where ``mask`` is true by ``value``; the mask is a constant."""
    (a,) = _operands(a)
    mask = np.asarray(mask, dtype=bool)
    try:
        keep = ~np.broadcast_to(mask, a.shape)
    except ValueError as e:
        raise ShapeError(f"masked_fill: mask shape {mask.shape} vs input {a.shape}") from e
    out = np.where(keep, a.data, np.asarray(value, dtype=a.dtype))
    return _emit("masked_fill", out, (a,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------


def tsum(a, axis=None, keepdims=False) -> Tensor:
    (a,) = _operands(a)
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", np.asarray(out), (a,), bw)


def mean(a, axis=None, keepdims=False) -> Tensor:
    (a,) = _operands(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    if n == 0:
        raise EmptyReductionError("mean over an empty axis")
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    (a,) = _operands(a)
    orig = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"cannot reshape {orig} into {tuple(shape)}") from e
    return _emit("reshape", out, (a,), lambda g: (g.reshape(orig),))


def transpose(a, axes=None) -> Tensor:
    """Permute axes; by default swap the last two."""
    (a,) = _operands(a)
    if axes is None:
        if a.ndim < 2:
            raise ShapeError("transpose needs rank >= 2")
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"invalid permutation {axes} for rank {a.ndim}")
    inv = tuple(np.argsort(axes))
    return _emit("transpose", _contig(a.data.transpose(axes)), (a,),
                 lambda g: (g.transpose(inv),))


def getitem(a, idx) -> Tensor:
    (a,) = _operands(a)
    shape, dtype = a.shape, a.dtype
    parts = idx if isinstance(idx, tuple) else (idx,)
    advanced = any(isinstance(p, (list, np.ndarray)) for p in parts)
    out = _contig(np.asarray(a.data[idx]))

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        if advanced:
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return _emit("getitem", out, (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = _operands(*tensors)
    if not ts:
        raise ShapeError("concat of nothing")
    ax = _norm_axis(axis, ts[0].ndim)
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(
            s1 != s2 for i, (s1, s2) in enumerate(zip(t.shape, ts[0].shape)) if i != ax
        ):
            raise ShapeError(f"concat: incompatible shapes {ts[0].shape} and {t.shape} on axis {ax}")
    sizes = np.cumsum([t.shape[ax] for t in ts])[:-1]
    out = np.concatenate([t.data for t in ts], axis=ax)
    return _emit("concat", out, ts, lambda g: tuple(np.split(g, sizes, axis=ax)))


def embedding(weight, ids) -> Tensor:
    """Gather rows of ``weight`` [V x d] by integer ``ids`` of any shape."""
    (weight,) = _operands(weight)
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise DTypeError("embedding ids must be integers")
    if weight.ndim != 2:
        raise ShapeError(f"embedding table must be 2-D, got {weight.shape}")
    V = weight.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise ShapeError(f"embedding id out of range [0, {V})")
    shape, dtype = weight.shape, weight.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return _emit("embedding", weight.data[ids], (weight,), bw)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes.

    Either both operands have the same rank and identical leading (batch)
    axes, or ``b`` is a plain matrix applied to every leading index of ``a``.
    """
    a, b = _operands(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    shared = b.ndim == 2
    if not shared and (a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2]):
        raise ShapeError(f"matmul batch dimensions differ: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    need_a, need_b = a.tape is not None, b.tape is not None

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2) if need_a else None
        gb = None
        if need_b:
            if shared and ad.ndim > 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _emit("matmul", ad @ bd, (a, b), bw)


def _check_finite(x: np.ndarray, op: str):
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{op}: non-finite input")


def softmax(a, axis: int = -1) -> Tensor:
    (a,) = _operands(a)
    ax = _norm_axis(axis, a.ndim)
    _check_finite(a.data, "softmax")
    e = np.exp(a.data - a.data.max(axis=ax, keepdims=True))
    out = e / e.sum(axis=ax, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=ax, keepdims=True)),)

    return _emit("softmax", out, (a,), bw)


def log_softmax(a, axis: int = -1) -> Tensor:
    (a,) = _operands(a)
    ax = _norm_axis(axis, a.ndim)
    _check_finite(a.data, "log_softmax")
    shifted = a.data - a.data.max(axis=ax, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=ax, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=ax, keepdims=True),)

    return _emit("log_softmax", out, (a,), bw)


def layer_norm(a, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    a, gamma, beta = _operands(a, gamma, beta)
    D = a.shape[-1]
    if gamma.shape != (D,) or beta.shape != (D,):
        raise ShapeError(f"layer_norm affine shapes {gamma.shape}, {beta.shape} vs width {D}")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    gd = gamma.data
    out = xhat * gd + beta.data

    def bw(g):
        dxhat = g * gd
        dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                     - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _emit("layer_norm", out, (a, gamma, beta), bw)


def l2_normalize(a, axis: int = -1) -> Tensor:
    (a,) = _operands(a)
    ax = _norm_axis(axis, a.ndim)
    x = a.data
    norm = np.sqrt((x * x).sum(axis=ax, keepdims=True))
    if np.any(norm == 0):
        raise DegenerateInputError("l2_normalize: zero-norm row")
    out = x / norm

    def bw(g):
        return ((g - out * (g * out).sum(axis=ax, keepdims=True)) / norm,)

    return _emit("l2_normalize", out, (a,), bw)


def cross_entropy(logits, targets, ignore=None) -> Tensor:
    """Summed negative log-likelihood of ``targets`` under ``softmax(logits)``.

    ``logits`` has shape [..., V]; ``targets`` and the optional boolean
    ``ignore`` mask have the leading shape. Ignored positions contribute
    nothing. The result is a sum; normalization is left to the caller.
    """
    (logits,) = _operands(logits)
    targets = np.asarray(targets)
    lead, V = logits.shape[:-1], logits.shape[-1]
    if targets.shape != lead:
        raise ShapeError(f"cross_entropy: targets {targets.shape} vs logits {logits.shape}")
    keep = np.ones(lead, dtype=bool) if ignore is None else ~np.asarray(ignore, dtype=bool)
    if keep.shape != lead:
        raise ShapeError(f"cross_entropy: ignore mask {keep.shape} vs targets {lead}")
    if not keep.any():
        raise EmptyReductionError("cross_entropy: every position is ignored")
    safe_t = np.where(keep, targets, 0)
    if safe_t.min() < 0 or safe_t.max() >= V:
        raise ShapeError(f"cross_entropy: target id out of range [0, {V})")
    _check_finite(logits.data, "cross_entropy")
    x = logits.data
    shifted = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    picked = np.take_along_axis(logp, safe_t[..., None], axis=-1)[..., 0]
    out = np.asarray(-(picked * keep).sum(), dtype=logits.dtype)

    def bw(g):
        p = np.exp(logp)
        np.put_along_axis(p, safe_t[..., None], np.take_along_axis(p, safe_t[..., None], axis=-1) - 1.0,
                          axis=-1)
        return (p * (keep[..., None] * g),)

    return _emit("cross_entropy", out, (logits,), bw)
