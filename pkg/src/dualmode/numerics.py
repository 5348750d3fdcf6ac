"""Dense float64 tensors with a recording tape for reverse-mode gradients.

Summation order is fixed: every reduction and every contraction is a
left-to-right sequential sum over the reduced axis, built from elementwise
numpy operations. Results are therefore bit-reproducible and do not depend on
memory layout, BLAS kernels, or the extents of unrelated axes.

Typical use::

    params = ParameterSet()
    params.add("w", np.ones((3, 2)))
    with GradTape() as tape:
        P = params.bind(tape)
        loss = (x @ P["w"]).sum()
    grads = backward(tape, loss)      # {"w": ndarray}
"""

from __future__ import annotations

import contextvars
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .errors import (
    DualModeError,
    FrozenParameterError,
    MaskError,
    NonDeterminismError,
    ShapeError,
)

DTYPE = np.float64
LN_EPS = 1e-6

_ACTIVE_TAPE: contextvars.ContextVar["GradTape | None"] = contextvars.ContextVar(
    "dualmode_active_tape", default=None
)


# ---------------------------------------------------------------------------
# Sequential kernels on raw arrays
# ---------------------------------------------------------------------------


def seq_sum(x: np.ndarray, axis: int = -1, keepdims: bool = False) -> np.ndarray:
    """Sum along ``axis`` strictly left to right."""
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim == 0:
        return x.copy()
    axis = axis % x.ndim
    moved = np.moveaxis(x, axis, 0)
    if moved.shape[0] == 0:
        acc = np.zeros(moved.shape[1:], dtype=DTYPE)
    else:
        acc = np.array(moved[0], dtype=DTYPE, copy=True)
        for i in range(1, moved.shape[0]):
            acc += moved[i]
    if keepdims:
        acc = np.expand_dims(acc, axis)
    return acc


def seq_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product accumulated sequentially over the contraction axis.

    Leading axes broadcast as in ``np.matmul``. Entry (i, j) equals the
    scalar loop ``s = 0.0; for k: s += a[i, k] * b[k, j]`` bit for bit.
    """
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents disagree: {a.shape} @ {b.shape}")
    acc = a[..., :, 0:1] * b[..., 0:1, :]
    for k in range(1, a.shape[-1]):
        acc += a[..., :, k : k + 1] * b[..., k : k + 1, :]
    return acc


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = seq_sum(g, axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = seq_sum(g, axis=axis, keepdims=True)
    return g


def _pair_swap(x: np.ndarray) -> np.ndarray:
    # (x0, x1) -> (-x1, x0) on consecutive channel pairs
    out = np.empty_like(x)
    out[..., 0::2] = -x[..., 1::2]
    out[..., 1::2] = x[..., 0::2]
    return out


# ---------------------------------------------------------------------------
# Tensor and tape
# ---------------------------------------------------------------------------


class Tensor:
    """Immutable float64 array that may be recorded on a :class:`GradTape`."""

    __slots__ = ("data", "requires_grad", "param_id")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, param_id: str | None = None):
        arr = data if isinstance(data, np.ndarray) and data.dtype == DTYPE else np.array(data, dtype=DTYPE)
        if any(extent <= 0 for extent in arr.shape):
            raise ShapeError(f"tensor extents must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.param_id = param_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single value, tensor has shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self) -> str:
        tag = f", param={self.param_id!r}" if self.param_id else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __truediv__ = lambda self, other: div(self, other)
    __rtruediv__ = lambda self, other: div(other, self)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, other: matmul(self, other)
    __rmatmul__ = lambda self, other: matmul(other, self)

    def __getitem__(self, index) -> "Tensor":
        return take(self, index)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int) -> "Tensor":
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def sum(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class GradTape:
    """Records differentiable operations executed while it is active.

    Only tensors derived from watched parameters are recorded; operations on
    constants cost nothing extra. A tape is single-owner and is meant to be
    used for one backward pass.
    """

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self.watched: dict[str, Tensor] = {}
        self._tokens: list[contextvars.Token] = []

    def __enter__(self) -> "GradTape":
        self._tokens.append(_ACTIVE_TAPE.set(self))
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._tokens.pop())

    def __len__(self) -> int:
        return len(self.nodes)

    def watch(self, param: "Parameter") -> Tensor:
        t = self.watched.get(param.id)
        if t is None:
            t = Tensor(param.value, requires_grad=True, param_id=param.id)
            self.watched[param.id] = t
        return t


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        out = Tensor(data, requires_grad=True)
        tape.nodes.append(_Node(out, inputs, vjp))
        return out
    return Tensor(data)


def backward(tape: GradTape, loss: Tensor) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of a scalar ``loss`` for every watched parameter it reaches.

    Parameters whose value never influenced ``loss`` are absent from the map.
    """
    if not isinstance(loss, Tensor) or loss.size != 1:
        shape = loss.shape if isinstance(loss, Tensor) else type(loss).__name__
        raise ShapeError(f"backward needs a scalar loss, got {shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=DTYPE)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = np.array(gi, dtype=DTYPE)
    out = {}
    for pid, t in tape.watched.items():
        g = grads.get(id(t))
        if g is not None:
            out[pid] = g.reshape(t.shape)
    return out


# ---------------------------------------------------------------------------
# Differentiable operations
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _record(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _record(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data

    def vjp(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return _record(out, (a, b), vjp)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _record(-a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = seq_matmul(a.data, b.data)

    def vjp(g):
        ga = seq_matmul(g, np.swapaxes(b.data, -1, -2))
        gb = seq_matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(out, (a, b), vjp)


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = _as_tensor(a)
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes: tuple[int, ...] | None = None) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(ax % a.ndim for ax in axes)
    inverse = tuple(np.argsort(axes))
    return _record(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def take(a, index) -> Tensor:
    """Basic or integer-array indexing; repeated indices accumulate in the gradient."""
    a = _as_tensor(a)

    def vjp(g):
        z = np.zeros(a.shape, dtype=DTYPE)
        np.add.at(z, index, g)
        return (z,)

    return _record(np.array(a.data[index], dtype=DTYPE), (a,), vjp)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(_as_tensor(t) for t in tensors)
    if not ts:
        raise ShapeError("concat needs at least one tensor")
    axis = axis % ts[0].ndim
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat shape mismatch: {[t.shape for t in ts]}") from exc
    return _record(data, ts, lambda g: tuple(np.split(g, bounds, axis=axis)))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    return _record(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _record(out, (a,), lambda g: (g * (1.0 - out * out),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """tanh-approximated GELU."""
    a = _as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _record(out, (a,), vjp)


def tsum(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        out = seq_sum(a.data.reshape(-1), axis=0)
        if keepdims:
            out = out.reshape((1,) * a.ndim)
        return _record(out, (a,), lambda g: (np.broadcast_to(g.reshape((1,) * a.ndim), a.shape).copy(),))
    ax = axis % a.ndim
    out = seq_sum(a.data, axis=ax, keepdims=keepdims)

    def vjp(g):
        gk = g if keepdims else np.expand_dims(g, ax)
        return (np.broadcast_to(gk, a.shape).copy(),)

    return _record(out, (a,), vjp)


def mean(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return div(tsum(a, axis, keepdims), float(n))


def softmax_rows(x, allowed: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting the row maximum.

    ``allowed`` is an optional boolean array broadcastable to ``x``; disallowed
    entries receive exactly zero weight and do not influence the result.
    """
    x = _as_tensor(x)
    if x.ndim == 0 or x.shape[-1] < 1:
        raise ShapeError("softmax needs a non-empty last axis")
    if allowed is None:
        m = np.max(x.data, axis=-1, keepdims=True)
        e = np.exp(x.data - m)
    else:
        allowed = np.broadcast_to(np.asarray(allowed, dtype=bool), x.shape)
        if not np.all(np.any(allowed, axis=-1)):
            raise MaskError("a query row has no permitted keys; softmax is undefined")
        masked = np.where(allowed, x.data, -np.inf)
        m = np.max(masked, axis=-1, keepdims=True)
        e = np.where(allowed, np.exp(masked - m), 0.0)
    y = e / seq_sum(e, axis=-1, keepdims=True)

    def vjp(g):
        return (y * (g - seq_sum(g * y, axis=-1, keepdims=True)),)

    return _record(y, (x,), vjp)


def layer_norm(x, gain, bias, eps: float = LN_EPS) -> Tensor:
    """Row-wise normalisation to zero mean / unit variance, then ``* gain + bias``."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm gain/bias {gain.shape}/{bias.shape} do not match last extent {d}")
    mu = seq_sum(x.data, axis=-1, keepdims=True) / d
    xc = x.data - mu
    var = seq_sum(xc * xc, axis=-1, keepdims=True) / d
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def vjp(g):
        gx = g * gain.data
        m1 = seq_sum(gx, axis=-1, keepdims=True) / d
        m2 = seq_sum(gx * xhat, axis=-1, keepdims=True) / d
        dx = inv * (gx - m1 - xhat * m2)
        flat_g = g.reshape(-1, d)
        dgain = seq_sum(flat_g * xhat.reshape(-1, d), axis=0)
        dbias = seq_sum(flat_g, axis=0)
        return dx, dgain, dbias

    return _record(out, (x, gain, bias), vjp)


def cross_entropy(logits, targets) -> Tensor:
    """Mean next-token cross-entropy of ``logits`` (N, V) against integer ``targets`` (N,)."""
    logits = _as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy expects (N, V) logits and (N,) targets, got {logits.shape}, {targets.shape}")
    if targets.min() < 0 or targets.max() >= logits.shape[1]:
        raise ShapeError("cross_entropy target outside the vocabulary")
    n = logits.shape[0]
    m = np.max(logits.data, axis=-1, keepdims=True)
    e = np.exp(logits.data - m)
    s = seq_sum(e, axis=-1, keepdims=True)
    logp = logits.data - m - np.log(s)
    rows = np.arange(n)
    out = -seq_sum(logp[rows, targets], axis=0) / n

    def vjp(g):
        p = e / s
        p[rows, targets] -= 1.0
        return (p * (g / n),)

    return _record(np.asarray(out), (logits,), vjp)


def rotary(x, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate consecutive channel pairs of ``x`` by angles given through cos/sin tables."""
    x = _as_tensor(x)
    out = x.data * cos + _pair_swap(x.data) * sin
    # the transpose of pair_swap is its negation
    return _record(out, (x,), lambda g: (g * cos - _pair_swap(g * sin),))


# ---------------------------------------------------------------------------
# Attention masks and attention
# ---------------------------------------------------------------------------


class MaskSpec:
    """Structural attention-mask descriptor.

    Subclasses answer ``allowed(n_q, n_k)`` with a boolean matrix, but callers
    that know the block structure (see the dual-path encoder) never need to
    materialise it.
    """

    def allowed(self, n_q: int, n_k: int) -> np.ndarray:
        raise NotImplementedError


@dataclass(frozen=True)
class FullMask(MaskSpec):
    def allowed(self, n_q, n_k):
        return np.ones((n_q, n_k), dtype=bool)


@dataclass(frozen=True)
class DenseMask(MaskSpec):
    matrix: np.ndarray

    def allowed(self, n_q, n_k):
        m = np.asarray(self.matrix, dtype=bool)
        if m.shape != (n_q, n_k):
            raise MaskError(f"mask shape {m.shape} does not match ({n_q}, {n_k}) queries x keys")
        return m


@dataclass(frozen=True)
class AsymmetricMask(MaskSpec):
    """Standby tokens first, then original tokens.

    Original queries see original keys only; standby queries see every key.
    """

    n_standby: int
    n_original: int

    def allowed(self, n_q, n_k):
        n = self.n_standby + self.n_original
        if (n_q, n_k) != (n, n):
            raise MaskError(f"asymmetric mask covers {n} tokens, got ({n_q}, {n_k})")
        m = np.ones((n, n), dtype=bool)
        m[self.n_standby:, : self.n_standby] = False
        return m


@dataclass(frozen=True)
class BlockCausalMask(MaskSpec):
    """Token i may see token j iff block(j) <= block(i)."""

    block_sizes: tuple[int, ...]

    def allowed(self, n_q, n_k):
        n = sum(self.block_sizes)
        if (n_q, n_k) != (n, n):
            raise MaskError(f"block-causal mask covers {n} tokens, got ({n_q}, {n_k})")
        blocks = np.repeat(np.arange(len(self.block_sizes)), self.block_sizes)
        return blocks[None, :] <= blocks[:, None]


@dataclass(frozen=True)
class CausalMask(MaskSpec):
    """Token-causal mask for a chunk of queries appended after ``n_past`` cached keys."""

    n_past: int = 0

    def allowed(self, n_q, n_k):
        if n_k != self.n_past + n_q:
            raise MaskError(f"causal mask expects {self.n_past + n_q} keys, got {n_k}")
        return np.arange(n_k)[None, :] <= (self.n_past + np.arange(n_q))[:, None]


def masked_attention(q, k, v, mask: MaskSpec | np.ndarray | None = None, *,
                     return_weights: bool = False):
    """Scaled dot-product attention over the last two axes.

    q: (..., Nq, dh), k: (..., Nk, dh), v: (..., Nk, dv). With ``mask`` None
    every key is permitted. Returns the output, plus the attention weights as a
    plain array when ``return_weights`` is set.
    """
    q, k, v = _as_tensor(q), _as_tensor(k), _as_tensor(v)
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"query/key head dims differ: {q.shape} vs {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"key/value counts differ: {k.shape} vs {v.shape}")
    n_q, n_k = q.shape[-2], k.shape[-2]
    if mask is None or isinstance(mask, FullMask):
        allowed = None
    elif isinstance(mask, MaskSpec):
        allowed = mask.allowed(n_q, n_k)
    else:
        allowed = DenseMask(np.asarray(mask)).allowed(n_q, n_k)
    scores = matmul(q, k.swapaxes(-1, -2)) * (1.0 / math.sqrt(q.shape[-1]))
    weights = softmax_rows(scores, allowed)
    out = matmul(weights, v)
    if return_weights:
        return out, weights.data
    return out


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


class Parameter:
    """Named value with a trainable flag and an ``original``/``new`` group tag."""

    __slots__ = ("id", "value", "trainable", "group")

    def __init__(self, id: str, value, trainable: bool = True, group: str = "original"):
        arr = np.array(value, dtype=DTYPE, copy=True)
        arr.setflags(write=False)
        self.id = id
        self.value = arr
        self.trainable = trainable
        self.group = group

    def __repr__(self) -> str:
        return f"Parameter({self.id!r}, shape={self.value.shape}, trainable={self.trainable}, group={self.group!r})"


class ParameterSet:
    """Ordered mapping of parameter id to :class:`Parameter`."""

    def __init__(self, params: Iterable[Parameter] = ()):
        self._params: dict[str, Parameter] = {}
        for p in params:
            self._insert(p)

    def _insert(self, p: Parameter) -> None:
        if p.id in self._params:
            raise DualModeError(f"duplicate parameter id {p.id!r}")
        self._params[p.id] = p

    def add(self, id: str, value, trainable: bool = True, group: str = "original") -> Parameter:
        p = Parameter(id, value, trainable, group)
        self._insert(p)
        return p

    def __getitem__(self, id: str) -> Parameter:
        try:
            return self._params[id]
        except KeyError:
            raise KeyError(f"no parameter {id!r}") from None

    def __contains__(self, id: str) -> bool:
        return id in self._params

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def ids(self) -> list[str]:
        return list(self._params)

    def trainable_ids(self) -> list[str]:
        return [p.id for p in self if p.trainable]

    def n_scalars(self, trainable_only: bool = False) -> int:
        return sum(p.value.size for p in self if p.trainable or not trainable_only)

    def set_value(self, id: str, value) -> None:
        p = self[id]
        arr = np.array(value, dtype=DTYPE, copy=True)
        if arr.shape != p.value.shape:
            raise ShapeError(f"{id}: new value shape {arr.shape} != {p.value.shape}")
        arr.setflags(write=False)
        p.value = arr

    def set_trainable(self, predicate: Callable[[Parameter], bool]) -> None:
        for p in self:
            p.trainable = bool(predicate(p))

    def copy(self) -> "ParameterSet":
        # values are read-only, so sharing them between copies is safe
        out = ParameterSet()
        for p in self:
            q = Parameter.__new__(Parameter)
            q.id, q.value, q.trainable, q.group = p.id, p.value, p.trainable, p.group
            out._insert(q)
        return out

    def snapshot(self) -> dict[str, np.ndarray]:
        return {p.id: p.value for p in self}

    def bind(self, tape: GradTape | None = None) -> "Bound":
        return Bound(self, tape)


class Bound:
    """View of a ParameterSet as tensors; trainable ones are watched on ``tape``."""

    def __init__(self, params: ParameterSet, tape: GradTape | None):
        self.params = params
        self.tape = tape
        self._cache: dict[str, Tensor] = {}

    def __getitem__(self, id: str) -> Tensor:
        t = self._cache.get(id)
        if t is None:
            p = self.params[id]
            if self.tape is not None and p.trainable:
                t = self.tape.watch(p)
            else:
                t = Tensor(p.value, param_id=p.id)
            self._cache[id] = t
        return t

    def __contains__(self, id: str) -> bool:
        return id in self.params


def sgd_step(params: ParameterSet, grads: dict[str, np.ndarray], lr: float) -> None:
    """Plain gradient descent; refuses to touch a frozen parameter."""
    for pid, g in grads.items():
        p = params[pid]
        if not p.trainable:
            raise FrozenParameterError(f"gradient reached frozen parameter {pid!r}")
        if g.shape != p.value.shape:
            raise ShapeError(f"{pid}: gradient shape {g.shape} != {p.value.shape}")
        params.set_value(pid, p.value - lr * g)


def value_and_grad(f: Callable[[Bound], Tensor], params: ParameterSet) -> tuple[float, dict[str, np.ndarray]]:
    with GradTape() as tape:
        out = f(params.bind(tape))
    return out.item(), backward(tape, out)


def finite_diff_check(f: Callable[[Bound], Tensor], params: ParameterSet, eps: float = 1e-5, *,
                      max_coords: int | None = None, seed: int = 0) -> float:
    """Largest ``|analytic - numeric| / max(1, |numeric|)`` over trainable scalars.

    ``numeric`` is the central difference with step ``eps``. With
    ``max_coords`` set, that many coordinates are drawn uniformly (seeded)
    instead of visiting every trainable scalar.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    value, grads = value_and_grad(f, params)
    first = f(params.bind(None)).item()
    second = f(params.bind(None)).item()
    if not (first == second == value):
        raise NonDeterminismError(f"repeat evaluations differ: {value!r}, {first!r}, {second!r}")

    coords = [(p.id, i) for p in params if p.trainable for i in range(p.value.size)]
    if max_coords is not None and max_coords < len(coords):
        rng = np.random.default_rng(seed)
        picked = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[j] for j in sorted(picked)]

    worst = 0.0
    for pid, i in coords:
        base = params[pid].value
        flat = base.reshape(-1)
        plus, minus = flat.copy(), flat.copy()
        plus[i] += eps
        minus[i] -= eps
        try:
            params.set_value(pid, plus.reshape(base.shape))
            f_plus = f(params.bind(None)).item()
            params.set_value(pid, minus.reshape(base.shape))
            f_minus = f(params.bind(None)).item()
        finally:
            params[pid].value = base
        numeric = (f_plus - f_minus) / (2 * eps)
        analytic = float(grads[pid].reshape(-1)[i]) if pid in grads else 0.0
        worst = max(worst, abs(analytic - numeric) / max(1.0, abs(numeric)))
    return worst
