"""Dense tensors with a reverse-mode gradient tape over a closed op set.

Every op takes :class:`Tensor`, :class:`Parameter` or plain ``numpy`` arrays and
returns a new :class:`Tensor`.  When a :class:`GradTape` is active and at least
one input depends on a trainable parameter, the op is recorded so that
``tape.gradient(loss)`` can run the backward pass.

    >>> w = Parameter("w", np.ones((2, 2)))
    >>> with GradTape() as tape:
    ...     loss = sum_all(matmul(np.eye(2), w))
    >>> tape.gradient(loss)[w]
    array([[1., 1.],
           [1., 1.]])
"""

from __future__ import annotations

import contextvars
import math
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPES = {"f32": np.float32, "f64": np.float64}
GROUPS = ("backbone", "layer_norm", "visual_projection", "peft", "output_head", "embedding")
LAYER_NORM_EPS = 1e-5

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715


class DimensionError(ValueError):
    """Operand shapes do not conform for the requested op."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


class Tensor:
    __slots__ = ("data", "requires_grad", "param")

    def __init__(self, data, requires_grad: bool = False, param: "Parameter | None" = None):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self.param = param

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter:
    """A named, registry-owned array.

    ``data`` is replaced (never mutated in place) by the optimizer, so tensors
    captured on an earlier tape keep the values they were computed with.
    """

    __slots__ = ("key", "data", "trainable", "group", "__weakref__")

    def __init__(self, key: str, data, trainable: bool = True, group: str = "backbone"):
        if group not in GROUPS:
            raise ValueError(f"unknown parameter group {group!r}")
        self.key = key
        self.data = np.asarray(data)
        self.trainable = trainable
        self.group = group

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def leaf(self) -> Tensor:
        tape = _current_tape.get()
        return Tensor(self.data, requires_grad=self.trainable and tape is not None, param=self)

    def __repr__(self) -> str:
        flag = "trainable" if self.trainable else "frozen"
        return f"Parameter({self.key!r}, shape={self.shape}, {self.group}, {flag})"


_current_tape: contextvars.ContextVar["GradTape | None"] = contextvars.ContextVar("grad_tape", default=None)

Backward = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class GradTape:
    """Records ops inside a ``with`` block; one tape per training step."""

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], Backward]] = []
        self._leaves: dict[int, Tensor] = {}
        self._token = None

    def __enter__(self) -> "GradTape":
        self._token = _current_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _current_tape.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self._nodes)

    def _record(self, out: Tensor, parents: tuple[Tensor, ...], backward: Backward) -> None:
        for p in parents:
            if p.param is not None and p.requires_grad:
                self._leaves[id(p)] = p
        self._nodes.append((out, parents, backward))

    def contributions(self, loss: Tensor) -> list[tuple[Parameter, np.ndarray]]:
        """Per-use gradients: one entry for every time a trainable parameter entered the graph."""
        if loss.data.size != 1:
            raise DimensionError(f"gradient needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            return []
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for out, parents, backward in reversed(self._nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for p, pg in zip(parents, backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                k = id(p)
                if k in grads:
                    grads[k] = grads[k] + pg
                else:
                    grads[k] = pg
        if id(loss) in self._leaves:
            grads.setdefault(id(loss), np.ones_like(loss.data))
        return [(t.param, grads[k]) for k, t in self._leaves.items() if k in grads]

    def gradient(self, loss: Tensor, params: Iterable[Parameter] = ()) -> dict[Parameter, np.ndarray]:
        """Summed gradients keyed by parameter; ``params`` are filled with zeros when unreached."""
        out: dict[Parameter, np.ndarray] = {}
        for p, g in self.contributions(loss):
            out[p] = out[p] + g if p in out else g
        for p in params:
            if p.trainable and p not in out:
                out[p] = np.zeros_like(p.data)
        return out


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, Parameter):
        return x.leaf()
    return Tensor(np.asarray(x))


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward: Backward, op: str) -> Tensor:
    _check_finite(data, op)
    tape = _current_tape.get()
    if tape is not None and any(p.requires_grad for p in parents):
        out = Tensor(data, requires_grad=True)
        tape._record(out, parents, backward)
        return out
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise arithmetic -------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as e:
        raise DimensionError(f"add: cannot broadcast {a.shape} and {b.shape}") from e
    return _make(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError as e:
        raise DimensionError(f"sub: cannot broadcast {a.shape} and {b.shape}") from e
    return _make(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as e:
        raise DimensionError(f"mul: cannot broadcast {a.shape} and {b.shape}") from e

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(data, (a, b), backward, "mul")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = a.dtype.type(c) if a.dtype.kind == "f" else c
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


# -- linear algebra ---------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs operands with ndim >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dims disagree: {a.shape} x {b.shape}")
    data = np.matmul(a.data, b.data)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(data, (a, b), backward, "matmul")


def kron(a, b) -> Tensor:
    """Kronecker product: ``out[i*m + s, j*n + t] = a[i, j] * b[s, t]``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"kron needs 2-D operands, got {a.shape} and {b.shape}")
    (p, q), (m, n) = a.shape, b.shape
    data = np.kron(a.data, b.data)

    def backward(g):
        g4 = g.reshape(p, m, q, n)
        ga = np.einsum("isjt,st->ij", g4, b.data) if a.requires_grad else None
        gb = np.einsum("isjt,ij->st", g4, a.data) if b.requires_grad else None
        return ga, gb

    return _make(data, (a, b), backward, "kron")


# -- nonlinearities -----------------------------------------------------------


def gelu(x) -> Tensor:
    """GELU, tanh approximation."""
    x = as_tensor(x)
    xd = x.data
    x2 = xd * xd
    t = np.tanh(_GELU_C * xd * (1.0 + _GELU_K * x2))
    data = 0.5 * xd * (1.0 + t)

    def backward(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_K * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du),)

    return _make(data, (x,), backward, "gelu")


def tanh_act(x) -> Tensor:
    x = as_tensor(x)
    data = np.tanh(x.data)
    return _make(data, (x,), lambda g: (g * (1.0 - data * data),), "tanh")


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), backward, "softmax")


def layer_norm(x, gain, bias, eps: float = LAYER_NORM_EPS) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: last dim {d} vs gain {gain.shape}, bias {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    data = xhat * gain.data + bias.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        gb = g.sum(axis=lead) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gain.data
            gx = inv * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        return gx, gg, gb

    return _make(data, (x, gain, bias), backward, "layer_norm")


def softmax_cross_entropy(logits, targets, ignore_index: int = -100) -> Tensor:
    """Mean token NLL over positions whose target is not ``ignore_index``."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy expects [N, V] logits, got {logits.shape}")
    n, v = logits.shape
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.shape[0] != n:
        raise DimensionError(f"{n} logit rows but {targets.shape[0]} targets")
    valid = targets != ignore_index
    bad = valid & ((targets < 0) | (targets >= v))
    if bad.any():
        raise IndexError(f"target id {int(targets[bad][0])} outside vocabulary of size {v}")
    count = int(valid.sum())
    if count == 0:
        zero = np.zeros((), dtype=logits.dtype)
        return _make(zero, (logits,), lambda g: (np.zeros_like(logits.data),), "softmax_cross_entropy")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    rows = np.nonzero(valid)[0]
    loss = -logp[rows, targets[rows]].sum() / count
    data = np.asarray(loss, dtype=logits.dtype)

    def backward(g):
        grad = np.exp(logp)
        grad[rows, targets[rows]] -= 1.0
        grad[~valid] = 0.0
        return (grad * (g / count),)

    return _make(data, (logits,), backward, "softmax_cross_entropy")


# -- shape plumbing -----------------------------------------------------------


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        data = x.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"cannot reshape {x.shape} to {tuple(shape)}") from e
    return _make(data, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),), "transpose")


def concat(xs: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(x) for x in xs)
    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as e:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in ts]}") from e
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _make(data, ts, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def narrow(x, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice ``start:stop`` along ``axis``."""
    x = as_tensor(x)
    if not 0 <= start <= stop <= x.shape[axis]:
        raise DimensionError(f"narrow [{start}:{stop}] out of range for axis {axis} of {x.shape}")
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def backward(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return _make(x.data[index], (x,), backward, "narrow")


def take(x, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate in the backward pass."""
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.int64)
    n = x.shape[axis]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise IndexError(f"take: index out of range for axis of size {n}")
    data = np.take(x.data, idx, axis=axis)

    def backward(g):
        full = np.zeros_like(x.data)
        moved = np.moveaxis(full, axis, 0)
        gm = np.moveaxis(g, list(range(axis, axis + idx.ndim)), list(range(idx.ndim)))
        np.add.at(moved, idx, gm)
        return (full,)

    return _make(data, (x,), backward, "take")


def sum_all(x) -> Tensor:
    x = as_tensor(x)
    return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.full_like(x.data, g),), "sum")


# -- oracle -----------------------------------------------------------------


def finite_diff_grad(f: Callable[[Parameter], object], p: Parameter, h: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` with respect to every entry of ``p``."""
    if p.data.dtype != np.float64:
        raise ValueError("finite differences need a float64 parameter")
    base = p.data
    grad = np.zeros_like(base)
    for i in np.ndindex(base.shape):
        bumped = base.copy()
        bumped[i] = base[i] + h
        p.data = bumped
        up = _scalar(f(p))
        bumped = base.copy()
        bumped[i] = base[i] - h
        p.data = bumped
        down = _scalar(f(p))
        grad[i] = (up - down) / (2.0 * h)
    p.data = base
    return grad


def _scalar(v) -> float:
    if isinstance(v, Tensor):
        return float(v.data)
    return float(v)


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Max-norm relative error ``max|a-b| / max(max|a|, max|b|)``."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale_ = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0))
    diff = np.abs(a - b).max(initial=0.0)
    if scale_ == 0.0:
        return diff
    return diff / scale_
