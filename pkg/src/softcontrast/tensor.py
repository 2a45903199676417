"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation returns a new :class:`Tensor` that remembers its parents and a
closure propagating gradients back to them. Nodes receive a monotonically
increasing id on creation, so sorting reachable nodes by id gives a valid
topological order and no explicit graph object is needed.
"""
from __future__ import annotations

import itertools
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

_ids = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class DegenerateInputError(ValueError):
    """Input lies outside the domain where an operation is defined."""


class GraphError(RuntimeError):
    """Misuse of the differentiation graph (non-scalar loss, detached node, reuse)."""


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_id", "_op", "name")
    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._id = next(_ids)
        self._op = "leaf"
        self.name = name

    # construction helpers -------------------------------------------------
    @classmethod
    def _make(cls, data: np.ndarray, parents: Sequence[Tensor], op: str,
              backward: Callable[[np.ndarray], None]) -> Tensor:
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._id = next(_ids)
        out._op = op
        out.name = ""
        track = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = track
        if track:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
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
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    # backward -------------------------------------------------------------
    def backward(self) -> None:
        backward(self)

    # operator sugar -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / float(other))
        raise TypeError("Tensor division is only supported by scalars")

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)

    def relu(self):
        return relu(self)

    def log(self):
        return log(self)

    def exp(self):
        return exp(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from ``loss``.

    The graph is released afterwards; calling this twice on the same loss
    raises :class:`GraphError`.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss is detached from the graph (no parameter requires grad)")
    if loss._op != "leaf" and loss._backward is None:
        raise GraphError("graph already released by a previous backward call")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [loss]
    while stack:
        node = stack.pop()
        if node._id in seen:
            continue
        seen.add(node._id)
        order.append(node)
        stack.extend(node._parents)
    order.sort(key=lambda t: t._id, reverse=True)

    grads: dict[int, np.ndarray] = {loss._id: np.ones_like(loss.data)}
    for node in order:
        g = grads.pop(node._id, None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                node._accumulate(g)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._id in grads:
                grads[parent._id] = grads[parent._id] + pg
            else:
                grads[parent._id] = pg
        node._backward = None
        node._parents = ()


# elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}") from exc
    sa, sb = a.shape, b.shape
    return Tensor._make(data, (a, b), "add",
                        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}") from exc
    ad, bd = a.data, b.data
    return Tensor._make(data, (a, b), "mul",
                        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    return Tensor._make(a.data * c, (a,), "scale", lambda g: (g * c,))


def neg(a: Tensor) -> Tensor:
    return Tensor._make(-a.data, (a,), "neg", lambda g: (-g,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._make(np.where(mask, a.data, 0.0), (a,), "relu", lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._make(out, (a,), "exp", lambda g: (g * out,))


def log(a: Tensor, floor: float | None = None) -> Tensor:
    """Natural log; with ``floor`` the input is clamped below first (zero gradient there)."""
    x = a.data
    if floor is not None:
        keep = x >= floor
        x = np.where(keep, x, floor)
        return Tensor._make(np.log(x), (a,), "log", lambda g: (np.where(keep, g / x, 0.0),))
    return Tensor._make(np.log(x), (a,), "log", lambda g: (g / x,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return Tensor._make(out, (a,), "sqrt", lambda g: (g * 0.5 / out,))


# reductions and shape ------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def _bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._make(np.asarray(out, dtype=np.float64), (a,), "sum", _bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(tsum(a, axis, keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {old} as {shape}") from exc
    return Tensor._make(data, (a,), "reshape", lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else np.argsort(axes)
    return Tensor._make(np.transpose(a.data, axes), (a,), "transpose",
                        lambda g: (np.transpose(g, inv),))


def concat_columns(parts: Sequence[Tensor]) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1 or any(p.ndim != 2 for p in parts):
        raise ShapeError(f"concat_columns: need 2-D parts with equal rows, got {[p.shape for p in parts]}")
    widths = [p.shape[1] for p in parts]
    cuts = np.cumsum(widths)[:-1]
    return Tensor._make(np.concatenate([p.data for p in parts], axis=1), tuple(parts), "concat",
                        lambda g: tuple(np.split(g, cuts, axis=1)))


def slice_columns(a: Tensor, start: int, stop: int | None = None) -> Tensor:
    shape = a.shape

    def _bw(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return Tensor._make(a.data[:, start:stop].copy(), (a,), "slice", _bw)


def gather_columns(a: Tensor, index: np.ndarray) -> Tensor:
    """``out[i, c] = a[i, index[i, c]]`` for a 2-D ``a``."""
    index = np.asarray(index, dtype=np.intp)
    rows = np.arange(a.shape[0])[:, None]
    shape = a.shape

    def _bw(g):
        full = np.zeros(shape)
        np.add.at(full, (np.broadcast_to(rows, index.shape), index), g)
        return (full,)

    return Tensor._make(a.data[rows, index], (a,), "gather", _bw)


def rowwise_dot(a: Tensor, b: Tensor) -> Tensor:
    """Per-row inner product of two R×C tensors, returned as R×1."""
    if a.shape != b.shape:
        raise ShapeError(f"rowwise_dot: shapes differ {a.shape} vs {b.shape}")
    return tsum(mul(a, b), axis=1, keepdims=True)


# linear algebra ------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return Tensor._make(ad @ bd, (a, b), "matmul",
                        lambda g: (g @ bd.T if a.requires_grad else None,
                                   ad.T @ g if b.requires_grad else None))


# row-wise normalisations ----------------------------------------------------

def softmax_rows(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    return Tensor._make(p, (x,), "softmax",
                        lambda g: (p * (g - (g * p).sum(axis=1, keepdims=True)),))


def log_softmax_rows(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return Tensor._make(out, (x,), "log_softmax",
                        lambda g: (g - p * g.sum(axis=1, keepdims=True),))


def logsumexp_rows(x: Tensor) -> Tensor:
    """Stable log-sum-exp of each row, returned as R×1."""
    m = x.data.max(axis=1, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=1, keepdims=True)
    p = e / s
    return Tensor._make(m + np.log(s), (x,), "logsumexp", lambda g: (g * p,))


def l2_normalize_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"l2_normalize_rows expects a matrix, got {x.shape}")
    norms = np.sqrt((x.data ** 2).sum(axis=1, keepdims=True))
    if np.any(norms <= eps):
        raise DegenerateInputError("l2_normalize_rows: a row has norm <= 1e-12")
    y = x.data / norms

    def _bw(g):
        return ((g - y * (g * y).sum(axis=1, keepdims=True)) / norms,)

    return Tensor._make(y, (x,), "l2norm", _bw)


def batch_norm(x: Tensor, gamma: Tensor | None, beta: Tensor | None, eps: float = 1e-5):
    """Training-mode batch normalisation over rows.

    Returns the normalised tensor together with the batch mean and biased
    variance so the caller can update running statistics.
    """
    mu = x.data.mean(axis=0)
    var = x.data.var(axis=0)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    gd = gamma.data if gamma is not None else 1.0
    out = xhat * gd + (beta.data if beta is not None else 0.0)
    n = x.shape[0]

    def _bw(g):
        gx_hat = g * gd
        gx = inv / n * (n * gx_hat - gx_hat.sum(axis=0) - xhat * (gx_hat * xhat).sum(axis=0))
        grads = [gx]
        if gamma is not None:
            grads.append((g * xhat).sum(axis=0))
        if beta is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    parents = tuple(t for t in (x, gamma, beta) if t is not None)
    return Tensor._make(out, parents, "batchnorm", _bw), mu, var


def affine_normalize(x: Tensor, mean_: np.ndarray, var: np.ndarray, gamma: Tensor | None,
                     beta: Tensor | None, eps: float = 1e-5) -> Tensor:
    """Evaluation-mode batch normalisation with fixed statistics."""
    inv = 1.0 / np.sqrt(var + eps)
    out = add(mul(x, Tensor(inv)), Tensor(-mean_ * inv))
    if gamma is not None:
        out = mul(out, gamma)
    if beta is not None:
        out = add(out, beta)
    return out


# convolution ---------------------------------------------------------------

def _conv_out(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D convolution on channels-last input.

    x: B×H×W×C, weight: (k·k·C)×F laid out as (ki, kj, c) row-major, bias: F.
    Returns B×OH×OW×F.
    """
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects B×H×W×C input, got {x.shape}")
    b, h, w, c = x.shape
    kk = weight.shape[0] // c
    k = int(round(np.sqrt(kk)))
    if k * k * c != weight.shape[0]:
        raise ShapeError(f"conv2d: weight rows {weight.shape[0]} do not match k·k·{c}")
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x.data
    oh, ow = _conv_out(h, k, stride, pad), _conv_out(w, k, stride, pad)
    span_i, span_j = stride * (oh - 1) + 1, stride * (ow - 1) + 1
    # im2col as k·k strided copies: B×OH×OW×k×k×C
    patches = np.empty((b, oh, ow, k, k, c))
    for di in range(k):
        for dj in range(k):
            patches[:, :, :, di, dj, :] = xp[:, di:di + span_i:stride, dj:dj + span_j:stride, :]
    cols = patches.reshape(b * oh * ow, k * k * c)
    out = cols @ weight.data
    if bias is not None:
        out = out + bias.data
    out = out.reshape(b, oh, ow, -1)
    wd = weight.data

    def _bw(g):
        g2 = g.reshape(b * oh * ow, -1)
        gw = cols.T @ g2 if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wd.T).reshape(b, oh, ow, k, k, c)
            gxp = np.zeros_like(xp)
            for di in range(k):
                for dj in range(k):
                    gxp[:, di:di + span_i:stride, dj:dj + span_j:stride, :] += gcols[:, :, :, di, dj, :]
            gx = gxp[:, pad:pad + h, pad:pad + w, :] if pad else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out, parents, "conv2d", _bw)

