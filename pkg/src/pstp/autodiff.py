"""Dense tensors with a reverse-mode gradient tape.

Every differentiable op records a node on the active :class:`Tape` when at
least one input requires a gradient.  Outside a ``with Tape():`` block ops
run eagerly and nothing is recorded, which is what inference uses.

All ops accept leading batch dimensions and follow numpy broadcasting.
"""
from __future__ import annotations

import contextvars
import math
from typing import Callable, Sequence

import numpy as np

from pstp.errors import ShapeError, TapeError

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "pstp_active_tape", default=None
)


class Tensor:
    """An n-dimensional float array that can take part in a gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "tape_node", "name")
    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.tape_node: _Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        if self.tape_node is None:
            raise TapeError("tensor was not produced on a gradient tape")
        self.tape_node.tape.backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # arithmetic sugar
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
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a: int, b: int):
        return swapaxes(self, a, b)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)


class _Node:
    __slots__ = ("tape", "out", "parents", "backward_fn", "op")

    def __init__(self, tape, out, parents, backward_fn, op):
        self.tape = tape
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op


class Tape:
    """Ordered record of primitive ops; backward walks it in reverse.

    Use as a context manager; ops executed inside the block are recorded.
    A tape can be walked backward once.  Call :meth:`reset` to reuse it.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._consumed = False
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def reset(self) -> None:
        for node in self.nodes:
            node.out.tape_node = None
        self.nodes = []
        self._consumed = False

    def record(self, out: Tensor, parents: Sequence, backward_fn, op: str) -> None:
        node = _Node(self, out, tuple(parents), backward_fn, op)
        out.tape_node = node
        self.nodes.append(node)

    def backward(self, loss: Tensor, seed: np.ndarray | None = None) -> None:
        if self._consumed:
            raise TapeError("backward() already called on this tape; reset() it first")
        if seed is None:
            if loss.data.size != 1:
                raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
            seed = np.ones_like(loss.data)
        self._consumed = True
        loss.grad = seed.astype(loss.dtype, copy=True)
        for node in reversed(self.nodes):
            g = node.out.grad
            if g is None:
                continue
            parent_grads = node.backward_fn(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not isinstance(parent, Tensor) or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.array(pg, dtype=parent.dtype, copy=True)
                else:
                    parent.grad = parent.grad + pg


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE.get()


def _result(data: np.ndarray, parents: Sequence, backward_fn: Callable, op: str) -> Tensor:
    tracked = any(isinstance(p, Tensor) and p.requires_grad for p in parents)
    tape = _ACTIVE_TAPE.get()
    out = Tensor(data, requires_grad=tracked and tape is not None)
    if out.requires_grad:
        tape.record(out, parents, backward_fn, op)
    return out


def _data(x, like: np.ndarray | None = None):
    if isinstance(x, Tensor):
        return x.data
    if isinstance(x, np.ndarray) and like is not None:
        return x.astype(like.dtype, copy=False)
    return x


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _shape_of(x) -> tuple[int, ...]:
    return np.shape(_data(x))


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    ref = a.data if isinstance(a, Tensor) else (b.data if isinstance(b, Tensor) else None)
    ad, bd = _data(a, ref), _data(b, ref)
    sa, sb = np.shape(ad), np.shape(bd)

    def backward(g):
        return unbroadcast(g, sa), unbroadcast(g, sb)

    return _result(np.add(ad, bd), (a, b), backward, "add")


def sub(a, b) -> Tensor:
    ref = a.data if isinstance(a, Tensor) else (b.data if isinstance(b, Tensor) else None)
    ad, bd = _data(a, ref), _data(b, ref)
    sa, sb = np.shape(ad), np.shape(bd)

    def backward(g):
        return unbroadcast(g, sa), unbroadcast(-g, sb)

    return _result(np.subtract(ad, bd), (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    ref = a.data if isinstance(a, Tensor) else (b.data if isinstance(b, Tensor) else None)
    ad, bd = _data(a, ref), _data(b, ref)
    sa, sb = np.shape(ad), np.shape(bd)

    def backward(g):
        ga = unbroadcast(g * bd, sa) if isinstance(a, Tensor) and a.requires_grad else None
        gb = unbroadcast(g * ad, sb) if isinstance(b, Tensor) and b.requires_grad else None
        return ga, gb

    return _result(np.multiply(ad, bd), (a, b), backward, "mul")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    y = np.where(mask, x.data, 0.0).astype(x.dtype, copy=False)
    return _result(y, (x,), lambda g: (g * mask,), "relu")


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _result(y, (x,), lambda g: (g * y,), "exp")


def square(x: Tensor) -> Tensor:
    return _result(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


# ------------------------------------------------------------------- linear


def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes.

    >>> matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data
    array([[11.]])
    """
    ad, bd = _data(a), _data(b)
    if np.ndim(ad) < 2 or np.ndim(bd) < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {np.shape(ad)} and {np.shape(bd)}")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(
            f"matmul inner dimensions differ: {tuple(ad.shape)} @ {tuple(bd.shape)}"
        )
    sa, sb = ad.shape, bd.shape

    def backward(g):
        ga = gb = None
        if isinstance(a, Tensor) and a.requires_grad:
            ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), sa)
        if isinstance(b, Tensor) and b.requires_grad:
            gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, sb)
        return ga, gb

    return _result(ad @ bd, (a, b), backward, "matmul")


# ------------------------------------------------------------------- shapes


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        y = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {src} to {tuple(shape)}") from exc
    return _result(y, (x,), lambda g: (g.reshape(src),), "reshape")


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    return _result(np.swapaxes(x.data, a, b), (x,), lambda g: (np.swapaxes(g, a, b),), "swapaxes")


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    y = np.broadcast_to(x.data, shape)
    return _result(y, (x,), lambda g: (unbroadcast(g, src),), "broadcast_to")


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = list(xs)
    if not xs:
        raise ShapeError("concat of an empty sequence")
    datas = [_data(x) for x in xs]
    sizes = [d.shape[axis] for d in datas]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _result(np.concatenate(datas, axis=axis), xs, backward, "concat")


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    datas = [_data(x) for x in xs]

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _result(np.stack(datas, axis=axis), xs, backward, "stack")


def batch_gather(x: Tensor, idx: np.ndarray) -> Tensor:
    """Pick entries along axis ``idx.ndim - 1`` independently per leading index.

    ``idx`` has shape ``x.shape[:n] + (k,)`` and the result has shape
    ``x.shape[:n] + (k,) + x.shape[n + 1:]``.  Gradients scatter back into the
    picked positions only; everything else receives an exact zero.
    """
    idx = np.asarray(idx)
    if idx.dtype.kind not in "iu":
        raise TypeError("gather indices must be integers")
    n = idx.ndim - 1
    if tuple(idx.shape[:n]) != tuple(x.shape[:n]):
        raise ShapeError(f"gather index shape {idx.shape} does not match leading dims of {x.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[n]):
        raise IndexError(f"gather index out of range for axis of size {x.shape[n]}")
    lead = np.indices(idx.shape, sparse=True)[:n]
    key = tuple(lead) + (idx,)
    src = x.shape

    def backward(g):
        gx = np.zeros(src, dtype=g.dtype)
        np.add.at(gx, key, g)
        return (gx,)

    return _result(x.data[key], (x,), backward, "gather")


# --------------------------------------------------------------- reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    src = x.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, src),)

    return _result(x.data.sum(axis=axes, keepdims=keepdims), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    count = 1
    for a in axes:
        count *= x.shape[a]
    if count == 0:
        raise ShapeError(f"mean over an empty axis of shape {x.shape}")
    src = x.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, src),)

    return _result(x.data.mean(axis=axes, keepdims=keepdims), (x,), backward, "mean")


def mean_pool(x: Tensor, axis: int = 0) -> Tensor:
    """Arithmetic mean along ``axis``, keeping it as a length-1 axis."""
    if x.shape[axis] == 0:
        raise ShapeError(f"cannot pool over empty axis {axis} of {x.shape}")
    return mean(x, axis=axis, keepdims=True)


# --------------------------------------------------------- softmax & losses


def _softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, computed with max-subtraction."""
    if x.shape[-1] < 1:
        raise ShapeError("softmax over an empty axis")
    y = _softmax_np(x.data)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (x,), backward, "softmax")


softmax_lastdim = softmax


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def backward(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _result(y, (x,), backward, "log_softmax")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits).

    ``logits`` is ``[C]`` with a scalar label, or ``[B, C]`` with ``B`` labels.
    """
    labels = np.asarray(labels)
    n_class = logits.shape[-1]
    if labels.dtype.kind not in "iu":
        raise TypeError("labels must be integers")
    if labels.size and (labels.min() < 0 or labels.max() >= n_class):
        raise ValueError(f"label out of range [0, {n_class})")
    single = logits.ndim == 1
    z = logits.data[None] if single else logits.data
    lab = labels.reshape(-1)
    if z.shape[0] != lab.shape[0]:
        raise ShapeError(f"{z.shape[0]} logit rows but {lab.shape[0]} labels")
    z = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    rows = np.arange(z.shape[0])
    loss = (lse - z[rows, lab]).mean()
    probs = np.exp(z - lse[:, None])

    def backward(g):
        grad = probs.copy()
        grad[rows, lab] -= 1.0
        grad *= g / z.shape[0]
        return (grad[0] if single else grad,)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "cross_entropy")


# --------------------------------------------------------------- attention


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, scale_dim: int | None = None):
    """Projection-free attention ``softmax(q k^T / sqrt(d)) v``.

    Returns ``(out, weights)``.  ``scale_dim`` defaults to the key width.
    """
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"query width {q.shape[-1]} != key width {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"{k.shape[-2]} keys but {v.shape[-2]} values")
    d = scale_dim or q.shape[-1]
    logits = matmul(q, swapaxes(k, -1, -2)) * (1.0 / math.sqrt(d))
    weights = softmax(logits)
    return matmul(weights, v), weights


# ---------------------------------------------------------- gradient check


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor | np.ndarray, h: float = 1e-3) -> float:
    """Largest relative gap between tape gradients and central differences.

    The error per element is ``|ga - gn| / max(1e-8, |ga| + |gn|)``.
    """
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    x.requires_grad = True
    x.grad = None
    with Tape() as tape:
        out = f(x)
    if out.data.size != 1:
        raise ShapeError(f"grad_check needs a scalar function, got shape {out.shape}")
    tape.backward(out)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x).data)
        flat[i] = orig - h
        fm = float(f(x).data)
        flat[i] = orig
        nflat[i] = (fp - fm) / (2.0 * h)
    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom)) if numeric.size else 0.0

