"""Dense float64 arrays with tape-free reverse-mode differentiation.

Every operation on a :class:`Tensor` that involves at least one input with
``requires_grad`` records its parents and a closure mapping the output
gradient to input gradients. :func:`backward` walks that graph in reverse
topological order.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "NumericError",
    "Tensor",
    "as_tensor",
    "backward",
    "no_grad",
    "zero_grad",
    "concat",
    "stack",
    "conv2d",
    "avg_pool2d",
    "log_softmax",
    "softmax",
    "cross_entropy",
]


class NumericError(ArithmeticError):
    """Raised when a non-finite value appears in a forward or backward pass."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    if ndiff > 0:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.op = "leaf"
        self.name = name

    # -- construction helpers -------------------------------------------------
    @staticmethod
    def _result(data, parents: Sequence["Tensor"], backward_fn, op: str) -> "Tensor":
        data = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(data)):
            raise NumericError(f"non-finite value produced by '{op}'")
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.op = op
        out.name = None
        track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        out._backward = backward_fn if track else None
        return out

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
        if self.data.size != 1:
            raise ValueError(f"item() needs a single value, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # -- elementwise arithmetic ----------------------------------------------
    def __add__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def bw(g):
            return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

        return Tensor._result(a.data + b.data, (a, b), bw, "add")

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def bw(g):
            return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

        return Tensor._result(a.data - b.data, (a, b), bw, "sub")

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def bw(g):
            return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

        return Tensor._result(a.data * b.data, (a, b), bw, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def bw(g):
            return (
                _unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
            )

        return Tensor._result(a.data / b.data, (a, b), bw, "div")

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __neg__(self):
        a = self
        return Tensor._result(-a.data, (a,), lambda g: (-g,), "neg")

    def __pow__(self, p: float):
        a = self
        p = float(p)

        def bw(g):
            return (g * p * a.data ** (p - 1.0),)

        return Tensor._result(a.data**p, (a,), bw, "pow")

    def __matmul__(self, other):
        other = as_tensor(other)
        a, b = self, other

        def bw(g):
            return g @ b.data.T, a.data.T @ g

        return Tensor._result(a.data @ b.data, (a, b), bw, "matmul")

    def __getitem__(self, idx):
        a = self

        def bw(g):
            out = np.zeros_like(a.data)
            np.add.at(out, idx, g)
            return (out,)

        return Tensor._result(a.data[idx], (a,), bw, "getitem")

    # -- unary functions -------------------------------------------------------
    def exp(self):
        a = self
        with np.errstate(over="ignore"):
            y = np.exp(a.data)
        return Tensor._result(y, (a,), lambda g: (g * y,), "exp")

    def log(self):
        a = self
        with np.errstate(divide="ignore", invalid="ignore"):
            y = np.log(a.data)
        return Tensor._result(y, (a,), lambda g: (g / a.data,), "log")

    def sqrt(self):
        a = self
        with np.errstate(invalid="ignore"):
            y = np.sqrt(a.data)
        return Tensor._result(y, (a,), lambda g: (g * 0.5 / y,), "sqrt")

    def tanh(self):
        a = self
        y = np.tanh(a.data)
        return Tensor._result(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")

    def relu(self):
        # derivative at exactly 0 is taken as 0
        a = self
        mask = a.data > 0
        return Tensor._result(a.data * mask, (a,), lambda g: (g * mask,), "relu")

    def maximum(self, floor: float):
        """Elementwise ``max(x, floor)``; gradient flows only where ``x > floor``."""
        a = self
        mask = a.data > floor
        return Tensor._result(np.where(mask, a.data, floor), (a,), lambda g: (g * mask,), "maximum")

    def clip(self, lo: float, hi: float):
        a = self
        mask = (a.data >= lo) & (a.data <= hi)
        return Tensor._result(np.clip(a.data, lo, hi), (a,), lambda g: (g * mask,), "clip")

    def soft_clamp(self, c: float):
        """``c * tanh(x / c)``."""
        return (self * (1.0 / c)).tanh() * c

    # -- reductions and shape ------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        a = self

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape).copy(),)

        return Tensor._result(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw, "sum")

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod([self.shape[i] for i in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    def reshape(self, *shape):
        a = self
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Tensor._result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")

    def transpose(self, *axes):
        a = self
        if not axes:
            axes = tuple(reversed(range(a.ndim)))
        elif len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)
        return Tensor._result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")

    @property
    def T(self):
        return self.transpose()


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._result(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return Tensor._result(np.stack([t.data for t in tensors], axis=axis), tensors, bw, "stack")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    p = np.exp(y)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return Tensor._result(y, (x,), bw, "log_softmax")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return log_softmax(x, axis=axis).exp()


def cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Negative log-softmax at the integer ``labels``, one row per sample."""
    labels = np.asarray(labels, dtype=np.int64)
    logp = log_softmax(logits, axis=-1)
    picked = logp[np.arange(len(labels)), labels]
    if reduction == "none":
        return -picked
    if reduction == "sum":
        return -picked.sum()
    return -picked.mean()


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, padding: int = 0) -> Tensor:
    """Stride-1 2-D cross-correlation on NCHW input with OIkk weights."""
    x, w = as_tensor(x), as_tensor(w)
    kh, kw = w.shape[2], w.shape[3]
    p = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # N C H' W' kh kw
    out = np.tensordot(cols, w.data, axes=([1, 4, 5], [1, 2, 3]))  # N H' W' O
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    ho, wo = out.shape[2], out.shape[3]

    def bw(g):
        gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + ho, j : j + wo] += np.tensordot(w.data[:, :, i, j], g, axes=([0], [1])).transpose(1, 0, 2, 3)
        gx = gxp[:, :, p : p + x.shape[2], p : p + x.shape[3]] if p else gxp
        return gx, gw

    y = Tensor._result(out, (x, w), bw, "conv2d")
    if b is not None:
        y = y + as_tensor(b).reshape(1, -1, 1, 1)
    return y


def avg_pool2d(x: Tensor, k: int = 2) -> Tensor:
    x = as_tensor(x)
    n, c, h, w = x.shape
    ho, wo = h // k, w // k
    cropped = x.data[:, :, : ho * k, : wo * k]
    y = cropped.reshape(n, c, ho, k, wo, k).mean(axis=(3, 5))

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[:, :, : ho * k, : wo * k] = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
        return (gx,)

    return Tensor._result(y, (x,), bw, "avg_pool2d")


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor, accumulate: bool = True) -> dict[Tensor, np.ndarray]:
    """Propagate d(loss)/d(leaf) for every leaf reachable from ``loss``.

    Gradients are computed into a scratch map first and only added to the
    leaves' ``.grad`` buffers once the whole pass has succeeded.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            leaves[node] = g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if not np.all(np.isfinite(pg)):
                raise NumericError(f"non-finite gradient flowing out of '{node.op}'")
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    if accumulate:
        for leaf, g in leaves.items():
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)
            leaf.grad += g
    return leaves


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()
