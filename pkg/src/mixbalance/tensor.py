"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation returns a new :class:`Tensor` holding a
reference to its inputs and a closure mapping the output gradient to input
gradients. :func:`backward` orders the recorded graph into a :class:`Tape`
and replays it in reverse.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import kernels

DTYPES = (np.float32, np.float64)


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


class ShapeError(ValueError):
    pass


def _as_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, Tensor):
        data = data.data
    arr = np.asarray(data, dtype=dtype)
    if dtype is None and arr.dtype not in DTYPES:
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        if self.data.dtype not in DTYPES:
            raise TypeError(f"unsupported dtype {self.data.dtype}")
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.op = "leaf"

    # --- construction -------------------------------------------------

    @classmethod
    def _from_op(cls, data: np.ndarray, parents, backward, op: str) -> "Tensor":
        if not np.isfinite(data).all():
            raise NonFiniteError(f"{op} produced non-finite values")
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    def _lift(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.dtype))

    # --- introspection ------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # --- arithmetic -----------------------------------------------------

    def __add__(self, other):
        return add(self, self._lift(other))

    def __radd__(self, other):
        return add(self._lift(other), self)

    def __sub__(self, other):
        return sub(self, self._lift(other))

    def __rsub__(self, other):
        return sub(self._lift(other), self)

    def __mul__(self, other):
        return mul(self, self._lift(other))

    def __rmul__(self, other):
        return mul(self._lift(other), self)

    def __truediv__(self, other):
        return div(self, self._lift(other))

    def __rtruediv__(self, other):
        return div(self._lift(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return index_select(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def max(self, axis, keepdims=False):
        return tmax(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)


class Tape:
    """Topologically ordered record of the graph feeding a scalar result."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def record(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in reversed(node._parents):
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n.is_leaf]


def backward(loss: Tensor, tape: Tape | None = None) -> Tape:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor with requires_grad")
    if tape is None:
        tape = Tape.record(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return tape


# --- elementwise ----------------------------------------------------------


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_dtypes(a: Tensor, b: Tensor) -> None:
    if a.dtype != b.dtype:
        raise TypeError(f"dtype mismatch: {a.dtype} vs {b.dtype}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(a.data + b.data, (a, b), bw, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(a.data - b.data, (a, b), bw, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes(a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._from_op(a.data * b.data, (a, b), bw, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_dtypes(a, b)
    out = a.data / b.data

    def bw(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return Tensor._from_op(out, (a, b), bw, "div")


def neg(a: Tensor) -> Tensor:
    return Tensor._from_op(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, exponent: float) -> Tensor:
    p = a.dtype.type(exponent)

    def bw(g):
        return (g * p * a.data ** (p - 1),)

    return Tensor._from_op(a.data**p, (a,), bw, "pow")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g / a.data,), "log")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    one = x.dtype.type(1)
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, one / (one + e), e / (one + e)).astype(x.dtype, copy=False)
    return Tensor._from_op(out, (a,), lambda g: (g * out * (one - out),), "sigmoid")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = a.data * mask
    return Tensor._from_op(out, (a,), lambda g: (g * mask,), "relu")


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; the gradient passes only where the input lies inside."""
    mask = (a.data >= lo) & (a.data <= hi)
    out = np.clip(a.data, lo, hi).astype(a.dtype, copy=False)
    return Tensor._from_op(out, (a,), lambda g: (g * mask,), "clamp")


# --- reductions and shape ops ---------------------------------------------


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = np.asarray(a.data.sum(axis=axes, keepdims=keepdims))

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor._from_op(out, (a,), bw, "sum")


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    return tsum(a, axes, keepdims) / a.dtype.type(count)


def tmax(a: Tensor, axis, keepdims=False) -> Tensor:
    """Maximum along one axis; ties route the gradient to the first maximum."""
    axis = axis % a.ndim
    idx = np.expand_dims(a.data.argmax(axis=axis), axis)
    out = np.take_along_axis(a.data, idx, axis=axis)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        grad = np.zeros_like(a.data)
        np.put_along_axis(grad, idx, g, axis=axis)
        return (grad,)

    if not keepdims:
        out = np.squeeze(out, axis)
    return Tensor._from_op(out, (a,), bw, "max")


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return Tensor._from_op(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    out = a.data.transpose(axes)
    return Tensor._from_op(out, (a,), lambda g: (g.transpose(inv),), "transpose")


def index_select(a: Tensor, index) -> Tensor:
    """Gather rows (or any numpy basic/advanced index); backward scatter-adds."""
    out = a.data[index]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out)

    def bw(g):
        grad = np.zeros_like(a.data)
        np.add.at(grad, index, g)
        return (grad,)

    return Tensor._from_op(out, (a,), bw, "index")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    for t in tensors[1:]:
        _check_dtypes(tensors[0], t)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._from_op(out, tuple(tensors), bw, "concat")


# --- linear algebra -------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    _check_dtypes(a, b)

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor._from_op(a.data @ b.data, (a, b), bw, "matmul")


def log_softmax(logits: Tensor, axis: int = -1) -> Tensor:
    if logits.shape[axis] < 2:
        raise ShapeError("log_softmax needs at least two classes")
    if not np.isfinite(logits.data).all():
        raise NonFiniteError("log_softmax received non-finite logits")
    x = logits.data
    shifted = x - x.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    probs = np.exp(out)

    def bw(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return Tensor._from_op(out, (logits,), bw, "log_softmax")


# --- convolution and pooling ----------------------------------------------


def _pair(pad) -> tuple[int, int]:
    if isinstance(pad, int):
        return pad, pad
    lo, hi = pad
    return int(lo), int(hi)


def output_size(size: int, k: int, stride: int, pad=0, exact: bool = True) -> int:
    """Sliding-window output extent; ``exact`` rejects windows that don't tile."""
    lo, hi = _pair(pad)
    span = size + lo + hi - k
    if k < 1 or stride < 1:
        raise ShapeError(f"invalid window k={k} stride={stride}")
    if span < 0:
        raise ShapeError(f"window {k} larger than padded extent {size + lo + hi}")
    if exact and span % stride:
        raise ShapeError(
            f"non-exact tiling: ({size}+{lo + hi}-{k}) is not divisible by stride {stride}"
        )
    return span // stride + 1


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, pad=0, exact: bool = True) -> Tensor:
    """Cross-correlation of (N, C, H, W) input with (F, C, k, k) kernels.

    ``pad`` is symmetric or a (before, after) pair applied to both spatial
    axes. With ``exact=False`` trailing rows/cols that don't fill a window are
    dropped instead of raising.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError("conv2d expects 4-D input and kernel")
    n, c, h, w = x.shape
    f, kc, k, k2 = kernel.shape
    if kc != c:
        raise ShapeError(f"conv2d channel mismatch: input {c}, kernel {kc}")
    if k != k2:
        raise ShapeError("conv2d kernels must be square")
    _check_dtypes(x, kernel)
    lo, hi = _pair(pad)
    oh = output_size(h, k, stride, pad, exact)
    ow = output_size(w, k, stride, pad, exact)
    xp = x.data
    if lo or hi:
        xp = np.pad(xp, ((0, 0), (0, 0), (lo, hi), (lo, hi)))
    xp = np.ascontiguousarray(xp)
    cols = kernels.im2col(xp, k, stride, oh, ow)
    wmat = kernel.data.reshape(f, c * k * k)
    out = np.ascontiguousarray((wmat @ cols).reshape(f, n, oh, ow).transpose(1, 0, 2, 3))
    hp, wp = xp.shape[2:]

    def bw(g):
        g2d = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(f, n * oh * ow)
        gk = (g2d @ cols.T).reshape(kernel.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = np.ascontiguousarray(wmat.T @ g2d)
            gxp = kernels.col2im(gcols, n, c, hp, wp, k, stride, oh, ow)
            gx = gxp[:, :, lo : lo + h, lo : lo + w]
        return gx, gk

    return Tensor._from_op(out, (x, kernel), bw, "conv2d")


def max_pool2d(x: Tensor, k: int, stride: int | None = None) -> Tensor:
    stride = k if stride is None else stride
    n, c, h, w = x.shape
    oh, ow = output_size(h, k, stride), output_size(w, k, stride)
    out, idx = kernels.maxpool_forward(np.ascontiguousarray(x.data), k, stride, oh, ow)

    def bw(g):
        return (kernels.maxpool_backward(np.ascontiguousarray(g), idx, h, w, k, stride),)

    return Tensor._from_op(out, (x,), bw, "max_pool2d")


def avg_pool2d(x: Tensor, k: int, stride: int | None = None) -> Tensor:
    stride = k if stride is None else stride
    n, c, h, w = x.shape
    oh, ow = output_size(h, k, stride), output_size(w, k, stride)
    out = kernels.avgpool_forward(np.ascontiguousarray(x.data), k, stride, oh, ow)

    def bw(g):
        return (kernels.avgpool_backward(np.ascontiguousarray(g), h, w, k, stride),)

    return Tensor._from_op(out, (x,), bw, "avg_pool2d")


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, mean: np.ndarray,
               var: np.ndarray, eps: float, batch_stats: bool):
    """Per-channel normalisation over all axes but 1.

    Returns ``(out, batch_mean, batch_var)``; the batch moments are the biased
    estimates used for normalisation (None when ``batch_stats`` is False).
    """
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = [1] * x.ndim
    bshape[1] = x.shape[1]
    dt = x.dtype.type
    if batch_stats:
        mu = x.data.mean(axis=axes, keepdims=True)
        centered = x.data - mu
        v = (centered * centered).mean(axis=axes, keepdims=True)
    else:
        mu = mean.reshape(bshape).astype(x.dtype, copy=False)
        v = var.reshape(bshape).astype(x.dtype, copy=False)
        centered = x.data - mu
    inv_std = dt(1) / np.sqrt(v + dt(eps))
    xhat = centered * inv_std
    g_ = gamma.data.reshape(bshape)
    out = xhat * g_ + beta.data.reshape(bshape)
    m = x.data.size // x.shape[1]

    def bw(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gxhat = g * g_
        if batch_stats:
            gx = (inv_std / dt(m)) * (
                dt(m) * gxhat
                - gxhat.sum(axis=axes, keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True)
            )
        else:
            gx = gxhat * inv_std
        return gx, ggamma, gbeta

    result = Tensor._from_op(out, (x, gamma, beta), bw, "batch_norm")
    if batch_stats:
        return result, mu.reshape(-1), v.reshape(-1)
    return result, None, None


# --- gradient verification ------------------------------------------------


class GradientCheckError(AssertionError):
    pass


def gradient_check(fn: Callable[..., Tensor], point, h: float = 1e-6,
                   tol: float | None = None) -> float:
    """Compare backprop gradients of scalar ``fn`` with central differences.

    ``point`` is one array or a sequence of arrays; ``fn`` receives one f64
    tensor per array. Returns max |analytic - numeric| / max(1, |numeric|)
    over every coordinate. Raises :class:`GradientCheckError` when ``tol`` is
    given and exceeded.
    """
    single = isinstance(point, (np.ndarray, Tensor, float, int))
    arrays = [_as_array(p, np.float64).copy() for p in ([point] if single else point)]

    inputs = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*inputs)
    if out.data.size != 1:
        raise ShapeError("gradient_check needs a scalar-valued function")
    backward(out)

    def evaluate() -> float:
        val = float(fn(*[Tensor(a) for a in arrays]).data)
        if not np.isfinite(val):
            raise NonFiniteError("function value is non-finite")
        return val

    worst = 0.0
    for arr, t in zip(arrays, inputs):
        analytic = np.zeros_like(arr) if t.grad is None else t.grad
        flat = arr.reshape(-1)
        aflat = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = evaluate()
            flat[i] = orig - h
            fm = evaluate()
            flat[i] = orig
            numeric = (fp - fm) / (2 * h)
            err = abs(aflat[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    if tol is not None and worst > tol:
        raise GradientCheckError(f"max relative gradient error {worst:.3e} exceeds {tol:.1e}")
    return worst
