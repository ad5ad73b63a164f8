"""Reverse-mode automatic differentiation over numpy arrays.

A :class:`Tensor` wraps an ndarray and, when produced by one of the ops in
this module, remembers its parents plus a closure that maps the output
gradient to parent gradients.  ``backward`` walks the graph in reverse
topological order.  Graphs are single-use: once backward has run, the
closures are released and a second backward raises.
"""
from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
import torch as _torch

DEFAULT_DTYPE = np.float32
_RECORDING = [True]


class NonFiniteError(FloatingPointError):
    """Raised when a forward op produces NaN or Inf."""


class GraphConsumedError(RuntimeError):
    """Raised on a second backward through the same graph."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = "leaf"
        self._consumed = False

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- operator sugar ------------------------------------------------
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

    def sum(self, axes=None, keepdims=False):
        return sum_over_axes(self, axes, keepdims)

    def mean(self, axes=None, keepdims=False):
        return mean_over_axes(self, axes, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    # -- backward ------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Populate ``.grad`` on every requires-grad leaf reachable from this scalar."""
        if self.data.size != 1 and grad is None:
            raise ValueError(f"backward needs a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise GraphConsumedError("backward through a graph that was already consumed")
        if not self.requires_grad:
            return
        order = _topo_order(self)
        if any(node._consumed for node in order if node._backward is not None or node._op != "leaf"):
            raise GraphConsumedError("backward through a graph that was already consumed")
        seed = np.ones_like(self.data) if grad is None else np.asarray(grad, dtype=self.data.dtype)
        grads: dict[int, np.ndarray] = {id(self): seed}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if node._op == "leaf":
                if g is not None and node.requires_grad:
                    g = g.astype(node.data.dtype, copy=False)
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            if g is None or node._backward is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in order:
            if node._op != "leaf":
                node._backward = None
                node._parents = ()
                node._consumed = True


def _topo_order(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


# ----------------------------------------------------------------------
# graph construction helpers
# ----------------------------------------------------------------------

def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if dtype is None:
        dtype = DEFAULT_DTYPE if arr.dtype.kind != "f" else arr.dtype
    return Tensor(arr.astype(dtype, copy=False))


def _check_finite(op: str, arr: np.ndarray) -> None:
    # a finite sum proves every element finite; a non-finite one may be overflow, so look closer
    with np.errstate(over="ignore"):
        total = np.sum(arr)
    if not np.isfinite(total) and not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite value produced by op '{op}'")


def _make(op: str, data: np.ndarray, parents: Iterable[Tensor], backward) -> Tensor:
    _check_finite(op, data)
    parents = tuple(parents)
    out = Tensor(data)
    out._op = op
    if _RECORDING[0] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


@contextmanager
def no_grad() -> Iterator[None]:
    """Run ops without recording a graph (inference)."""
    prev = _RECORDING[0]
    _RECORDING[0] = False
    try:
        yield
    finally:
        _RECORDING[0] = prev


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _coerce_pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    else:
        a, b = as_tensor(a), as_tensor(b)
    return a, b


# ----------------------------------------------------------------------
# elementwise arithmetic
# ----------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", out, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make("sub", out, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    out = a.data * b.data

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make("mul", out, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return _make("div", out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def square(a: Tensor) -> Tensor:
    return _make("square", a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def bw(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, 0.5 * g / safe, 0.0),)

    return _make("sqrt", out, (a,), bw)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make("log", out, (a,), lambda g: (g / a.data,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def asinh(a: Tensor) -> Tensor:
    x = a.data
    return _make("asinh", np.arcsinh(x), (a,), lambda g: (g / np.sqrt(1.0 + x * x),))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)
    return _make("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    # torch kernels: one pass over memory instead of several numpy temporaries
    xt = _torch.from_numpy(np.ascontiguousarray(a.data))
    out = _torch.nn.functional.leaky_relu(xt, slope).numpy()

    def backward(g):
        gt = _torch.from_numpy(np.ascontiguousarray(g, dtype=out.dtype))
        return (_torch.ops.aten.leaky_relu_backward(gt, xt, slope, False).numpy(),)

    return _make("leaky_relu", out, (a,), backward)


def clamp(a: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip values; gradient passes only where the input is inside the range."""
    out = np.clip(a.data, lo, hi)
    inside = np.ones(a.shape, dtype=bool)
    if lo is not None:
        inside &= a.data >= lo
    if hi is not None:
        inside &= a.data <= hi
    return _make("clamp", out, (a,), lambda g: (np.where(inside, g, 0.0),))


def complex_magnitude(re: Tensor, im: Tensor, eps: float = 0.0) -> Tensor:
    """sqrt(re^2 + im^2 + eps); the gradient is taken as zero at exact zeros."""
    re, im = _coerce_pair(re, im)
    mag = np.sqrt(re.data * re.data + im.data * im.data + eps)

    def bw(g):
        safe = np.where(mag > 0, mag, 1.0)
        scale = np.where(mag > 0, g / safe, 0.0)
        return (
            _unbroadcast(scale * re.data, re.shape) if re.requires_grad else None,
            _unbroadcast(scale * im.data, im.shape) if im.requires_grad else None,
        )

    return _make("complex_magnitude", mag, (re, im), bw)


# ----------------------------------------------------------------------
# reductions (accumulate in float64)
# ----------------------------------------------------------------------

def _norm_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(ax % ndim for ax in axes)


def sum_over_axes(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axes, a.ndim)
    out = np.sum(a.data, axis=axes, dtype=np.float64, keepdims=keepdims).astype(a.dtype)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)

    return _make("sum", np.asarray(out), (a,), bw)


def mean_over_axes(a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axes, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = np.mean(a.data, axis=axes, dtype=np.float64, keepdims=keepdims).astype(a.dtype)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).astype(a.dtype),)

    return _make("mean", np.asarray(out), (a,), bw)


def l2_norm(a: Tensor, axes=None) -> Tensor:
    """Euclidean norm over ``axes`` (all by default); zero vectors get zero gradient."""
    axes = _norm_axes(axes, a.ndim)
    sq = np.sum(np.square(a.data, dtype=np.float64), axis=axes, keepdims=True)
    norm = np.sqrt(sq)
    out = np.squeeze(norm, axis=axes).astype(a.dtype)

    def bw(g):
        g = np.expand_dims(g, axes)
        safe = np.where(norm > 0, norm, 1.0)
        return ((np.where(norm > 0, g / safe, 0.0) * a.data).astype(a.dtype),)

    return _make("l2_norm", np.asarray(out), (a,), bw)


# ----------------------------------------------------------------------
# shape ops
# ----------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return _make("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a: Tensor, idx) -> Tensor:
    out = a.data[idx]

    def bw(g):
        full = np.zeros_like(a.data)
        if _has_fancy(idx):
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return _make("getitem", np.array(out, copy=True), (a,), bw)


def _has_fancy(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(p, (list, np.ndarray)) for p in parts)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make("concat", out, tensors, bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make("stack", out, tensors, bw)


def split(a: Tensor, sections: int | Sequence[int], axis: int = -1) -> list[Tensor]:
    """Split along ``axis`` into equal sections (int) or at the given sizes."""
    n = a.shape[axis]
    if isinstance(sections, int):
        if n % sections:
            raise ValueError(f"cannot split axis of size {n} into {sections} equal parts")
        sizes = [n // sections] * sections
    else:
        sizes = list(sections)
        if sum(sizes) != n:
            raise ValueError(f"split sizes {sizes} do not sum to {n}")
    outs = []
    start = 0
    ax = axis % a.ndim
    for size in sizes:
        sl = [slice(None)] * a.ndim
        sl[ax] = slice(start, start + size)
        outs.append(getitem(a, tuple(sl)))
        start += size
    return outs


def broadcast_to(a: Tensor, shape) -> Tensor:
    out = np.broadcast_to(a.data, shape).copy()
    return _make("broadcast_to", out, (a,), lambda g: (_unbroadcast(g, a.shape),))


# ----------------------------------------------------------------------
# linear algebra / layers
# ----------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _make("matmul", out, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight (+ bias) over the last axis; weight is (in, out)."""
    x = as_tensor(x)
    if x.shape[-1] != weight.shape[0]:
        raise ValueError(f"linear: input width {x.shape[-1]} != weight rows {weight.shape[0]}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data
    if bias is not None:
        out = out + bias.data
    out = out.reshape(*lead, weight.shape[1])
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.reshape(-1, weight.shape[1])
        gx = (g2 @ weight.data.T).reshape(x.shape) if x.requires_grad else None
        gw = (x2.T @ g2) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        gb = g2.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return _make("linear", out, parents, bw)


def embedding_lookup(table: Tensor, indices) -> Tensor:
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"embedding index out of range for table with {table.shape[0]} rows")
    out = table.data[idx]

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _make("embedding_lookup", out, (table,), bw)


def _same_padding(size: int, k: int, stride: int) -> tuple[int, int, int]:
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return out, total // 2, total - total // 2


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    cols = [
        xp[:, i : i + stride * (oh - 1) + 1 : stride, j : j + stride * (ow - 1) + 1 : stride, :]
        for i in range(kh)
        for j in range(kw)
    ]
    return np.concatenate(cols, axis=-1)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """2-D convolution with 'same' padding on channels-last input.

    x is (B, H, W, Cin), weight is (kh, kw, Cin, Cout); with stride s the
    output is ceil(H/s) x ceil(W/s).  The arithmetic runs through torch's
    convolution kernels on zero-copy views of the numpy buffers; the graph,
    gradient routing and every other op stay in this module.
    ``conv2d_reference`` is the plain numpy version used to check it.
    """
    x = as_tensor(x)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[-1] != weight.shape[2]:
        raise ValueError(f"conv2d shape mismatch: input {x.shape}, weight {weight.shape}")
    B, H, W, C = x.shape
    kh, kw, _, O = weight.shape
    oh, pt, pb = _same_padding(H, kh, stride)
    ow, pl, pr = _same_padding(W, kw, stride)
    symmetric = pt == pb and pl == pr
    xin = x.data if symmetric else np.pad(x.data, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    tpad = [pt, pl] if symmetric else [0, 0]
    xt = _torch.from_numpy(np.ascontiguousarray(xin)).permute(0, 3, 1, 2)
    wt = _torch.from_numpy(np.ascontiguousarray(weight.data)).permute(3, 2, 0, 1)
    bt = None if bias is None else _torch.from_numpy(np.ascontiguousarray(bias.data))
    with _torch.no_grad():
        yt = _torch.nn.functional.conv2d(xt, wt, bt, stride=stride, padding=tpad)
    out = np.ascontiguousarray(yt.permute(0, 2, 3, 1).numpy())
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gt = _torch.from_numpy(np.ascontiguousarray(g, dtype=x.dtype)).permute(0, 3, 1, 2)
        mask = [x.requires_grad, weight.requires_grad, False]
        gx_t, gw_t, _ = _torch.ops.aten.convolution_backward(
            gt, xt, wt, None, [stride, stride], tpad, [1, 1], False, [0, 0], 1, mask
        )
        gx = gw = gb = None
        if gx_t is not None:
            gx = gx_t.permute(0, 2, 3, 1).numpy()
            if not symmetric:
                gx = gx[:, pt : pt + H, pl : pl + W, :]
            gx = np.ascontiguousarray(gx)
        if gw_t is not None:
            gw = np.ascontiguousarray(gw_t.permute(2, 3, 1, 0).numpy())
        if bias is not None and bias.requires_grad:
            gb = g.reshape(-1, O).sum(axis=0)
        return (gx, gw) if bias is None else (gx, gw, gb)

    return _make("conv2d", out, parents, bw)


def conv2d_reference(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None, stride: int = 1) -> np.ndarray:
    """Direct numpy im2col convolution with the same layout and padding as :func:`conv2d`."""
    B, H, W, C = x.shape
    kh, kw, _, O = weight.shape
    oh, pt, pb = _same_padding(H, kh, stride)
    ow, pl, pr = _same_padding(W, kw, stride)
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    out = cols.reshape(-1, kh * kw * C) @ weight.reshape(kh * kw * C, O)
    if bias is not None:
        out = out + bias
    return out.reshape(B, oh, ow, O)


# ----------------------------------------------------------------------
# gradient plumbing
# ----------------------------------------------------------------------

def stop_gradient(a: Tensor) -> Tensor:
    """Same value, no gradient path back to ``a``."""
    out = Tensor(a.data)
    out._op = "stop_gradient"
    return out


def straight_through(fn: Callable[[np.ndarray], np.ndarray], a: Tensor) -> Tensor:
    """Forward ``fn(a)``; backward treats the op as identity."""
    out = np.asarray(fn(a.data), dtype=a.dtype)
    if out.shape != a.shape:
        raise ValueError(f"straight_through needs a shape-preserving function, got {a.shape} -> {out.shape}")
    return _make("straight_through", out, (a,), lambda g: (g,))


def linear_map(
    a: Tensor,
    forward: Callable[[np.ndarray], np.ndarray],
    adjoint: Callable[[np.ndarray], np.ndarray],
    name: str = "linear_map",
) -> Tensor:
    """Apply a fixed linear operator given its forward and adjoint.

    Used for transforms (STFT, ISTFT, FIR filtering, echo) whose adjoint is
    cheaper to write down than to build from primitive ops.
    """
    out = np.asarray(forward(a.data))
    dtype = a.dtype

    def bw(g):
        return (np.asarray(adjoint(g), dtype=dtype).reshape(a.shape),)

    return _make(name, out.astype(dtype, copy=False), (a,), bw)
