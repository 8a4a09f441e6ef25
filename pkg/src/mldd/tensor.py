"""Dense float arrays with reverse-mode automatic differentiation.

Only the operators the segmentation network needs are provided.  Every op
records its parents and a backward closure on the output tensor; node ids come
from a monotone counter, so sorting reachable nodes by descending id is a valid
reverse topological order for :func:`backward`.
"""

from __future__ import annotations

import contextlib
import itertools
import math
import os
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64
DEBUG = os.environ.get("MLDD_DEBUG", "") not in ("", "0")

_ids = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an op."""


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def set_default_dtype(dtype) -> None:
    """Switch the scalar type for newly created tensors (float64 or float32)."""
    global DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float64, np.float32):
        raise ValueError(f"unsupported dtype {dtype}")
    DTYPE = dtype.type


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_id", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=DTYPE)
        if arr.ndim > 4:
            raise ShapeError(f"rank {arr.ndim} > 4")
        if arr.ndim > 0 and min(arr.shape) < 1:
            raise ShapeError(f"all extents must be >= 1, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._id = next(_ids)
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__


def _not_scalar(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.full((1,), x))


def tensor_new(shape: Sequence[int], data: Sequence[float], requires_grad: bool = False) -> Tensor:
    """Build a tensor from a flat row-major buffer."""
    shape = tuple(int(s) for s in shape)
    if len(shape) > 4:
        raise ShapeError(f"rank {len(shape)} > 4")
    if any(s < 1 for s in shape):
        raise ShapeError(f"all extents must be >= 1, got {shape}")
    flat = np.asarray(data, dtype=DTYPE).reshape(-1)
    if flat.size != math.prod(shape):
        raise ShapeError(f"shape {shape} needs {math.prod(shape)} values, got {flat.size}")
    return Tensor(flat.reshape(shape), requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def _result(data: np.ndarray, parents: Sequence[Tensor], grad_fn: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._id = next(_ids)
    out.op = op
    if DEBUG and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite output from {op}")
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = grad_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor needing it."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss is not attached to any tensor requiring grad")

    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t._id in nodes:
            continue
        nodes[t._id] = t
        stack.extend(p for p in t._parents if p.requires_grad)

    grads: dict[int, np.ndarray] = {loss._id: np.ones_like(loss.data)}
    for nid in sorted(nodes, reverse=True):
        t = nodes[nid]
        g = grads.pop(nid, None)
        if g is None:
            continue
        if t._backward is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        t.grad = g
        for p, pg in zip(t._parents, t._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            if p._id in grads:
                grads[p._id] = grads[p._id] + pg
            else:
                grads[p._id] = pg


# ---------------------------------------------------------------- elementwise

def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    if a.data.ndim != b.data.ndim and a.size != 1 and b.size != 1:
        raise ShapeError(f"rank mismatch {a.shape} vs {b.shape}")
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from exc


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b)

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), grad_fn, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b)

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), grad_fn, "mul")


def elementwise(kind: str, a: Tensor, b: Tensor) -> Tensor:
    if kind == "add":
        return add(a, b)
    if kind == "mul":
        return mul(a, b)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def scale(x: Tensor, c: float) -> Tensor:
    return _result(x.data * c, (x,), lambda g: (g * c,), "scale")


def sum_all(x: Tensor) -> Tensor:
    return _result(np.array(x.data.sum()).reshape(1), (x,),
                   lambda g: (np.broadcast_to(g.reshape(()), x.shape).copy(),), "sum")


# ---------------------------------------------------------------- activations

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def _sigmoid_np(z: np.ndarray) -> np.ndarray:
    # split on sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid_np(x.data)
    return _result(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def activation(kind: str, x: Tensor) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def softmax_channels(x: Tensor) -> Tensor:
    _need_rank4(x, "softmax_channels")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _result(y, (x,), grad_fn, "softmax")


# ---------------------------------------------------------------- convolution

def _need_rank4(x: Tensor, op: str) -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"{op} expects an N,C,H,W tensor, got shape {x.shape}")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Zero-padded 2-D cross-correlation with bias."""
    _need_rank4(x, "conv2d")
    n, cin, h, wd = x.shape
    cout, wcin, kh, kw = w.shape
    if cin != wcin:
        raise ShapeError(f"conv2d: input has {cin} channels, kernel expects {wcin}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {b.shape} != ({cout},)")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1 or stride < 1:
        raise ShapeError(f"conv2d: non-positive output extent {ho}x{wo}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, : (ho - 1) * stride + 1 : stride,
                                                         : (wo - 1) * stride + 1 : stride]
    # cols: n, cin, ho, wo, kh, kw
    out = np.tensordot(cols, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data.reshape(1, cout, 1, 1)
    out = np.ascontiguousarray(out)

    def grad_fn(g):
        gx = gw = gb = None
        if w.requires_grad:
            gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            gcols = np.tensordot(g, w.data, axes=([1], [0]))  # n, ho, wo, cin, kh, kw
            gcols = gcols.transpose(0, 3, 1, 2, 4, 5)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + (ho - 1) * stride + 1 : stride,
                        j : j + (wo - 1) * stride + 1 : stride] += gcols[..., i, j]
            gx = gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return _result(out, parents, grad_fn, "conv2d")


# ---------------------------------------------------------------- resampling

def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row i holds the half-pixel bilinear weights of output i over the inputs."""
    m = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.maximum(src, 0.0)
    i0 = np.minimum(np.floor(src).astype(int), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    lam = src - i0
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - lam)
    np.add.at(m, (rows, i1), lam)
    return m


def upsample_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize with half-pixel centres (corners not aligned)."""
    _need_rank4(x, "upsample_bilinear")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"target extents must be positive, got {out_h}x{out_w}")
    h, w = x.shape[2:]
    if (h, w) == (out_h, out_w):
        return _result(x.data.copy(), (x,), lambda g: (g,), "upsample")
    mh = _interp_matrix(h, out_h)
    mw = _interp_matrix(w, out_w)
    out = np.matmul(np.matmul(mh, x.data), mw.T)

    def grad_fn(g):
        return (np.matmul(np.matmul(mh.T, g), mw),)

    return _result(out, (x,), grad_fn, "upsample")


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    if not xs:
        raise ShapeError("concat_channels needs at least one tensor")
    for t in xs:
        _need_rank4(t, "concat_channels")
    n, _, h, w = xs[0].shape
    for t in xs[1:]:
        if (t.shape[0], t.shape[2], t.shape[3]) != (n, h, w):
            raise ShapeError(f"concat_channels: {t.shape} does not match {xs[0].shape}")
    sizes = [t.shape[1] for t in xs]
    bounds = np.cumsum([0] + sizes)

    def grad_fn(g):
        return tuple(g[:, bounds[k] : bounds[k + 1]] for k in range(len(xs)))

    return _result(np.concatenate([t.data for t in xs], axis=1), tuple(xs), grad_fn, "concat")


def split_channels(x: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    _need_rank4(x, "split_channels")
    if sum(sizes) != x.shape[1]:
        raise ShapeError(f"split sizes {sizes} do not sum to {x.shape[1]}")
    out, start = [], 0
    for s in sizes:
        lo, hi = start, start + s

        def grad_fn(g, lo=lo, hi=hi):
            full = np.zeros_like(x.data)
            full[:, lo:hi] = g
            return (full,)

        out.append(_result(x.data[:, lo:hi].copy(), (x,), grad_fn, "split"))
        start = hi
    return out


# ---------------------------------------------------------------- pooling

def _max_along(x: Tensor, flat: np.ndarray, axis: int, out_shape, op: str) -> Tensor:
    # argmax picks the first (lowest index) maximum on ties
    idx = np.argmax(flat, axis=axis)
    vals = np.take_along_axis(flat, np.expand_dims(idx, axis), axis=axis)

    def grad_fn(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, np.expand_dims(idx, axis), g.reshape(vals.shape), axis=axis)
        return (gflat.reshape(x.shape),)

    return _result(vals.reshape(out_shape), (x,), grad_fn, op)


def global_pool(kind: str, x: Tensor) -> Tensor:
    """Adaptive pooling of every channel down to 1x1."""
    _need_rank4(x, "global_pool")
    n, c, h, w = x.shape
    if kind == "max":
        return _max_along(x, x.data.reshape(n, c, h * w), 2, (n, c, 1, 1), "global_max")
    if kind == "avg":
        inv = 1.0 / (h * w)
        return _result(x.data.mean(axis=(2, 3), keepdims=True), (x,),
                       lambda g: (np.broadcast_to(g * inv, x.shape).copy(),), "global_avg")
    raise ValueError(f"unknown pool kind {kind!r}")


def channel_reduce(kind: str, x: Tensor) -> Tensor:
    """Max or mean across channels, keeping a singleton channel axis."""
    _need_rank4(x, "channel_reduce")
    n, c, h, w = x.shape
    if kind == "max":
        return _max_along(x, x.data, 1, (n, 1, h, w), "channel_max")
    if kind == "mean":
        inv = 1.0 / c
        return _result(x.data.mean(axis=1, keepdims=True), (x,),
                       lambda g: (np.broadcast_to(g * inv, x.shape).copy(),), "channel_mean")
    raise ValueError(f"unknown reduce kind {kind!r}")


def avg_pool2d(x: Tensor, k: int, stride: int = 1, pad: int = 0) -> Tensor:
    """Local mean with a fixed divisor of k*k (padded zeros count)."""
    _need_rank4(x, "avg_pool2d")
    if k < 1 or k % 2 == 0:
        raise ValueError(f"avg_pool2d needs an odd kernel, got {k}")
    n, c, h, w = x.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"avg_pool2d: non-positive output extent {ho}x{wo}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    # separable box sum: exact for integer-valued inputs
    rows = sliding_window_view(xp, k, axis=2)[:, :, : (ho - 1) * stride + 1 : stride].sum(axis=-1)
    box = sliding_window_view(rows, k, axis=3)[:, :, :, : (wo - 1) * stride + 1 : stride].sum(axis=-1)
    out = box / (k * k)

    def grad_fn(g):
        gxp = np.zeros(xp.shape)
        gk = g / (k * k)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i : i + (ho - 1) * stride + 1 : stride,
                    j : j + (wo - 1) * stride + 1 : stride] += gk
        return (gxp[:, :, pad : pad + h, pad : pad + w] if pad else gxp,)

    return _result(out, (x,), grad_fn, "avg_pool2d")


# ---------------------------------------------------------------- checking

def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Largest relative error between autodiff and central differences.

    ``f`` is re-evaluated with each coordinate of each parameter nudged by
    +/- ``eps``; the error of a coordinate is |ad - fd| / max(1e-8, |ad| + |fd|).
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    for p in params:
        p.grad = None
    loss = f()
    backward(loss)
    worst = 0.0
    with no_grad():
        for p in params:
            ad = np.zeros_like(p.data) if p.grad is None else p.grad
            flat = p.data.reshape(-1)
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + eps
                fp = f().item()
                flat[k] = orig - eps
                fm = f().item()
                flat[k] = orig
                fd = (fp - fm) / (2.0 * eps)
                a = ad.reshape(-1)[k]
                err = abs(a - fd) / max(1e-8, abs(a) + abs(fd))
                worst = max(worst, err)
    return worst
