"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable op builds a :class:`Node` that holds its parents and a
closure mapping the output gradient to one gradient per parent.  Calling
:func:`backward` records the reachable graph into a :class:`Tape` (a
topologically ordered node list) and walks it in reverse exactly once.

There is no global state: a graph belongs to whatever thread built it, and
tensors that do not require grad never allocate nodes.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import ndtr

from .errors import ConfigError, DomainError, ShapeError

DIV_EPS = 1e-12
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Node:
    __slots__ = ("op", "parents", "backward_fn")

    def __init__(self, op: str, parents: tuple, backward_fn: Callable):
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn


class Tensor:
    """N-dimensional float64 array with an optional autodiff node."""

    __slots__ = ("data", "requires_grad", "grad", "node", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=np.float64) if not isinstance(data, np.ndarray) \
            else data.astype(np.float64, copy=False)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    # -- method sugar --------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def ln(self):
        return ln(self)

    def abs(self):
        return absolute(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, op: str, parents: tuple, backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = Node(op, parents, backward_fn)
    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def broadcast_shape(a: tuple, b: tuple) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a} with {b}") from exc


# ----------------------------------------------------------------------
# elementwise
# ----------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, "add", (a, b),
                   lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, "sub", (a, b),
                   lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        return scale(a, float(b))
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data

    def bw(g):
        return (unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _result(ad * bd, "mul", (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape)
    if np.any(np.abs(b.data) < DIV_EPS):
        raise DomainError("division by a value with magnitude below 1e-12")
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)

    return _result(out, "div", (a, b), bw)


def scale(a, c: float) -> Tensor:
    """Multiply by a python scalar (no graph edge for the scalar)."""
    a = as_tensor(a)
    c = float(c)
    return _result(a.data * c, "scalar_mul", (a,), lambda g: (g * c,))


def absolute(a) -> Tensor:
    a = as_tensor(a)
    s = np.sign(a.data)
    return _result(np.abs(a.data), "abs", (a,), lambda g: (g * s,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, "exp", (a,), lambda g: (g * out,))


def ln(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("ln of a non-positive value")
    ad = a.data
    return _result(np.log(ad), "ln", (a,), lambda g: (g / ad,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("sqrt of a negative value")
    out = np.sqrt(a.data)
    if np.any(out < DIV_EPS):
        raise DomainError("sqrt gradient undefined at 0")
    return _result(out, "sqrt", (a,), lambda g: (0.5 * g / out,))


def rsqrt(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("rsqrt of a non-positive value")
    out = 1.0 / np.sqrt(a.data)
    return _result(out, "rsqrt", (a,), lambda g: (-0.5 * g * out ** 3,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    m = a.data > 0
    return _result(np.where(m, a.data, 0.0), "relu", (a,), lambda g: (g * m,))


def gelu(a) -> Tensor:
    """Exact (erf) GELU."""
    a = as_tensor(a)
    x = a.data
    cdf = ndtr(x)

    def bw(g):
        return (g * (cdf + x * _INV_SQRT2PI * np.exp(-0.5 * x * x)),)

    return _result(x * cdf, "gelu", (a,), bw)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _result(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


_UNARY = {"abs": absolute, "exp": exp, "ln": ln, "relu": relu, "gelu": gelu}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(kind: str, a, b=None) -> Tensor:
    """Dispatch an elementwise op by name.

    Binary kinds: add, sub, mul, div, scalar-mul (``b`` a python number).
    Unary kinds: abs, exp, ln, relu, gelu.
    """
    if kind in _BINARY:
        return _BINARY[kind](a, b)
    if kind in ("scalar-mul", "scalar_mul"):
        return scale(a, b)
    if kind in _UNARY:
        return _UNARY[kind](a)
    raise ConfigError(f"unknown elementwise kind {kind!r}")


# ----------------------------------------------------------------------
# reductions and shape ops
# ----------------------------------------------------------------------

def _norm_axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _result(a.data.sum(axis=axes, keepdims=keepdims), "sum", (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return scale(sum(a, axes, keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _result(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), "transpose", (a,), lambda g: (g.transpose(inv),))


def swapaxes(a, i: int, j: int) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, tuple(axes))


def getitem(a, idx) -> Tensor:
    """Basic (slice/int) indexing; advanced indexing is not supported."""
    a = as_tensor(a)
    shape = a.shape

    def bw(g):
        out = np.zeros(shape)
        out[idx] = g
        return (out,)

    return _result(a.data[idx], "getitem", (a,), bw)


def take(a, indices, axis: int) -> Tensor:
    """Gather along ``axis`` with an integer index vector (repeats allowed)."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.intp)
    shape = a.shape
    axis = axis % a.ndim

    def bw(g):
        out = np.zeros(shape)
        np.add.at(np.moveaxis(out, axis, 0), indices, np.moveaxis(g, axis, 0))
        return (out,)

    return _result(np.take(a.data, indices, axis=axis), "take", (a,), bw)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ndim = tensors[0].ndim
    axis = axis % ndim
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    return _result(data, "concat", tuple(tensors),
                   lambda g: tuple(np.split(g, bounds, axis=axis)))


def pad_reflect(a, pad_h: tuple[int, int], pad_w: tuple[int, int]) -> Tensor:
    """Reflection padding of the last two axes (no edge repeat)."""
    a = as_tensor(a)
    h, w = a.shape[-2:]
    if pad_h == (0, 0) and pad_w == (0, 0):
        return a
    if max(pad_h) >= h or max(pad_w) >= w:
        raise ShapeError("reflection padding must be smaller than the extent")
    rows = np.pad(np.arange(h), pad_h, mode="reflect")
    cols = np.pad(np.arange(w), pad_w, mode="reflect")
    return take(take(a, rows, -2), cols, -1)


def upsample_nearest(a, factor: int = 2) -> Tensor:
    a = as_tensor(a)
    f = int(factor)
    out = np.repeat(np.repeat(a.data, f, axis=-2), f, axis=-1)
    h, w = a.shape[-2:]
    lead = a.shape[:-2]

    def bw(g):
        return (g.reshape(*lead, h, f, w, f).sum(axis=(-3, -1)),)

    return _result(out, "upsample_nearest", (a,), bw)


def avg_pool(a, factor: int) -> Tensor:
    """Non-overlapping ``factor``x``factor`` area average of the last two axes."""
    a = as_tensor(a)
    f = int(factor)
    h, w = a.shape[-2:]
    if h % f or w % f:
        raise ShapeError(f"extents {(h, w)} not divisible by pooling factor {f}")
    lead = a.shape[:-2]
    out = a.data.reshape(*lead, h // f, f, w // f, f).mean(axis=(-3, -1))

    def bw(g):
        return (np.repeat(np.repeat(g, f, axis=-2), f, axis=-1) / (f * f),)

    return _result(out, "avg_pool", (a,), bw)


def global_avgpool(a) -> Tensor:
    """Per-channel mean over the last two axes; keeps them as size-1 dims."""
    a = as_tensor(a)
    if a.ndim < 3:
        raise ShapeError("global_avgpool expects [..., C, H, W]")
    h, w = a.shape[-2:]
    shape = a.shape
    out = a.data.mean(axis=(-2, -1), keepdims=True)
    return _result(out, "global_avgpool", (a,),
                   lambda g: (np.broadcast_to(g / (h * w), shape),))


# ----------------------------------------------------------------------
# linear algebra and normalization
# ----------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul expects operands with at least 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"inner extents differ: {a.shape} @ {b.shape}")
    broadcast_shape(a.shape[:-2], b.shape[:-2])
    ad, bd = a.data, b.data

    def bw(g):
        ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _result(ad @ bd, "matmul", (a, b), bw)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, "softmax", (a,), bw)


def layer_norm(a, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Zero-mean, unit-variance normalization along ``axis`` (no affine)."""
    a = as_tensor(a)
    x = a.data
    mu = x.mean(axis=axis, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=axis, keepdims=True) + eps)
    xhat = xc * inv

    def bw(g):
        gm = g.mean(axis=axis, keepdims=True)
        gx = (g * xhat).mean(axis=axis, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _result(xhat, "layer_norm", (a,), bw)


# ----------------------------------------------------------------------
# convolution
# ----------------------------------------------------------------------

def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """[N, C, H, W] -> [N, C*kh*kw, H*W] with zero 'same' padding."""
    n, c, h, w = x.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = np.empty((n, c, kh, kw, h, w))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + h, j:j + w]
    return cols.reshape(n, c * kh * kw, h * w)


def _col2im(cols: np.ndarray, c: int, kh: int, kw: int, h: int, w: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`."""
    n = cols.shape[0]
    ph, pw = kh // 2, kw // 2
    cols = cols.reshape(n, c, kh, kw, h, w)
    xp = np.zeros((n, c, h + 2 * ph, w + 2 * pw))
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + h, j:j + w] += cols[:, :, i, j]
    return xp[:, :, ph:ph + h, pw:pw + w]


def conv2d(x, w, bias=None) -> Tensor:
    """Stride-1 convolution with zero 'same' padding and odd kernels.

    ``x`` is [C_in, H, W] or [N, C_in, H, W]; ``w`` is [C_out, C_in, kh, kw];
    ``bias`` is [C_out] or None.
    """
    x, w = as_tensor(x), as_tensor(w)
    kh, kw = w.shape[-2:]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigError("conv2d requires odd kernel extents")
    unbatched = x.ndim == 3
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != 4 or w.ndim != 4 or xd.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d shape mismatch: x {x.shape}, w {w.shape}")
    n, c, h, wd_ = xd.shape
    o = w.shape[0]
    wmat = w.data.reshape(o, c * kh * kw)
    cols = xd.reshape(n, c, h * wd_) if kh == kw == 1 else _im2col(xd, kh, kw)
    out = wmat @ cols  # [N, O, HW]
    parents = (x, w)
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data[None, :, None]
        parents = (x, w, bias)
    out = out.reshape(n, o, h, wd_)
    if unbatched:
        out = out[0]

    def bw(g):
        gm = (g[None] if unbatched else g).reshape(n, o, h * wd_)
        gx = gw = None
        if x.requires_grad:
            gcols = wmat.T @ gm
            gx = gcols.reshape(n, c, h, wd_) if kh == kw == 1 else _col2im(gcols, c, kh, kw, h, wd_)
            if unbatched:
                gx = gx[0]
        if w.requires_grad:
            gw = np.einsum("nop,nkp->ok", gm, cols, optimize=True).reshape(w.shape)
        grads = (gx, gw)
        if bias is not None:
            grads = grads + (gm.sum(axis=(0, 2)),)
        return grads

    return _result(out, "conv2d", parents, bw)


# ----------------------------------------------------------------------
# bilinear sampling
# ----------------------------------------------------------------------

_SNAP = 1e-9


def _axis_weights(g: np.ndarray, n: int):
    """Map normalized coords to (low index, high index, frac, in-range mask, d pix/d norm)."""
    p = (g + 1.0) * 0.5 * (n - 1)
    inside = (p >= 0.0) & (p <= n - 1)
    p = np.clip(p, 0.0, n - 1)
    r = np.rint(p)
    p = np.where(np.abs(p - r) < _SNAP, r, p)
    lo = np.floor(p).astype(np.intp)
    lo = np.minimum(lo, max(n - 2, 0))
    hi = np.minimum(lo + 1, n - 1)
    frac = p - lo
    return lo, hi, frac, inside, 0.5 * (n - 1)


def grid_sample_bilinear(x, coords) -> Tensor:
    """Bilinear sampling with align-corners normalized coordinates.

    ``x`` is [C, H, W] with ``coords`` [..., 2], or [B, C, H, W] with
    ``coords`` [B, ..., 2].  The last coordinate axis holds (x, y) in
    [-1, 1]; -1 is the first pixel centre and +1 the last.  Out-of-range
    coordinates clamp to the border (zero coordinate gradient there).
    Returns [C, ...] or [B, C, ...].
    """
    x, coords = as_tensor(x), as_tensor(coords)
    if np.isnan(coords.data).any():
        raise DomainError("sampling coordinates contain NaN")
    if coords.shape[-1] != 2:
        raise ShapeError("coords last axis must have extent 2")
    unbatched = x.ndim == 3
    xd = x.data[None] if unbatched else x.data
    cd = coords.data[None] if unbatched else coords.data
    if xd.ndim != 4 or cd.shape[0] != xd.shape[0]:
        raise ShapeError(f"grid_sample batch mismatch: x {x.shape}, coords {coords.shape}")
    bsz, ch, h, w = xd.shape
    pshape = cd.shape[1:-1]
    g = cd.reshape(bsz, -1, 2)
    x0, x1, fx, in_x, sx = _axis_weights(g[..., 0], w)
    y0, y1, fy, in_y, sy = _axis_weights(g[..., 1], h)

    flat = xd.reshape(bsz, ch, h * w).transpose(0, 2, 1)  # [B, HW, C]
    bidx = np.arange(bsz)[:, None]
    i00, i01, i10, i11 = y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1
    v00, v01, v10, v11 = (flat[bidx, i] for i in (i00, i01, i10, i11))  # [B, P, C]
    fxc, fyc = fx[..., None], fy[..., None]
    w00 = (1.0 - fxc) * (1.0 - fyc)
    w01 = fxc * (1.0 - fyc)
    w10 = (1.0 - fxc) * fyc
    w11 = fxc * fyc
    out = v00 * w00 + v01 * w01 + v10 * w10 + v11 * w11  # [B, P, C]
    out_data = out.transpose(0, 2, 1).reshape(bsz, ch, *pshape)
    if unbatched:
        out_data = out_data[0]

    def bw(grad):
        gd = grad[None] if unbatched else grad
        gp = gd.reshape(bsz, ch, -1).transpose(0, 2, 1)  # [B, P, C]
        gx = gc = None
        if x.requires_grad:
            base = (np.arange(bsz) * (h * w))[:, None]
            idx = np.concatenate([(base + i).reshape(-1) for i in (i00, i01, i10, i11)])
            vals = np.concatenate([(gp * wt).reshape(-1, ch) for wt in (w00, w01, w10, w11)])
            acc = np.stack([np.bincount(idx, vals[:, c], minlength=bsz * h * w)
                            for c in range(ch)])  # [C, B*HW]
            gx = acc.reshape(ch, bsz, h, w).transpose(1, 0, 2, 3)
            if unbatched:
                gx = gx[0]
        if coords.requires_grad:
            dpx = (v01 - v00) * (1.0 - fyc) + (v11 - v10) * fyc
            dpy = (v10 - v00) * (1.0 - fxc) + (v11 - v01) * fxc
            gcx = (gp * dpx).sum(axis=-1) * sx * in_x
            gcy = (gp * dpy).sum(axis=-1) * sy * in_y
            gc = np.stack([gcx, gcy], axis=-1).reshape(bsz, *pshape, 2)
            if unbatched:
                gc = gc[0]
        return gx, gc

    return _result(out_data, "grid_sample", (x, coords), bw)


# ----------------------------------------------------------------------
# backward
# ----------------------------------------------------------------------

class Tape:
    """Topologically ordered record of the graph behind one output."""

    def __init__(self, tensors: list[Tensor]):
        self.tensors = tensors

    @property
    def nodes(self) -> list[Node]:
        return [t.node for t in self.tensors if t.node is not None]

    def __len__(self) -> int:
        return len(self.tensors)

    @classmethod
    def record(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t.node is not None:
                for p in t.node.parents:
                    if p.requires_grad and id(p) not in seen:
                        stack.append((p, False))
        return cls(order)


def backward(loss: Tensor) -> Tape:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires-grad leaf."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return Tape([])
    tape = Tape.record(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(tape.tensors):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            t.grad = np.array(g, dtype=np.float64) if t.grad is None else t.grad + g
            continue
        pgrads = t.node.backward_fn(g)
        for p, pg in zip(t.node.parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            prev = grads.get(key)
            grads[key] = pg if prev is None else prev + pg
    return tape


# ----------------------------------------------------------------------
# finite differences
# ----------------------------------------------------------------------

def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)
    numeric = np.asarray(numeric, dtype=np.float64).reshape(-1)
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


def numeric_gradient(closure: Callable[[], float], array: np.ndarray,
                     indices: Iterable[int] | None = None, epsilon: float = 1e-5) -> np.ndarray:
    """Central differences of ``closure()`` w.r.t. entries of ``array`` (perturbed in place)."""
    flat = array.reshape(-1)
    if indices is None:
        indices = range(flat.size)
    out = []
    for i in indices:
        old = flat[i]
        flat[i] = old + epsilon
        fp = closure()
        flat[i] = old - epsilon
        fm = closure()
        flat[i] = old
        out.append((fp - fm) / (2.0 * epsilon))
    return np.asarray(out)


def _scalar(t) -> float:
    t = as_tensor(t)
    if t.size != 1:
        raise ShapeError(f"function must return a scalar, got shape {t.shape}")
    return float(t.data.reshape(-1)[0])


def finite_difference_check(f: Callable[[Tensor], Tensor], x, epsilon: float = 1e-5) -> float:
    """Max relative error between backprop and central differences of ``f`` at ``x``."""
    base = np.array(as_tensor(x).data, dtype=np.float64)
    leaf = Tensor(base.copy(), requires_grad=True)
    y = f(leaf)
    _scalar(y)
    backward(y)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(base)
    probe = base.copy()
    numeric = numeric_gradient(lambda: _scalar(f(Tensor(probe))), probe, epsilon=epsilon)
    return relative_error(analytic, numeric)
