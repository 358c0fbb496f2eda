"""Differentiable tensor operations.

Layout conventions: images are NCHW, point features are N x C. Every op
returns a new :class:`Tensor`; inputs are never modified, except for the
running statistics passed explicitly to :func:`batch_norm`.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence, Union

import numpy as np

from ..errors import ConfigError, DataError, DimensionError
from .tensor import Tensor, as_tensor

ArrayLike = Union[Tensor, np.ndarray, float, int]


def _t(x: ArrayLike, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a = _t(a, b if isinstance(b, Tensor) else None)
    b = _t(b, a)
    out = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return Tensor._from_op(out, (a, b), backward, "add")


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a = _t(a, b if isinstance(b, Tensor) else None)
    b = _t(b, a)
    out = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return Tensor._from_op(out, (a, b), backward, "sub")


def neg(a: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(-g)

    return Tensor._from_op(-a.data, (a,), backward, "neg")


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a = _t(a, b if isinstance(b, Tensor) else None)
    b = _t(b, a)
    out = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return Tensor._from_op(out, (a, b), backward, "mul")


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a = _t(a, b if isinstance(b, Tensor) else None)
    b = _t(b, a)
    out = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * out / b.data, b.shape))

    return Tensor._from_op(out, (a, b), backward, "div")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def backward(g):
        a._accumulate(g * out)

    return Tensor._from_op(out, (a,), backward, "exp")


def log(a: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(g / a.data)

    return Tensor._from_op(np.log(a.data), (a,), backward, "log")


# ---------------------------------------------------------------------------
# Shape manipulation and reductions
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape

    def backward(g):
        a._accumulate(g.reshape(src))

    return Tensor._from_op(a.data.reshape(shape), (a,), backward, "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        a._accumulate(np.ascontiguousarray(g.transpose(inverse)))

    return Tensor._from_op(np.ascontiguousarray(a.data.transpose(axes)), (a,), backward, "transpose")


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, shape).copy())

    return Tensor._from_op(np.asarray(out), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[i] for i in axes]))
    if count == 0:
        raise DimensionError("mean over an empty extent")
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat of an empty sequence")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise DimensionError(f"concat shape mismatch: {ref} vs {t.shape} on axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, bounds, axis=ax)):
            if t.requires_grad:
                t._accumulate(np.ascontiguousarray(piece))

    return Tensor._from_op(out, tensors, backward, "concat")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _t(a), _t(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul needs (m,k)@(k,n), got {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return Tensor._from_op(out, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` over the last axis; leading axes are batch."""
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear expects last dim {weight.shape[1]}, got {x.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    out = x2 @ weight.data.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(lead + (weight.shape[0],))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, weight.shape[0])
        if x.requires_grad:
            x._accumulate((g2 @ weight.data).reshape(x.shape))
        if weight.requires_grad:
            weight._accumulate(g2.T @ x2)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g2.sum(axis=0))

    return Tensor._from_op(out, parents, backward, "linear")


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        x._accumulate(g * mask)

    return Tensor._from_op(np.where(mask, x.data, 0).astype(x.dtype), (x,), backward, "relu")


def relu6(x: Tensor) -> Tensor:
    d = x.data
    mask = (d > 0) & (d < 6)

    def backward(g):
        x._accumulate(g * mask)

    return Tensor._from_op(np.clip(d, 0, 6), (x,), backward, "relu6")


def hardswish(x: Tensor) -> Tensor:
    d = x.data
    out = d * np.clip(d + 3, 0, 6) / 6

    def backward(g):
        slope = np.where(d > 3, 1.0, np.where(d > -3, (2 * d + 3) / 6, 0.0))
        slope[d == 3] = 0.0
        x._accumulate((g * slope).astype(x.dtype, copy=False))

    return Tensor._from_op(out.astype(x.dtype, copy=False), (x,), backward, "hardswish")


def hardsigmoid(x: Tensor) -> Tensor:
    d = x.data
    mask = (d > -3) & (d < 3)

    def backward(g):
        x._accumulate(g * mask / 6)

    return Tensor._from_op((np.clip(d + 3, 0, 6) / 6).astype(x.dtype, copy=False), (x,), backward, "hardsigmoid")


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def backward(g):
        x._accumulate(g * out * (1.0 - out))

    return Tensor._from_op(out, (x,), backward, "sigmoid")


_ACTIVATIONS = {
    "relu": relu,
    "relu6": relu6,
    "hardswish": hardswish,
    "hardsigmoid": hardsigmoid,
    "sigmoid": sigmoid,
}


def activation(kind: str, x: Tensor) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ConfigError(f"unknown activation {kind!r}") from None
    return fn(x)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        soft = np.exp(out)
        x._accumulate(g - soft * g.sum(axis=axis, keepdims=True))

    return Tensor._from_op(out, (x,), backward, "log_softmax")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    e = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        x._accumulate(out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return Tensor._from_op(out, (x,), backward, "softmax")


# ---------------------------------------------------------------------------
# Convolution, normalization, pooling, resampling
# ---------------------------------------------------------------------------

def _conv_out(size: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
    groups: int = 1,
) -> Tensor:
    """2-D cross-correlation on NCHW input with OIkk weights.

    Computed as one batched GEMM per kernel offset over a strided view of the
    padded input, so no im2col buffer is kept alive for backward.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d needs NCHW input and OIkk weight, got {x.shape}, {weight.shape}")
    n, c, h, w = x.shape
    o, cg, kh, kw = weight.shape
    if groups < 1 or c % groups or o % groups:
        raise ConfigError(f"groups={groups} must divide in={c} and out={o} channels")
    if cg * groups != c:
        raise DimensionError(f"weight expects {cg * groups} input channels, input has {c}")
    if kh != kw or kh % 2 == 0:
        raise ConfigError(f"kernel must be square and odd-sized, got {kh}x{kw}")
    if bias is not None and bias.shape != (o,):
        raise DimensionError(f"bias shape {bias.shape} does not match {o} output channels")
    k = kh
    ho = _conv_out(h, k, stride, padding, dilation)
    wo = _conv_out(w, k, stride, padding, dilation)
    if ho < 1 or wo < 1:
        raise DimensionError("conv2d output would be empty")
    og = o // groups
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    depthwise = cg == 1 and og == 1
    wd = weight.data
    # per-offset weight slices must be contiguous for matmul to reach BLAS
    wk = np.ascontiguousarray(wd.transpose(2, 3, 0, 1))
    dtype = np.result_type(x.dtype, weight.dtype)

    def window(arr, i, j):
        r0, c0 = i * dilation, j * dilation
        return arr[:, :, r0:r0 + stride * (ho - 1) + 1:stride, c0:c0 + stride * (wo - 1) + 1:stride]

    out = np.zeros((n, o, ho, wo), dtype=dtype)
    for i in range(k):
        for j in range(k):
            xs = window(xp, i, j)
            if depthwise:
                out += wk[i, j, None, :, 0, None, None] * xs
            elif groups == 1:
                out += np.matmul(wk[i, j], xs.reshape(n, c, ho * wo)).reshape(n, o, ho, wo)
            else:
                xg = xs.reshape(n, groups, cg, ho * wo)
                wg = wk[i, j].reshape(groups, og, cg)
                out += np.matmul(wg, xg).reshape(n, o, ho, wo)
    if bias is not None:
        out += bias.data[None, :, None, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gw = np.zeros_like(wk) if weight.requires_grad else None
        gxp = np.zeros_like(xp) if x.requires_grad else None
        g3 = g.reshape(n, o, ho * wo)
        for i in range(k):
            for j in range(k):
                xs = window(xp, i, j)
                if depthwise:
                    if gw is not None:
                        gw[i, j, :, 0] = (g * xs).sum(axis=(0, 2, 3))
                    if gxp is not None:
                        window(gxp, i, j)[...] += wk[i, j, None, :, 0, None, None] * g
                elif groups == 1:
                    if gw is not None:
                        xr = xs.reshape(n, c, ho * wo)
                        gw[i, j] = np.matmul(g3, xr.transpose(0, 2, 1)).sum(axis=0)
                    if gxp is not None:
                        window(gxp, i, j)[...] += np.matmul(wk[i, j].T, g3).reshape(n, c, ho, wo)
                else:
                    gg = g3.reshape(n, groups, og, ho * wo)
                    if gw is not None:
                        xg = xs.reshape(n, groups, cg, ho * wo)
                        gw[i, j] = np.matmul(gg, xg.transpose(0, 1, 3, 2)).sum(axis=0).reshape(o, cg)
                    if gxp is not None:
                        wg = wk[i, j].reshape(groups, og, cg)
                        window(gxp, i, j)[...] += np.matmul(wg.transpose(0, 2, 1), gg).reshape(n, c, ho, wo)
        if gxp is not None:
            x._accumulate(gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp)
        if gw is not None:
            weight._accumulate(np.ascontiguousarray(gw.transpose(2, 3, 0, 1)))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))

    return Tensor._from_op(out, parents, backward, "conv2d")


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    eps: float = 1e-5,
    momentum: float = 0.1,
) -> Tensor:
    """Batch normalization over every axis except 1 (channels).

    In training mode ``running_mean``/``running_var`` are updated in place
    with the unbiased batch variance.
    """
    if x.ndim < 2 or x.shape[1] != gamma.shape[0]:
        raise DimensionError(f"batch_norm channel mismatch: input {x.shape}, {gamma.shape[0]} channels")
    if eps <= 0:
        raise ConfigError("batch_norm eps must be positive")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    d = x.data
    if training:
        m = d.size // d.shape[1]
        if m == 0:
            raise DataError("batch_norm in train mode got an empty batch")
        mu = d.mean(axis=axes)
        var = d.var(axis=axes)
        unbiased = var * (m / (m - 1)) if m > 1 else var
        running_mean *= 1 - momentum
        running_mean += momentum * mu.astype(running_mean.dtype)
        running_var *= 1 - momentum
        running_var += momentum * unbiased.astype(running_var.dtype)
    else:
        m = 0
        mu = running_mean.astype(d.dtype)
        var = running_var.astype(d.dtype)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (d - mu.reshape(bshape)) * inv.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def backward(g):
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).sum(axis=axes))
        if beta.requires_grad:
            beta._accumulate(g.sum(axis=axes))
        if x.requires_grad:
            gx = g * gamma.data.reshape(bshape)
            if training:
                s1 = gx.sum(axis=axes).reshape(bshape)
                s2 = (gx * xhat).sum(axis=axes).reshape(bshape)
                gx = (inv.reshape(bshape) / m) * (m * gx - s1 - xhat * s2)
            else:
                gx = gx * inv.reshape(bshape)
            x._accumulate(gx)

    return Tensor._from_op(out.astype(d.dtype, copy=False), (x, gamma, beta), backward, "batch_norm")


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean, NCHW -> NC11."""
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool needs NCHW, got {x.shape}")
    if x.shape[2] * x.shape[3] == 0:
        raise DimensionError("global_avg_pool over an empty spatial extent")
    return mean(x, axis=(2, 3), keepdims=True)


def max_pool2d(x: Tensor, kernel: int) -> Tensor:
    """Stride-1 'same' max pooling; out-of-bounds cells never win.

    Gradient goes to the first maximum of each window in row-major order.
    """
    if kernel % 2 == 0:
        raise ConfigError("max_pool2d kernel must be odd")
    n, c, h, w = x.shape
    p = kernel // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=-np.inf)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kernel, kernel), axis=(2, 3))
    win = win.reshape(n, c, h, w, kernel * kernel)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gp = np.zeros(xp.shape, dtype=g.dtype)
        for a in range(kernel):
            for b in range(kernel):
                hit = arg == a * kernel + b
                gp[:, :, a:a + h, b:b + w] += g * hit
        x._accumulate(gp[:, :, p:p + h, p:p + w])

    return Tensor._from_op(np.ascontiguousarray(out), (x,), backward, "max_pool2d")


def _interp_matrix(out_size: int, in_size: int, dtype) -> np.ndarray:
    """Rows hold half-pixel-centre bilinear weights (align_corners=False)."""
    mat = np.zeros((out_size, in_size), dtype=dtype)
    scale = in_size / out_size
    for dst in range(out_size):
        src = max((dst + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(math.floor(src)), in_size - 1)
        i1 = min(i0 + 1, in_size - 1)
        w1 = src - i0
        mat[dst, i0] += 1.0 - w1
        mat[dst, i1] += w1
    return mat


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if out_h < 1 or out_w < 1:
        raise DimensionError("bilinear_resize target size must be positive")
    n, c, h, w = x.shape
    if (h, w) == (out_h, out_w):
        return x
    rh = _interp_matrix(out_h, h, x.dtype)
    rw = _interp_matrix(out_w, w, x.dtype)
    out = np.matmul(np.matmul(rh, x.data), rw.T)

    def backward(g):
        x._accumulate(np.matmul(rh.T, np.matmul(g, rw)))

    return Tensor._from_op(out, (x,), backward, "bilinear_resize")


# ---------------------------------------------------------------------------
# Scatter / gather over row groups
# ---------------------------------------------------------------------------

class Segments:
    """Grouping of N source rows into ``num_targets`` buckets.

    Rows are visited in ascending source order inside each bucket, which
    makes every reduction deterministic. Build once, reuse for every
    scatter/gather with the same index.
    """

    __slots__ = ("index", "num_targets", "order", "counts", "nonempty", "starts")

    def __init__(self, index, num_targets: int):
        index = np.asarray(index, dtype=np.int64).reshape(-1)
        if index.size and (index.min() < 0 or index.max() >= num_targets):
            raise IndexError(f"scatter index out of range [0, {num_targets})")
        self.index = index
        self.num_targets = int(num_targets)
        self.order = np.argsort(index, kind="stable")
        self.counts = np.bincount(index, minlength=num_targets)
        self.nonempty = np.flatnonzero(self.counts)
        self.starts = (np.cumsum(self.counts) - self.counts)[self.nonempty]

    @classmethod
    def presorted(cls, index, num_targets: int, order: np.ndarray) -> "Segments":
        """Build from a known stable grouping order, skipping the sort."""
        seg = cls.__new__(cls)
        seg.index = np.asarray(index, dtype=np.int64).reshape(-1)
        seg.num_targets = int(num_targets)
        seg.order = np.asarray(order, dtype=np.int64)
        seg.counts = np.bincount(seg.index, minlength=num_targets)
        seg.nonempty = np.flatnonzero(seg.counts)
        seg.starts = (np.cumsum(seg.counts) - seg.counts)[seg.nonempty]
        return seg

    def reduce_sum(self, values: np.ndarray) -> np.ndarray:
        # add.at accumulates strictly in source order (reduceat does not)
        out = np.zeros((self.num_targets,) + values.shape[1:], dtype=values.dtype)
        np.add.at(out, self.index, values)
        return out


def _segments(index, num_targets: int) -> Segments:
    if isinstance(index, Segments):
        if index.num_targets != num_targets:
            raise DimensionError("precomputed segments disagree with num_targets")
        return index
    return Segments(index, num_targets)


def scatter_reduce(values: Tensor, index, num_targets: int, reduce: str = "mean") -> Tensor:
    """Reduce rows of ``values`` (N x C) into ``num_targets`` rows.

    Targets without contributors are 0 for both reductions. ``index`` may be
    an integer array or a precomputed :class:`Segments`.
    """
    seg = _segments(index, num_targets)
    if values.shape[0] != seg.index.size:
        raise DimensionError(f"{values.shape[0]} rows but {seg.index.size} indices")
    v = values.data.reshape(values.shape[0], -1)
    tail = values.shape[1:]
    if reduce == "mean":
        counts = np.maximum(seg.counts, 1).astype(v.dtype)[:, None]
        out = seg.reduce_sum(v) / counts

        def backward(g):
            g2 = g.reshape(num_targets, -1) / counts
            values._accumulate(g2[seg.index].reshape(values.shape))

    elif reduce == "max":
        out = np.zeros((num_targets, v.shape[1]), dtype=v.dtype)
        if seg.index.size:
            sorted_v = v[seg.order]
            seg_max = np.maximum.reduceat(sorted_v, seg.starts, axis=0)
            out[seg.nonempty] = seg_max
            # first row (lowest source id) attaining the max in each bucket
            seg_of_sorted = np.repeat(np.arange(seg.nonempty.size), seg.counts[seg.nonempty])
            pos = np.arange(sorted_v.shape[0])[:, None]
            hit = np.where(sorted_v == seg_max[seg_of_sorted], pos, sorted_v.shape[0])
            first = np.minimum.reduceat(hit, seg.starts, axis=0)
            winner = seg.order[first]  # (num_nonempty, C) source rows
        else:
            winner = np.zeros((0, v.shape[1]), dtype=np.int64)

        def backward(g):
            g2 = g.reshape(num_targets, -1)[seg.nonempty]
            gv = np.zeros_like(v)
            cols = np.broadcast_to(np.arange(v.shape[1]), winner.shape)
            gv[winner, cols] = g2
            values._accumulate(gv.reshape(values.shape))

    else:
        raise ConfigError(f"unknown reduction {reduce!r}")
    return Tensor._from_op(out.reshape((num_targets,) + tail), (values,), backward, f"scatter_{reduce}")


def gather(values: Tensor, index) -> Tensor:
    """Row lookup ``values[index]``; backward scatters additively."""
    num_rows = values.shape[0]
    if isinstance(index, Segments):
        seg = index
        if seg.num_targets != num_rows:
            raise DimensionError("precomputed segments disagree with the gathered row count")
        idx = seg.index
    else:
        idx = np.asarray(index, dtype=np.int64).reshape(-1)
        if idx.size and (idx.min() < 0 or idx.max() >= num_rows):
            raise IndexError(f"gather index out of range [0, {num_rows})")
        seg = None
    out = values.data[idx]

    def backward(g):
        s = seg if seg is not None else Segments(idx, num_rows)
        values._accumulate(s.reduce_sum(g.reshape(g.shape[0], -1)).reshape(values.shape))

    return Tensor._from_op(out, (values,), backward, "gather")


def max_over_set(values: Tensor, index, num_groups: int) -> Tensor:
    """Per-group maximum; empty groups yield 0."""
    return scatter_reduce(values, index, num_groups, reduce="max")
