"""Differentiable primitives.

Spatial ops accept either a single ``C x H x W`` tensor or a batch
``B x C x H x W``; the batch axis is just carried through.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DimensionError, Tensor, as_tensor, grad_enabled, make_result

LEAKY_SLOPE = 0.01


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _binary(a, b):
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


# elementwise arithmetic -------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _binary(a, b)
    return make_result(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _binary(a, b)
    return make_result(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _binary(a, b)
    return make_result(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _binary(a, b)
    out = a.data / b.data
    return make_result(
        out, (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def neg(x: Tensor) -> Tensor:
    return make_result(-x.data, (x,), lambda g: (-g,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_result(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return make_result(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return make_result(out, (x,), lambda g: (g * 0.5 / out,))


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip into ``[lo, hi]``; gradient is zero outside the interval."""
    inside = (x.data >= lo) & (x.data <= hi)
    out = np.clip(x.data, lo, hi).astype(x.dtype, copy=False)
    return make_result(out, (x,), lambda g: (g * inside,))


# activations -------------------------------------------------------------


def sigmoid(x: Tensor) -> Tensor:
    out = (0.5 * (1.0 + np.tanh(0.5 * x.data))).astype(x.dtype, copy=False)
    return make_result(out, (x,), lambda g: (g * out * (1.0 - out),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(x.data * mask, (x,), lambda g: (g * mask,))


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    if not 0.0 <= slope < 1.0:
        raise ValueError(f"leaky slope must lie in [0, 1), got {slope}")
    xd = x.data
    out = np.maximum(xd, xd * xd.dtype.type(slope))  # valid because slope < 1
    return make_result(out, (x,), lambda g: (np.where(xd >= 0, g, g * g.dtype.type(slope)),))


# reductions and shape ops -----------------------------------------------


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return make_result(np.asarray(out, dtype=x.dtype), (x,), rule)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(x: Tensor, shape) -> Tensor:
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    inverse = np.argsort(axes)
    return make_result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def flatten(x: Tensor) -> Tensor:
    """Row-major flatten to 1-D."""
    return reshape(x, (x.data.size,))


def flatten_batch(x: Tensor) -> Tensor:
    """Flatten every axis but the leading batch axis."""
    return reshape(x, (x.shape[0], -1))


def unflatten(x: Tensor, shape) -> Tensor:
    if int(np.prod(shape)) != x.data.size:
        raise DimensionError(f"cannot unflatten {x.data.size} values into {tuple(shape)}")
    return reshape(x, shape)


def concat_last_axis(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[:-1] != b.shape[:-1]:
        raise DimensionError(f"leading dims differ: {a.shape} vs {b.shape}")
    split = a.shape[-1]
    out = np.concatenate([a.data, b.data], axis=-1)
    return make_result(out, (a, b), lambda g: (g[..., :split], g[..., split:]))


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel mean over the two trailing spatial axes."""
    if x.ndim not in (3, 4):
        raise DimensionError(f"global_avg_pool expects C x H x W (optionally batched), got {x.shape}")
    return mean(x, axis=(-2, -1))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _binary(a, b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} @ {b.shape}")

    def rule(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if b.ndim > 1 else np.multiply.outer(g, b.data)
        if a.ndim > 1:
            gb = np.swapaxes(a.data, -1, -2) @ g
        else:
            gb = np.multiply.outer(a.data, g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return make_result(a.data @ b.data, (a, b), rule)


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``weight @ x + bias`` over the last axis of ``x``."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"dense: input {x.shape} does not match weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise DimensionError(f"dense: bias {bias.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T + bias.data

    def rule(g):
        gx = g @ wd
        g2 = g.reshape(-1, g.shape[-1])
        gw = g2.T @ xd.reshape(-1, xd.shape[-1])
        return gx, gw, g2.sum(axis=0)

    return make_result(out, (x, weight, bias), rule)


# convolution and pooling ------------------------------------------------


def _batched(x: Tensor) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x.data[None], True
    if x.ndim == 4:
        return x.data, False
    raise DimensionError(f"expected C x H x W or B x C x H x W, got {x.shape}")


def im2col_3x3(xb: np.ndarray) -> np.ndarray:
    """``B x C x H x W`` -> ``B x (C*9) x (H*W)`` patches of the zero-padded input."""
    b, c, h, w = xb.shape
    xp = np.pad(xb, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # B C H W 3 3
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(b, c * 9, h * w)


def col2im_3x3(cols: np.ndarray, shape: tuple[int, int, int, int]) -> np.ndarray:
    b, c, h, w = shape
    cols = cols.reshape(b, c, 3, 3, h, w)
    xp = np.zeros((b, c, h + 2, w + 2), dtype=cols.dtype)
    for kh in range(3):
        for kw in range(3):
            xp[:, :, kh:kh + h, kw:kw + w] += cols[:, :, kh, kw]
    return xp[:, :, 1:-1, 1:-1]


def conv2d_same(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """3x3 convolution (cross-correlation), stride 1, zero "same" padding."""
    xb, squeeze = _batched(x)
    if kernel.ndim != 4 or kernel.shape[2:] != (3, 3):
        raise DimensionError(f"kernel must be C_out x C_in x 3 x 3, got {kernel.shape}")
    c_out, c_in = kernel.shape[:2]
    if xb.shape[1] != c_in:
        raise DimensionError(f"input has {xb.shape[1]} channels, kernel expects {c_in}")
    if bias.shape != (c_out,):
        raise DimensionError(f"bias must have shape ({c_out},), got {bias.shape}")
    b, _, h, w = xb.shape
    cols = im2col_3x3(xb)
    wmat = kernel.data.reshape(c_out, c_in * 9)
    out = (wmat @ cols + bias.data[:, None]).reshape(b, c_out, h, w)
    if squeeze:
        out = out[0]

    def rule(g):
        g = g.reshape(b, c_out, h * w)
        gk = np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape)
        gb = g.sum(axis=(0, 2))
        gx = None
        if x.requires_grad:
            gx = col2im_3x3(wmat.T @ g, xb.shape)
            if squeeze:
                gx = gx[0]
        return gx, gk, gb

    return make_result(out, (x, kernel, bias), rule)


def _pool_max(xb: np.ndarray, pool_h: int, pool_w: int, want_index: bool):
    """Window maxima, plus (optionally) the flat index of each window's first maximum.

    Reduces across window columns, then across window rows; taking the first
    winner at each stage yields the first maximum in row-major window order.
    Offsets are visited in increasing order, so a running ``maximum`` of the
    offset at each strict improvement tracks the winner.
    """
    b, c, h, w = xb.shape
    ho, wo = h // pool_h, w // pool_w
    cols = xb[:, :, :ho * pool_h, :wo * pool_w].reshape(b, c, ho * pool_h, wo, pool_w)
    row_max = cols[..., 0].copy()
    col_pick = np.zeros(row_max.shape, dtype=np.int8) if want_index else None
    for j in range(1, pool_w):
        v = cols[..., j]
        if want_index:
            np.maximum(col_pick, (v > row_max).view(np.int8) * np.int8(j), out=col_pick)
        np.maximum(row_max, v, out=row_max)
    rows = row_max.reshape(b, c, ho, pool_h, wo)
    out = rows[:, :, :, 0].copy()
    row_pick = np.zeros(out.shape, dtype=np.int8) if want_index else None
    for i in range(1, pool_h):
        v = rows[:, :, :, i]
        if want_index:
            np.maximum(row_pick, (v > out).view(np.int8) * np.int8(i), out=row_pick)
        np.maximum(out, v, out=out)
    if not want_index:
        return out, None
    col_sel = np.take_along_axis(col_pick.reshape(b, c, ho, pool_h, wo), row_pick[:, :, :, None].astype(np.intp), axis=3)[:, :, :, 0]
    r = np.arange(ho)[:, None] * pool_h + row_pick
    q = np.arange(wo)[None, :] * pool_w + col_sel
    base = (np.arange(b * c) * (h * w)).reshape(b, c, 1, 1)
    return out, base + r * w + q


def maxpool2d(x: Tensor, pool_h: int, pool_w: int) -> Tensor:
    """Non-overlapping max pooling; trailing remainder rows/cols are dropped.

    The gradient goes to the first maximal element in row-major window order.
    """
    xb, squeeze = _batched(x)
    _, _, h, w = xb.shape
    if pool_h < 1 or pool_w < 1:
        raise DimensionError(f"pool sizes must be >= 1, got {(pool_h, pool_w)}")
    if pool_h > h or pool_w > w:
        raise DimensionError(f"pool {(pool_h, pool_w)} exceeds spatial dims {(h, w)}")
    out, flat = _pool_max(xb, pool_h, pool_w, want_index=x.requires_grad and grad_enabled())

    def rule(g):
        gx = np.zeros(xb.size, dtype=g.dtype)
        gx[flat.ravel()] = g.ravel()
        gx = gx.reshape(xb.shape)
        return (gx[0] if squeeze else gx,)

    return make_result(out[0] if squeeze else out, (x,), rule)


# similarity ----------------------------------------------------------------

COSINE_EPS = 1e-12


def cosine_similarity(a: Tensor, b: Tensor, return_flag: bool = False):
    """Cosine of the angle between vectors along the last axis.

    Pairs where either norm is below 1e-12 yield 0 with zero gradient; with
    ``return_flag=True`` a boolean array marking those pairs is also returned.
    """
    if a.shape != b.shape:
        raise DimensionError(f"cosine_similarity needs equal shapes, got {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    dot = np.sum(ad * bd, axis=-1)
    na = np.sqrt(np.sum(ad * ad, axis=-1))
    nb = np.sqrt(np.sum(bd * bd, axis=-1))
    degenerate = (na < COSINE_EPS) | (nb < COSINE_EPS)
    denom = np.where(degenerate, 1.0, na * nb)
    s = np.where(degenerate, 0.0, dot / denom).astype(a.dtype)
    safe_na = np.where(degenerate, 1.0, na)[..., None]
    safe_nb = np.where(degenerate, 1.0, nb)[..., None]

    def rule(g):
        g = (g * ~degenerate)[..., None]
        sv = s[..., None]
        ga = g * (bd / (safe_na * safe_nb) - sv * ad / safe_na**2)
        gb = g * (ad / (safe_na * safe_nb) - sv * bd / safe_nb**2)
        return ga.astype(a.dtype), gb.astype(b.dtype)

    out = make_result(s, (a, b), rule)
    if return_flag:
        return out, degenerate
    return out
