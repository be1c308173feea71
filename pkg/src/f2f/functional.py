"""Differentiable primitives: convolution, pooling, resampling, bilinear
sampling, softmax family and losses."""

from __future__ import annotations

import numpy as np

from .errors import ShapeError
from .tensor import Tensor, as_tensor, make_result, max_


def same_padding(kernel: int, dilation: int = 1) -> int:
    return dilation * (kernel - 1) // 2


def _check_conv(x: Tensor, w: Tensor, b: Tensor | None):
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(
            f"conv2d: input has {x.shape[1]} channels but weight expects {w.shape[1]} "
            f"(input {x.shape}, weight {w.shape})")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d: bias shape {b.shape} does not match {w.shape[0]} outputs")


def _im2col(xp: np.ndarray, kh, kw, ho, wo, stride, dilation) -> np.ndarray:
    """Padded NHWC input -> (N*Ho*Wo, kh*kw*C) patch matrix, tap-major then channel."""
    n, _, _, c = xp.shape
    cols = np.empty((n, ho, wo, kh * kw, c), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            y0, x0 = i * dilation, j * dilation
            cols[:, :, :, i * kw + j] = xp[:, y0:y0 + (ho - 1) * stride + 1:stride,
                                           x0:x0 + (wo - 1) * stride + 1:stride]
    return cols.reshape(n * ho * wo, kh * kw * c)


def _col2im(gcols: np.ndarray, xp_shape, kh, kw, ho, wo, stride, dilation) -> np.ndarray:
    n, _, _, c = xp_shape
    gxp = np.zeros(xp_shape, dtype=gcols.dtype)
    g = gcols.reshape(n, ho, wo, kh * kw, c)
    for i in range(kh):
        for j in range(kw):
            y0, x0 = i * dilation, j * dilation
            gxp[:, y0:y0 + (ho - 1) * stride + 1:stride,
                x0:x0 + (wo - 1) * stride + 1:stride] += g[:, :, :, i * kw + j]
    return gxp


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           dilation: int = 1, padding: int | None = None) -> Tensor:
    """2-d cross-correlation over NCHW input; ``padding=None`` means "same".

    Works channels-last internally; the returned NCHW array is a transposed
    view of channels-last memory so stacked convolutions skip the copy.
    """
    _check_conv(x, weight, bias)
    if dilation < 1 or stride < 1:
        raise ValueError("stride and dilation must be >= 1")
    cout, cin, kh, kw = weight.shape
    if padding is None:
        padding = same_padding(kh, dilation)
    n, _, h, w = x.shape
    ho = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    wo = (w + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: empty output for input {x.shape} and kernel {weight.shape}")
    xh = x.data.transpose(0, 2, 3, 1)
    if kh == kw == 1 and stride == 1 and padding == 0:
        cols = np.ascontiguousarray(xh).reshape(n * h * w, cin)
        xp_shape = None
    else:
        xp = np.pad(xh, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding \
            else np.ascontiguousarray(xh)
        cols = _im2col(xp, kh, kw, ho, wo, stride, dilation)
        xp_shape = xp.shape
    wmat = weight.data.transpose(2, 3, 1, 0).reshape(kh * kw * cin, cout)
    out = cols @ wmat
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)

    def bw(g):
        gm = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, cout)
        gw = (cols.T @ gm).reshape(kh, kw, cin, cout).transpose(3, 2, 0, 1)
        gb = gm.sum(axis=0) if bias is not None else None
        gx = None
        if x.requires_grad:
            gcols = gm @ wmat.T
            if xp_shape is None:
                gx = gcols.reshape(n, h, w, cin).transpose(0, 3, 1, 2)
            else:
                gxp = _col2im(gcols, xp_shape, kh, kw, ho, wo, stride, dilation)
                if padding:
                    gxp = gxp[:, padding:padding + h, padding:padding + w]
                gx = gxp.transpose(0, 3, 1, 2)
        gw = np.ascontiguousarray(gw)
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return make_result(out, inputs, bw, "conv2d")


def dilated_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, dilation: int = 2) -> Tensor:
    """Stride-1 "same" convolution with the given dilation."""
    return conv2d(x, weight, bias, stride=1, dilation=dilation, padding=same_padding(weight.shape[2], dilation))


def avg_pool2d(x: Tensor, kernel: tuple[int, int]) -> Tensor:
    kh, kw = kernel
    n, c, h, w = x.shape
    if h % kh or w % kw:
        raise ShapeError(f"avg_pool2d: {h}x{w} not divisible by kernel {kh}x{kw}")
    out = x.data.reshape(n, c, h // kh, kh, w // kw, kw).mean(axis=(3, 5))

    def bw(g):
        g = np.repeat(np.repeat(g, kh, axis=2), kw, axis=3) / (kh * kw)
        return (g,)

    return make_result(out, (x,), bw, "avg_pool2d")


def adaptive_avg_pool2d(x: Tensor, grid: int) -> Tensor:
    """Average into a ``grid``x``grid`` map; spatial dims must be divisible by grid."""
    h, w = x.shape[2:]
    if h % grid or w % grid:
        raise ShapeError(f"pooling grid {grid} does not divide spatial dims {(h, w)}")
    return avg_pool2d(x, (h // grid, w // grid))


def upsample_nearest(x: Tensor, factor: tuple[int, int] | int) -> Tensor:
    fy, fx = (factor, factor) if isinstance(factor, int) else factor
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, fy, axis=2), fx, axis=3)

    def bw(g):
        return (g.reshape(n, c, h, fy, w, fx).sum(axis=(3, 5)),)

    return make_result(out, (x,), bw, "upsample_nearest")


def resize_matrix(n_in: int, factor: int, dtype=np.float64) -> np.ndarray:
    """(n_in*factor, n_in) half-pixel bilinear interpolation matrix, edges clamped."""
    n_out = n_in * factor
    pos = np.clip((np.arange(n_out) + 0.5) / factor - 0.5, 0, n_in - 1)
    i0 = np.floor(pos).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    frac = pos - i0
    m = np.zeros((n_out, n_in), dtype=dtype)
    np.add.at(m, (np.arange(n_out), i0), 1 - frac)
    np.add.at(m, (np.arange(n_out), i1), frac)
    return m


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    n, c, h, w = x.shape
    ah = resize_matrix(h, factor, x.dtype)
    aw = resize_matrix(w, factor, x.dtype)
    out = ah @ x.data @ aw.T

    def bw(g):
        return (ah.T @ g @ aw,)

    return make_result(out, (x,), bw, "upsample_bilinear")


# -- bilinear sampling ----------------------------------------------------

_CORNERS = ((0, 0), (0, 1), (1, 0), (1, 1))


def bilinear_corners(h: int, w: int, py: np.ndarray, px: np.ndarray):
    """Flat indices, validity masks and fractional parts of the 4 corners
    around each (py, px). Corners outside the map are marked invalid (zero
    padding)."""
    y0 = np.floor(py)
    x0 = np.floor(px)
    ly = py - y0
    lx = px - x0
    y0 = y0.astype(np.intp)
    x0 = x0.astype(np.intp)
    corners = []
    for dy, dx in _CORNERS:
        yy = y0 + dy
        xx = x0 + dx
        valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        idx = np.where(valid, yy * w + xx, 0)
        corners.append((idx, valid))
    return corners, ly, lx


def corner_weights(ly, lx):
    """Bilinear weight of each corner and its partials wrt (ly, lx)."""
    wy = (1 - ly, ly)
    wx = (1 - lx, lx)
    out = []
    for dy, dx in _CORNERS:
        sy = 1.0 if dy else -1.0
        sx = 1.0 if dx else -1.0
        out.append((wy[dy] * wx[dx], sy * wx[dx], wy[dy] * sx))
    return out


def sample_points(fmap: Tensor, ys: Tensor, xs: Tensor) -> Tensor:
    """Bilinear samples of a (C, H, W) map at P points -> (C, P).

    Differentiable wrt the map values and both coordinate vectors.
    """
    if fmap.ndim != 3:
        raise ShapeError(f"sample_points expects a (C, H, W) map, got {fmap.shape}")
    ys = as_tensor(ys, fmap.dtype)
    xs = as_tensor(xs, fmap.dtype)
    c, h, w = fmap.shape
    flat = fmap.data.reshape(c, h * w)
    py = ys.data.astype(fmap.dtype).reshape(-1)
    px = xs.data.astype(fmap.dtype).reshape(-1)
    corners, ly, lx = bilinear_corners(h, w, py, px)
    weights = corner_weights(ly, lx)
    vals = [flat[:, idx] * valid for idx, valid in corners]
    out = sum(wt * v for (wt, _, _), v in zip(weights, vals))

    def bw(g):
        gmap = None
        if fmap.requires_grad:
            gflat = np.zeros((c, h * w), dtype=g.dtype)
            for (idx, valid), (wt, _, _) in zip(corners, weights):
                np.add.at(gflat, (slice(None), idx), g * (wt * valid))
            gmap = gflat.reshape(c, h, w)
        gy = sum((g * v * dwy).sum(axis=0) for (_, dwy, _), v in zip(weights, vals))
        gx = sum((g * v * dwx).sum(axis=0) for (_, _, dwx), v in zip(weights, vals))
        return gmap, gy.reshape(ys.shape), gx.reshape(xs.shape)

    return make_result(out, (fmap, ys, xs), bw, "sample_points")


def bilinear_sample(fmap: Tensor, x, y) -> Tensor:
    """Bilinear value of a (C, H, W) map at column ``x`` and row ``y`` -> (C,)."""
    xs = as_tensor(x, fmap.dtype).reshape(1)
    ys = as_tensor(y, fmap.dtype).reshape(1)
    out = sample_points(fmap, ys, xs)
    return out.reshape(fmap.shape[0])


# -- softmax family and losses ---------------------------------------------

def _softmax_np(z: np.ndarray, axis: int) -> np.ndarray:
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = 1) -> Tensor:
    s = _softmax_np(x.data, axis)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return make_result(s, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = 1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def bw(g):
        return (g - s * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (x,), bw, "log_softmax")


def log_max_softmax(logits: Tensor) -> Tensor:
    """Per-pixel log of the largest class probability: (N, C, H, W) -> (N, H, W)."""
    return max_(log_softmax(logits, axis=1), axis=1)


def l2_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared difference over all elements."""
    target = as_tensor(target, pred.dtype)
    if pred.shape != target.shape:
        raise ShapeError(f"l2_loss: shapes {pred.shape} and {target.shape} differ")
    diff = pred.data - target.data
    n = diff.size

    def bw(g):
        gp = (2.0 / n) * g * diff
        return gp, -gp

    return make_result(np.asarray((diff * diff).sum() / n), (pred, target), bw, "l2_loss")


def cross_entropy(logits: Tensor, labels: np.ndarray, ignore_id: int = 255) -> Tensor:
    """Mean over non-ignored pixels of -log softmax(logits)[label].

    ``logits`` is (N, C, H, W) and ``labels`` an integer (N, H, W) map.
    """
    labels = np.asarray(labels)
    n, c, h, w = logits.shape
    if labels.shape != (n, h, w):
        raise ShapeError(f"cross_entropy: labels {labels.shape} vs logits {logits.shape}")
    valid = labels != ignore_id
    count = int(valid.sum())
    if count == 0:
        raise ValueError("cross_entropy: every pixel is ignored, mean is undefined")
    if np.any((labels[valid] < 0) | (labels[valid] >= c)):
        raise ValueError(f"cross_entropy: labels outside [0, {c})")
    safe = np.where(valid, labels, 0)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    picked = np.take_along_axis(z, safe[:, None], axis=1)[:, 0]
    loss = ((lse - picked) * valid).sum() / count

    def bw(g):
        p = np.exp(z - lse[:, None])
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, safe[:, None], 1.0, axis=1)
        return (g * (p - onehot) * valid[:, None] / count,)

    return make_result(np.asarray(loss, dtype=logits.dtype), (logits,), bw, "cross_entropy")


__all__ = [
    "conv2d", "dilated_conv2d", "avg_pool2d", "adaptive_avg_pool2d", "upsample_nearest",
    "sample_points", "bilinear_sample", "softmax", "log_softmax", "log_max_softmax",
    "l2_loss", "cross_entropy", "same_padding",
]
