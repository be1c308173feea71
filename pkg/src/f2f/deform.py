"""Modulated deformable convolution.

A companion "same" convolution over the layer input predicts, for every
output pixel and kernel tap, a (dy, dx) displacement and a modulation
pre-activation. The main kernel then reads the input by bilinear sampling at
the displaced grid positions (zero outside the map) and scales each tap by
sigmoid(modulation).

Offset channel layout follows the usual convention: channels ``2k`` and
``2k + 1`` hold (dy, dx) of tap ``k`` (row-major over the kernel); the final
``kh * kw`` channels of the companion conv hold the modulation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .errors import ShapeError
from .functional import bilinear_corners, conv2d, corner_weights, dilated_conv2d, same_padding
from .layers import fan_in_uniform
from .tensor import Tensor, _sigmoid, getitem, make_result

__all__ = ["OffsetField", "DeformConvLayer", "predict_offsets", "deform_conv2d", "dilated_conv2d"]


@dataclass
class OffsetField:
    offsets: Tensor  # (N, 2K, H, W)
    modulation: Tensor  # (N, K, H, W), pre-sigmoid

    def validate(self, kh: int, kw: int, spatial: tuple[int, int] | None = None):
        k = kh * kw
        if self.offsets.ndim != 4 or self.offsets.shape[1] != 2 * k:
            raise ShapeError(f"offsets need {2 * k} channels, got shape {self.offsets.shape}")
        if self.modulation.ndim != 4 or self.modulation.shape[1] != k:
            raise ShapeError(f"modulation needs {k} channels, got shape {self.modulation.shape}")
        if self.offsets.shape[2:] != self.modulation.shape[2:] or self.offsets.shape[0] != self.modulation.shape[0]:
            raise ShapeError("offsets and modulation disagree in batch or spatial dims")
        if spatial is not None and tuple(self.offsets.shape[2:]) != tuple(spatial):
            raise ShapeError(f"offset field is {self.offsets.shape[2:]}, output is {spatial}")


class DeformConvLayer:
    """Stride-1 modulated deformable convolution with its offset branch.

    The offset branch starts at zero, so a fresh layer samples the regular
    grid with every tap scaled by sigmoid(0) = 0.5.
    """

    def __init__(self, cin: int, cout: int, kernel: int = 3, rng: np.random.Generator | None = None,
                 dtype=np.float32, gain: float = 2.0, zero_init: bool = False):
        self.cin, self.cout, self.kernel = cin, cout, kernel
        k = kernel * kernel
        shape = (cout, cin, kernel, kernel)
        w = np.zeros(shape, dtype=dtype) if zero_init or rng is None else fan_in_uniform(rng, shape, gain, dtype)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
        self.offset_weight = Tensor(np.zeros((3 * k, cin, kernel, kernel), dtype=dtype), requires_grad=True)
        self.offset_bias = Tensor(np.zeros(3 * k, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor, unit_modulation: bool = False) -> Tensor:
        return deform_conv2d(self, x, predict_offsets(self, x), unit_modulation=unit_modulation)

    def named_parameters(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias,
                "offset_weight": self.offset_weight, "offset_bias": self.offset_bias}

    def __repr__(self):
        return f"DeformConvLayer({self.cin}, {self.cout}, k={self.kernel})"


def predict_offsets(layer: DeformConvLayer, x: Tensor) -> OffsetField:
    if x.ndim != 4 or x.shape[1] != layer.cin:
        raise ShapeError(f"predict_offsets: layer expects {layer.cin} channels, input is {x.shape}")
    k = layer.kernel * layer.kernel
    raw = conv2d(x, layer.offset_weight, layer.offset_bias, padding=same_padding(layer.kernel))
    return OffsetField(getitem(raw, (slice(None), slice(0, 2 * k))),
                       getitem(raw, (slice(None), slice(2 * k, 3 * k))))


def deform_conv2d(layer: DeformConvLayer, x: Tensor, field: OffsetField, unit_modulation: bool = False) -> Tensor:
    """Apply ``layer``'s main kernel at positions displaced by ``field``.

    ``unit_modulation`` replaces sigmoid(modulation) by 1 (used to compare
    against regular and dilated convolutions exactly).
    """
    return deform_conv2d_raw(x, field.offsets, field.modulation, layer.weight, layer.bias,
                             unit_modulation=unit_modulation)


def deform_conv2d_raw(x: Tensor, offsets: Tensor, modulation: Tensor, weight: Tensor, bias: Tensor | None,
                      unit_modulation: bool = False) -> Tensor:
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"deform_conv2d: input {x.shape} does not match weight {weight.shape}")
    n, c, h, w = x.shape
    cout, _, kh, kw = weight.shape
    k = kh * kw
    OffsetField(offsets, modulation).validate(kh, kw, (h, w))
    if offsets.shape[0] != n:
        raise ShapeError("offset field batch size differs from input")
    dtype = x.dtype
    hw = h * w
    rows = n * hw * k

    # sampling positions, rows ordered (n, y, x, tap)
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    gy, gx = np.meshgrid(np.arange(h, dtype=dtype), np.arange(w, dtype=dtype), indexing="ij")
    ty, tx = np.meshgrid(np.arange(kh, dtype=dtype) - ph, np.arange(kw, dtype=dtype) - pw, indexing="ij")
    off = offsets.data.reshape(n, k, 2, h, w).transpose(0, 3, 4, 1, 2)
    py = (gy[None, :, :, None] + ty.reshape(1, 1, 1, k) + off[..., 0]).reshape(rows)
    px = (gx[None, :, :, None] + tx.reshape(1, 1, 1, k) + off[..., 1]).reshape(rows)

    corners, ly, lx = bilinear_corners(h, w, py, px)
    weights = corner_weights(ly, lx)
    shift = np.repeat(np.arange(n, dtype=np.intp) * hw, hw * k)
    cols_idx = np.stack([idx + shift for idx, _ in corners], axis=1).ravel()
    masks = [valid for _, valid in corners]
    indptr = np.arange(0, 4 * rows + 1, 4)

    def interp(which: int):
        data = np.stack([wts[which] * vm for wts, vm in zip(weights, masks)], axis=1).ravel()
        return sparse.csr_matrix((data.astype(dtype), cols_idx, indptr), shape=(rows, n * hw))

    smat = interp(0)
    xt = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1)).reshape(n * hw, c)
    samp = smat @ xt  # (rows, C)
    if unit_modulation:
        m = None
        cols = samp.reshape(n * hw, k * c)
    else:
        m = _sigmoid(modulation.data.reshape(n, k, hw).transpose(0, 2, 1).reshape(rows))
        cols = (samp * m[:, None]).reshape(n * hw, k * c)
    wmat = weight.data.transpose(2, 3, 1, 0).reshape(k * c, cout)
    out = cols @ wmat
    if bias is not None:
        out += bias.data
    out = out.reshape(n, h, w, cout).transpose(0, 3, 1, 2)

    def to_nkhw(a):
        return a.reshape(n, h, w, k).transpose(0, 3, 1, 2)

    def bw(g):
        gm = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * hw, cout)
        gw = (cols.T @ gm).reshape(kh, kw, c, cout).transpose(3, 2, 0, 1)
        gb = gm.sum(axis=0) if bias is not None else None
        gsm = (gm @ wmat.T).reshape(rows, c)
        if m is None:
            gmod = np.zeros(modulation.shape, dtype=dtype) if modulation.requires_grad else None
            gs = gsm
        else:
            gmod = to_nkhw(np.einsum("rc,rc->r", gsm, samp) * m * (1 - m))
            gs = gsm * m[:, None]
        goff = None
        if offsets.requires_grad:
            gpy = np.einsum("rc,rc->r", interp(1) @ xt, gs)
            gpx = np.einsum("rc,rc->r", interp(2) @ xt, gs)
            goff = np.stack([to_nkhw(gpy), to_nkhw(gpx)], axis=2).reshape(offsets.shape)
        gxin = None
        if x.requires_grad:
            gxin = (smat.T @ gs).reshape(n, h, w, c).transpose(0, 3, 1, 2)
        grads = (gxin, goff, gmod, np.ascontiguousarray(gw))
        return grads + (gb,) if bias is not None else grads

    inputs = (x, offsets, modulation, weight) + ((bias,) if bias is not None else ())
    return make_result(out, inputs, bw, "deform_conv2d")
