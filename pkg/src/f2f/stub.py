"""Desk-scale single-frame segmentation model.

The extractor is a stack of stride-2 3x3 conv + ReLU stages producing
D x H/s x W/s features. The head applies an SPP-like context layer (average
pooling onto several grids, 1x1 projection, nearest upsampling, concat) and
then an upsampling path of conv + nearest x2 stages up to half resolution,
a 3x3 classifier there, and a bilinear x2 resize of the logits.
The head only ever sees the extractor output; there are no skip connections.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .functional import adaptive_avg_pool2d, upsample_bilinear, upsample_nearest
from .layers import Conv2d
from .tensor import Tensor, concat, no_grad, relu


@dataclass
class StubConfig:
    downsample: int = 8
    feat_dim: int = 64
    classes: int = 6
    in_channels: int = 1
    spp_grids: list = field(default_factory=lambda: [1, 2, 4])
    spp_width: int = 16
    head_width: int = 64
    moving_class_ids: list = field(default_factory=lambda: [3, 4, 5])

    def validate(self):
        s = self.downsample
        if s < 2 or s & (s - 1):
            raise ConfigError(f"downsample must be a power of 2, got {s}")
        if self.feat_dim <= 0 or self.classes < 2:
            raise ConfigError("feat_dim must be positive and classes >= 2")
        if any(not 0 <= c < self.classes for c in self.moving_class_ids):
            raise ConfigError("moving_class_ids must lie in [0, classes)")

    @property
    def stages(self) -> int:
        return int(np.log2(self.downsample))

    def to_dict(self) -> dict:
        return asdict(self)


def _encoder_widths(cfg: StubConfig) -> list[int]:
    widths = [min(32 * 2 ** i, cfg.feat_dim) for i in range(cfg.stages - 1)]
    return widths + [cfg.feat_dim]


def _decoder_widths(cfg: StubConfig) -> list[int]:
    half = max(cfg.head_width // 2, 16)
    return [cfg.head_width] + [half] * (cfg.stages - 1)


class SingleFrameModel:
    def __init__(self, cfg: StubConfig, seed: int = 0, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.encoder = []
        cin = cfg.in_channels
        for width in _encoder_widths(cfg):
            self.encoder.append(Conv2d(cin, width, 3, stride=2, rng=rng, dtype=dtype))
            cin = width
        self.spp = [Conv2d(cfg.feat_dim, cfg.spp_width, 1, rng=rng, dtype=dtype) for _ in cfg.spp_grids]
        self.fuse = Conv2d(cfg.feat_dim + cfg.spp_width * len(cfg.spp_grids), cfg.head_width, 1, rng=rng, dtype=dtype)
        self.decoder = []
        cin = cfg.head_width
        for width in _decoder_widths(cfg):
            self.decoder.append(Conv2d(cin, width, 3, rng=rng, dtype=dtype))
            cin = width
        self.classifier = Conv2d(cin, cfg.classes, 3, rng=rng, dtype=dtype, gain=1.0)

    # -- parameters ----------------------------------------------------
    def extractor_parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, conv in enumerate(self.encoder):
            for name, p in conv.named_parameters().items():
                out[f"extractor.conv{i}.{name}"] = p
        return out

    def head_parameters(self) -> dict[str, Tensor]:
        out = {}
        groups = [(f"head.spp{i}", c) for i, c in enumerate(self.spp)] + [("head.fuse", self.fuse)]
        groups += [(f"head.up{i}", c) for i, c in enumerate(self.decoder)] + [("head.classifier", self.classifier)]
        for prefix, conv in groups:
            for name, p in conv.named_parameters().items():
                out[f"{prefix}.{name}"] = p
        return out

    def named_parameters(self) -> dict[str, Tensor]:
        return {**self.extractor_parameters(), **self.head_parameters()}

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    # -- forward -------------------------------------------------------
    def features(self, images: Tensor) -> Tensor:
        """(N, in_channels, H, W) images -> (N, D, H/s, W/s) features."""
        s = self.cfg.downsample
        if images.ndim != 4 or images.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"expected (N, {self.cfg.in_channels}, H, W) images, got {images.shape}")
        if images.shape[2] % s or images.shape[3] % s:
            raise ShapeError(f"image size {images.shape[2:]} not divisible by downsample factor {s}")
        h = images
        for conv in self.encoder:
            h = relu(conv(h))
        return h

    def logits(self, feats: Tensor) -> Tensor:
        """(N, D, h, w) features -> (N, C, h*s, w*s) class logits."""
        cfg = self.cfg
        if feats.ndim != 4 or feats.shape[1] != cfg.feat_dim:
            raise ShapeError(f"expected (N, {cfg.feat_dim}, h, w) features, got {feats.shape}")
        h, w = feats.shape[2:]
        ctx = [feats]
        for grid, proj in zip(cfg.spp_grids, self.spp):
            pooled = relu(proj(adaptive_avg_pool2d(feats, grid)))
            ctx.append(upsample_nearest(pooled, (h // grid, w // grid)))
        x = relu(self.fuse(concat(ctx, axis=1)))
        for i, conv in enumerate(self.decoder):
            x = relu(conv(x))
            if i < len(self.decoder) - 1:
                x = upsample_nearest(x, 2)
        return upsample_bilinear(self.classifier(x), 2)

    def __call__(self, images: Tensor) -> Tensor:
        return self.logits(self.features(images))


def to_batch(frames, dtype=np.float32) -> Tensor:
    """Stack (H, W) or (H, W, ch) images into an (N, ch, H, W) tensor."""
    arr = np.asarray(frames, dtype=dtype)
    if arr.ndim == 2:
        arr = arr[None, None]
    elif arr.ndim == 3:
        arr = arr[:, None]
    elif arr.ndim == 4:
        arr = arr.transpose(0, 3, 1, 2)
    return Tensor(np.ascontiguousarray(arr))


def extract_features(model: SingleFrameModel, frame: np.ndarray) -> np.ndarray:
    """One (H, W[, ch]) frame -> (D, H/s, W/s) feature array."""
    batch = to_batch(np.asarray(frame)[None], model.encoder[0].weight.dtype)
    with no_grad():
        return model.features(batch).data[0]


def predict_from_features(model: SingleFrameModel, feats: np.ndarray) -> np.ndarray:
    """(D, h, w) features -> (C, h*s, w*s) logits."""
    feats = np.asarray(feats, dtype=model.fuse.weight.dtype)
    if feats.ndim != 3:
        raise ShapeError(f"expected (D, h, w) features, got {feats.shape}")
    with no_grad():
        return model.logits(Tensor(feats[None])).data[0]


def argmax_labels(logits: np.ndarray, axis: int = 0) -> np.ndarray:
    """Class map from logits; ties go to the lowest class id."""
    return np.argmax(logits, axis=axis).astype(np.int64)


def copy_last_segmentation(model: SingleFrameModel, last_frame: np.ndarray) -> np.ndarray:
    """Single-frame prediction on the last observed frame, reused as the forecast."""
    return argmax_labels(predict_from_features(model, extract_features(model, last_frame)))
