"""The F2F forecaster family: ConvF2F-N, DilatedF2F-N and DeformF2F-N.

Layer 1 is a regular 1x1 convolution blending the channel-concatenated
frames (T*D -> hidden). Layers 2..N-1 are 3x3 hidden -> hidden and layer N
maps hidden -> D, all of the chosen variant. ReLU follows every layer except
the last unless ``final_activation`` is set.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .deform import DeformConvLayer
from .errors import ConfigError, ShapeError
from .layers import Conv2d
from .tensor import Tensor, concat, relu

VARIANTS = ("plain", "dilated", "deformable")
VARIANT_NAMES = {"plain": "ConvF2F", "dilated": "DilatedF2F", "deformable": "DeformF2F"}


@dataclass
class F2FConfig:
    variant: str = "deformable"
    n_layers: int = 5
    frames: int = 4
    channels_per_frame: int = 64
    hidden: int = 128
    dilation: int = 2
    final_activation: bool = False
    zero_init_last: bool = True

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown F2F variant {self.variant!r}; choose from {VARIANTS}")
        if self.n_layers < 2:
            raise ConfigError("an F2F model needs at least 2 layers (1x1 blend + output)")
        if self.frames < 1 or self.hidden <= 0 or self.channels_per_frame <= 0:
            raise ConfigError("frames, hidden and channels_per_frame must be positive")
        if self.variant == "dilated" and self.dilation < 1:
            raise ConfigError("dilation must be >= 1")

    @property
    def name(self) -> str:
        return f"{VARIANT_NAMES[self.variant]}-{self.n_layers}"

    def to_dict(self) -> dict:
        return asdict(self)


class F2FModel:
    def __init__(self, cfg: F2FConfig, layers: list):
        self.cfg = cfg
        self.layers = layers

    def __call__(self, inputs: Sequence[Tensor]) -> Tensor:
        return forward_f2f(self, inputs)

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, layer in enumerate(self.layers, start=1):
            for name, p in layer.named_parameters().items():
                out[f"layer{i}.{name}"] = p
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def __repr__(self):
        body = ", ".join(repr(layer) for layer in self.layers)
        return f"{self.cfg.name}[{body}]"


def _make_layer(cfg: F2FConfig, cin: int, cout: int, rng, dtype, last: bool):
    gain = 1.0 if last and not cfg.final_activation else 2.0
    zero = last and cfg.zero_init_last
    if cfg.variant == "deformable":
        return DeformConvLayer(cin, cout, 3, rng=rng, dtype=dtype, gain=gain, zero_init=zero)
    dilation = cfg.dilation if cfg.variant == "dilated" else 1
    return Conv2d(cin, cout, 3, dilation=dilation, rng=rng, dtype=dtype, gain=gain, zero_init=zero)


def build_f2f(cfg: F2FConfig, seed: int = 0, dtype=np.float32) -> F2FModel:
    cfg.validate()
    rng = np.random.default_rng(seed)
    d, hid = cfg.channels_per_frame, cfg.hidden
    layers: list = [Conv2d(cfg.frames * d, hid, 1, rng=rng, dtype=dtype)]
    for i in range(2, cfg.n_layers + 1):
        last = i == cfg.n_layers
        layers.append(_make_layer(cfg, hid, d if last else hid, rng, dtype, last))
    return F2FModel(cfg, layers)


def count_parameters(model) -> int:
    return int(sum(p.size for p in model.named_parameters().values()))


def param_count_closed_form(cfg: F2FConfig) -> int:
    """Parameter count computed from the layer widths alone, without building."""
    d, hid, t = cfg.channels_per_frame, cfg.hidden, cfg.frames
    total = t * d * hid + hid
    per_tap = 9
    offset_branch = hid * 3 * per_tap * per_tap + 3 * per_tap
    for i in range(2, cfg.n_layers + 1):
        cout = d if i == cfg.n_layers else hid
        total += hid * cout * per_tap + cout
        if cfg.variant == "deformable":
            total += offset_branch
    return total


def forward_f2f(model: F2FModel, inputs: Sequence[Tensor]) -> Tensor:
    """Concatenate T feature maps (oldest first) and run the layer stack."""
    cfg = model.cfg
    if len(inputs) != cfg.frames:
        raise ShapeError(f"{cfg.name} expects {cfg.frames} input frames, got {len(inputs)}")
    for i, x in enumerate(inputs):
        if x.ndim != 4 or x.shape[1] != cfg.channels_per_frame:
            raise ShapeError(f"frame {i} has shape {x.shape}; expected (N, {cfg.channels_per_frame}, h, w)")
        if x.shape != inputs[0].shape:
            raise ShapeError("all input frames must share one shape")
    h = concat(list(inputs), axis=1) if len(inputs) > 1 else inputs[0]
    last = len(model.layers) - 1
    for i, layer in enumerate(model.layers):
        h = layer(h)
        if i < last or cfg.final_activation:
            h = relu(h)
    return h
