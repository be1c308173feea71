"""Parameterised convolution layers."""

from __future__ import annotations

import numpy as np

from .functional import conv2d, same_padding
from .tensor import Tensor


def fan_in_uniform(rng: np.random.Generator, shape: tuple, gain: float = 2.0, dtype=np.float32) -> np.ndarray:
    """U(-b, b) with b = sqrt(3 * gain / fan_in); gain=2 is the ReLU setting."""
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(3.0 * gain / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d:
    def __init__(self, cin: int, cout: int, kernel: int, stride: int = 1, dilation: int = 1,
                 rng: np.random.Generator | None = None, dtype=np.float32, gain: float = 2.0,
                 zero_init: bool = False):
        self.cin, self.cout, self.kernel = cin, cout, kernel
        self.stride, self.dilation = stride, dilation
        shape = (cout, cin, kernel, kernel)
        if zero_init or rng is None:
            w = np.zeros(shape, dtype=dtype)
        else:
            w = fan_in_uniform(rng, shape, gain, dtype)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        pad = same_padding(self.kernel, self.dilation)
        return conv2d(x, self.weight, self.bias, stride=self.stride, dilation=self.dilation, padding=pad)

    def named_parameters(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}

    def __repr__(self):
        extra = f", dilation={self.dilation}" if self.dilation != 1 else ""
        extra += f", stride={self.stride}" if self.stride != 1 else ""
        return f"Conv2d({self.cin}, {self.cout}, k={self.kernel}{extra})"
