"""Parameter containers shared by the attention blocks, decoder, and heads."""

from __future__ import annotations

import numpy as np

from . import precision
from .tensor import Tensor, linear


def uniform_fan_in(rng: np.random.Generator, fan_in: int, shape) -> Tensor:
    """Weights ~ uniform(-s, s) with s = 1/sqrt(fan_in)."""
    s = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-s, s, size=shape).astype(precision.dtype()), requires_grad=True)


class Linear:
    """Dense layer over the trailing axis: y = x @ weight + bias."""

    def __init__(self, rng: np.random.Generator, cin: int, cout: int):
        self.cin = cin
        self.cout = cout
        self.weight = uniform_fan_in(rng, cin, (cin, cout))
        self.bias = Tensor(np.zeros(cout), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)

    def named_parameters(self, prefix: str):
        return [(f"{prefix}.weight", self.weight), (f"{prefix}.bias", self.bias)]

    def param_count(self) -> int:
        return self.cin * self.cout + self.cout
