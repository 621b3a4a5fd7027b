"""Small parameter containers built on the autodiff primitives."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Linear:
    """Affine map over the trailing dimension, uniform fan-in initialisation."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype=np.float32, zero: bool = False):
        self.d_in = d_in
        self.d_out = d_out
        if zero:
            w = np.zeros((d_out, d_in))
        else:
            bound = 1.0 / np.sqrt(d_in)
            w = rng.uniform(-bound, bound, size=(d_out, d_in))
        self.weight = Tensor(w.astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.weight, self.bias)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        yield prefix + "weight", self.weight
        yield prefix + "bias", self.bias


class MLP:
    """Two linear layers with a tanh in between."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng: np.random.Generator,
                 dtype=np.float32, zero_last: bool = False):
        self.fc1 = Linear(d_in, d_hidden, rng, dtype)
        self.fc2 = Linear(d_hidden, d_out, rng, dtype, zero=zero_last)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ad.tanh(self.fc1(x)))

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        yield from self.fc1.named_parameters(prefix + "fc1.")
        yield from self.fc2.named_parameters(prefix + "fc2.")
