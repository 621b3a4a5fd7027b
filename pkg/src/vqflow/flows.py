"""Conditional affine coupling blocks and the flow branches built from them.

All maps are channels-last ``[..., H, W, D]``; coupling acts independently at
every position with parameters shared across positions, so the Jacobian is
block diagonal with one ``D x D`` block per position.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .exceptions import DimensionError, NumericError
from .layers import MLP

DEFAULT_CLAMP = 2.0


class CouplingBlock:
    """Permute channels, then affinely transform the second half given the first.

    ``out_b = h_b * exp(s) + t`` with ``(s, t) = net(h_a, cond)`` and the log
    scale soft-clamped to ``clamp * tanh(s / clamp)``.
    """

    def __init__(self, channels: int, cond_channels: int, rng: np.random.Generator,
                 hidden: int | None = None, clamp: float = DEFAULT_CLAMP, dtype=np.float32,
                 zero_init: bool = True, index: int = 0):
        if channels < 2:
            raise DimensionError(f"coupling block needs at least 2 channels, got {channels}")
        self.channels = channels
        self.cond_channels = cond_channels
        self.clamp = float(clamp)
        self.index = index
        self.perm = rng.permutation(channels)
        self.inv_perm = np.argsort(self.perm)
        self.split_a = channels // 2
        self.split_b = channels - self.split_a
        hidden = hidden or 2 * channels
        self.net = MLP(self.split_a + cond_channels, hidden, 2 * self.split_b, rng, dtype, zero_last=zero_init)

    def named_parameters(self, prefix: str = ""):
        yield from self.net.named_parameters(prefix + "net.")

    def _check_inputs(self, h: Tensor, cond: Tensor | None) -> None:
        if h.shape[-1] != self.channels:
            raise DimensionError(f"coupling block {self.index}: expected {self.channels} channels, got {h.shape}")
        if self.cond_channels:
            if cond is None or cond.shape[-1] != self.cond_channels or cond.shape[:-1] != h.shape[:-1]:
                got = None if cond is None else cond.shape
                raise DimensionError(
                    f"coupling block {self.index}: condition must be {h.shape[:-1] + (self.cond_channels,)}, got {got}"
                )

    def scale_shift(self, h_a: Tensor, cond: Tensor | None) -> tuple[Tensor, Tensor]:
        inp = ad.concat([h_a, cond], axis=-1) if self.cond_channels else h_a
        raw_s, t = ad.split(self.net(inp), [self.split_b, self.split_b], axis=-1)
        s = ad.tanh(raw_s * (1.0 / self.clamp)) * self.clamp
        if not (np.all(np.isfinite(s.data)) and np.all(np.isfinite(t.data))):
            raise NumericError(f"coupling block {self.index}: non-finite scale or shift")
        return s, t

    def forward(self, h: Tensor, cond: Tensor | None = None) -> tuple[Tensor, Tensor]:
        self._check_inputs(h, cond)
        h_a, h_b = ad.split(ad.gather(h, self.perm, axis=-1), [self.split_a, self.split_b], axis=-1)
        s, t = self.scale_shift(h_a, cond)
        out = ad.concat([h_a, h_b * ad.exp(s) + t], axis=-1)
        return out, ad.sum(s, axis=-1)

    def inverse(self, z: Tensor, cond: Tensor | None = None) -> Tensor:
        self._check_inputs(z, cond)
        z_a, z_b = ad.split(z, [self.split_a, self.split_b], axis=-1)
        s, t = self.scale_shift(z_a, cond)
        h_b = (z_b - t) * ad.exp(-s)
        return ad.gather(ad.concat([z_a, h_b], axis=-1), self.inv_perm, axis=-1)


def coupling_forward(block: CouplingBlock, h: Tensor, cond: Tensor | None = None):
    return block.forward(h, cond)


def coupling_inverse(block: CouplingBlock, z: Tensor, cond: Tensor | None = None) -> Tensor:
    return block.inverse(z, cond)


class FlowBranch:
    """A stack of coupling blocks sharing one condition field."""

    def __init__(self, channels: int, cond_channels: int, n_blocks: int, rng: np.random.Generator,
                 hidden: int | None = None, clamp: float = DEFAULT_CLAMP, dtype=np.float32, zero_init: bool = True):
        self.channels = channels
        self.cond_channels = cond_channels
        self.blocks = [
            CouplingBlock(channels, cond_channels, rng, hidden=hidden, clamp=clamp, dtype=dtype,
                          zero_init=zero_init, index=k)
            for k in range(n_blocks)
        ]

    def named_parameters(self, prefix: str = ""):
        for k, block in enumerate(self.blocks):
            yield from block.named_parameters(f"{prefix}block{k}.")

    def forward(self, h: Tensor, cond: Tensor | None = None) -> tuple[Tensor, Tensor]:
        z = h
        total = None
        for block in self.blocks:
            z, logdet = block.forward(z, cond)
            total = logdet if total is None else total + logdet
        if total is None:
            total = Tensor(np.zeros(h.shape[:-1], dtype=h.dtype))
        return z, total

    def inverse(self, z: Tensor, cond: Tensor | None = None) -> Tensor:
        h = z
        for block in reversed(self.blocks):
            h = block.inverse(h, cond)
        return h


def flow_forward(branch: FlowBranch, h: Tensor, cond: Tensor | None = None):
    return branch.forward(h, cond)


def flow_inverse(branch: FlowBranch, z: Tensor, cond: Tensor | None = None) -> Tensor:
    return branch.inverse(z, cond)
