"""Concept-aware base densities: Gaussian heads on prototypes and the
dedicated-component and mixture log-likelihoods built from them."""
from __future__ import annotations

import math

import numpy as np
from scipy.special import logsumexp

from . import autodiff as ad
from .autodiff import Tensor
from .exceptions import ContractError
from .layers import MLP

LOG_2PI = math.log(2.0 * math.pi)
SIGMA_FLOOR = 1e-3


def gaussian_logprob(z, mu, sigma) -> Tensor:
    """Diagonal Gaussian log-density summed over the trailing (channel) axis."""
    z = ad.as_tensor(z)
    mu = ad.as_tensor(mu, z)
    sigma = ad.as_tensor(sigma, z)
    if np.any(sigma.data <= 0):
        raise ContractError("gaussian_logprob: sigma must be strictly positive")
    log_sigma = ad.log(sigma)
    scaled = (z - mu) * ad.exp(-log_sigma)
    per_elem = (-0.5 * LOG_2PI) - log_sigma - 0.5 * (scaled * scaled)
    if per_elem.shape != z.shape:
        per_elem = ad.broadcast_to(per_elem, np.broadcast_shapes(per_elem.shape, z.shape))
    return ad.sum(per_elem, axis=-1)


def standard_logprob(z: Tensor) -> Tensor:
    """Log-density under N(0, I); identical to ``gaussian_logprob(z, 0, 1)``."""
    return gaussian_logprob(z, np.zeros((), dtype=z.dtype), np.ones((), dtype=z.dtype))


class GaussianHeads:
    """Mean and scale networks mapping a prototype to ``(mu, sigma)``.

    One pair is shared by every flow branch; it predicts ``d_out`` channels
    and a branch with fewer channels uses the leading ones.
    """

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, hidden: int | None = None,
                 sigma_floor: float = SIGMA_FLOOR, dtype=np.float32):
        hidden = hidden or d_in
        self.d_in = d_in
        self.d_out = d_out
        self.sigma_floor = sigma_floor
        self.mu_net = MLP(d_in, hidden, d_out, rng, dtype, zero_last=True)
        self.sigma_net = MLP(d_in, hidden, d_out, rng, dtype, zero_last=True)

    def named_parameters(self, prefix: str = ""):
        yield from self.mu_net.named_parameters(prefix + "mu.")
        yield from self.sigma_net.named_parameters(prefix + "sigma.")

    def __call__(self, c: Tensor) -> tuple[Tensor, Tensor]:
        return prototype_params(c, self)


def prototype_params(c, heads: GaussianHeads) -> tuple[Tensor, Tensor]:
    c = ad.as_tensor(c)
    if c.shape[-1] != heads.d_in:
        raise ContractError(f"prototype_params: prototype dim {c.shape[-1]} != head input dim {heads.d_in}")
    mu = heads.mu_net(c)
    sigma = ad.softplus(heads.sigma_net(c)) + heads.sigma_floor
    return mu, sigma


def _leading(x: Tensor, n: int) -> Tensor:
    return x if x.shape[-1] == n else ad.split(x, [n, x.shape[-1] - n], axis=-1)[0]


def _spatial(x: Tensor) -> Tensor:
    # [..., D] -> [..., 1, 1, D] so it broadcasts over positions
    return ad.reshape(x, x.shape[:-1] + (1, 1, x.shape[-1]))


def conditional_logprob(z: Tensor, y_hat: Tensor, heads: GaussianHeads) -> Tensor:
    """Log-density of ``z [..., H, W, D]`` under the component of prototype ``y_hat [..., D_cp]``."""
    mu, sigma = prototype_params(y_hat, heads)
    d = z.shape[-1]
    return gaussian_logprob(z, _spatial(_leading(mu, d)), _spatial(_leading(sigma, d)))


def mixture_logprob(z, prototypes, heads: GaussianHeads) -> Tensor:
    """``log((1/K) sum_k N(z; mu(c_k), sigma(c_k)^2))`` per position.

    ``prototypes`` is a codebook, a codeword tensor or a ``K x D_cp`` array.
    The result carries no gradient; it is a scoring density.
    """
    cw = ad.as_tensor(getattr(prototypes, "codewords", prototypes))
    z = ad.as_tensor(z)
    mu, sigma = prototype_params(Tensor(cw.data.astype(z.dtype)), heads)
    d = z.shape[-1]
    # [..., 1, D] against [K, D] gives one log-density per component
    per_k = gaussian_logprob(Tensor(z.data[..., None, :]), _leading(mu, d), _leading(sigma, d)).data
    return Tensor((logsumexp(per_k, axis=-1) - math.log(cw.shape[0])).astype(z.dtype))
