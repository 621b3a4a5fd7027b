"""Vector quantisation: codebooks, nearest-codeword search, residual pattern
quantisation with positional conditioning, and the codebook losses.

Feature maps inside the model are channels-last, ``[..., H, W, D]``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .exceptions import ContractError, DimensionError

COMMITMENT_WEIGHT = 0.25

# relative slack under which the fast distance expansion is re-checked exactly
_NEAR_TIE = 1e-3


class Codebook:
    """A ``K x D`` table of codewords with usage statistics."""

    def __init__(self, codewords, name: str = "codebook"):
        codewords = codewords if isinstance(codewords, Tensor) else Tensor(codewords)
        if codewords.ndim != 2 or min(codewords.shape) < 1:
            raise ContractError(f"{name}: codewords must be a non-empty K x D table, got {codewords.shape}")
        if not np.all(np.isfinite(codewords.data)):
            raise ContractError(f"{name}: codewords must be finite")
        codewords.requires_grad = True
        self.codewords = codewords
        self.name = name
        self.usage_counts = np.zeros(codewords.shape[0], dtype=np.int64)
        self.initialized = False

    @property
    def K(self) -> int:
        return self.codewords.shape[0]

    @property
    def D(self) -> int:
        return self.codewords.shape[1]

    def reset_usage(self) -> None:
        self.usage_counts[:] = 0

    def record_usage(self, indices: np.ndarray) -> None:
        self.usage_counts += np.bincount(np.ravel(indices), minlength=self.K)


@dataclass
class QuantResult:
    """Output of a nearest-codeword lookup.

    ``codes`` are the selected codewords and carry gradient to the codebook;
    ``quantized`` is what downstream consumers see.
    """

    indices: np.ndarray
    quantized: Tensor
    codes: Tensor
    sq_distance: np.ndarray


def _exact_sq_dist(v: np.ndarray, c: np.ndarray) -> np.ndarray:
    diff = v[:, None, :].astype(np.float64) - c[None, :, :].astype(np.float64)
    return np.sum(diff * diff, axis=-1)


def nearest_indices(v: np.ndarray, codewords: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Index of the nearest codeword for each row of ``v`` (lowest index on ties).

    Distances are first ranked with the BLAS expansion
    ``|v|^2 - 2 v.c + |c|^2``; rows whose two best candidates are within the
    expansion's rounding slack are re-ranked with exact float64 differences, so
    the result agrees with an exhaustive scan.
    """
    v2 = v.reshape(-1, v.shape[-1])
    n, k = v2.shape[0], codewords.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    vv = np.einsum("nd,nd->n", v2, v2)[:, None]
    cc = np.einsum("kd,kd->k", codewords, codewords)[None, :]
    d = vv - 2.0 * (v2 @ codewords.T) + cc
    idx = np.argmin(d, axis=1)
    if k > 1:
        best = d[np.arange(n), idx]
        d[np.arange(n), idx] = np.inf
        runner = d.min(axis=1)
        scale = vv[:, 0] + cc.max() + 1.0
        suspect = np.nonzero(runner - best <= _NEAR_TIE * scale)[0]
        for start in range(0, suspect.size, 256):
            rows = suspect[start:start + 256]
            idx[rows] = np.argmin(_exact_sq_dist(v2[rows], codewords), axis=1)
    chosen = codewords[idx]
    diff = v2.astype(np.float64) - chosen.astype(np.float64)
    sq = np.sum(diff * diff, axis=-1)
    return idx.reshape(v.shape[:-1]), sq.reshape(v.shape[:-1])


def quantize_nearest(cb: Codebook, v: Tensor, straight_through: bool = True, track_usage: bool = False) -> QuantResult:
    """Replace every trailing-dimension vector of ``v`` by its nearest codeword.

    With ``straight_through`` the forward value is the codeword while the
    backward pass routes gradients to ``v``; otherwise gradients flow to the
    selected codewords.
    """
    if v.shape[-1:] != (cb.D,):
        raise ContractError(f"quantize_nearest: input trailing dim {v.shape[-1:]} != codeword dim {cb.D}")
    idx, sq = nearest_indices(v.data, cb.codewords.data.astype(v.dtype, copy=False))
    codes = ad.gather(cb.codewords, idx, axis=0)
    quantized = ad.pass_through(codes, v) if straight_through else codes
    if track_usage:
        cb.record_usage(idx)
    return QuantResult(indices=idx, quantized=quantized, codes=codes, sq_distance=sq)


def vq_loss(v: Tensor, quantized: Tensor, straight_through: bool = True,
            commitment: float = COMMITMENT_WEIGHT) -> Tensor:
    """Codebook loss whose value is the plain mean squared error.

    In straight-through mode the gradient is the split form
    ``mse(sg(v), q) + commitment * mse(v, sg(q))``; the commitment part is
    added as ``c - sg(c)`` so it contributes gradient but no value.  Otherwise
    the gradient of plain ``mse(v, q)`` flows to both sides.
    """
    if v.shape != quantized.shape:
        raise DimensionError(f"vq_loss: shapes differ {v.shape} vs {quantized.shape}")
    if not straight_through:
        d = v - quantized
        return ad.mean(d * d)
    d_code = ad.stop_gradient(v) - quantized
    codebook_term = ad.mean(d_code * d_code)
    d_commit = v - ad.stop_gradient(quantized)
    commit = ad.mean(d_commit * d_commit)
    return codebook_term + commitment * (commit - ad.stop_gradient(commit))


class PositionalTable:
    """Fixed sinusoidal positional embedding, stored as ``[D_PE, H, W]``."""

    def __init__(self, H: int, W: int, d_pe: int, base: float = 10000.0):
        if d_pe < 0 or d_pe % 2:
            raise ContractError(f"positional_embedding: D_PE must be even, got {d_pe}")
        self.H, self.W, self.d_pe, self.base = H, W, d_pe, base
        half = d_pe // 2
        rows = _sinusoid(np.arange(H), half, base)  # [H, half]
        cols = _sinusoid(np.arange(W), half, base)  # [W, half]
        emb = np.concatenate(
            [np.broadcast_to(rows[:, None, :], (H, W, half)), np.broadcast_to(cols[None, :, :], (H, W, half))],
            axis=-1,
        )
        self.embedding = np.ascontiguousarray(emb.transpose(2, 0, 1))

    def channels_last(self, dtype=np.float32) -> np.ndarray:
        return np.ascontiguousarray(self.embedding.transpose(1, 2, 0)).astype(dtype)


def _sinusoid(pos: np.ndarray, n: int, base: float) -> np.ndarray:
    # channel j: sin for even j, cos for odd j, frequency base^(-2*(j//2)/n)
    j = np.arange(n)
    freq = base ** (-2.0 * (j // 2) / max(n, 1))
    angle = pos[:, None].astype(np.float64) * freq[None, :]
    return np.where(j % 2 == 0, np.sin(angle), np.cos(angle))


def positional_embedding(H: int, W: int, d_pe: int) -> PositionalTable:
    return PositionalTable(H, W, d_pe)


def condition_field(y_hat: Tensor | None, pe: np.ndarray | None, spatial: tuple[int, int],
                    batch_shape: tuple = ()) -> Tensor | None:
    """Per-position condition ``<PE, y_hat>``, channels-last ``[*batch, H, W, D_PE + D_cp]``."""
    H, W = spatial
    parts = []
    if pe is not None:
        dtype = y_hat.dtype if y_hat is not None else np.float32
        parts.append(Tensor(np.broadcast_to(pe.astype(dtype), batch_shape + (H, W, pe.shape[-1]))))
    if y_hat is not None:
        yb = ad.reshape(y_hat, y_hat.shape[:-1] + (1, 1, y_hat.shape[-1]))
        parts.append(ad.broadcast_to(yb, y_hat.shape[:-1] + (H, W, y_hat.shape[-1])))
    if not parts:
        return None
    return parts[0] if len(parts) == 1 else ad.concat(parts, axis=-1)


def cspc_quantize(h_proj: Tensor, y_hat: Tensor, pe: PositionalTable | np.ndarray | None, cb: Codebook,
                  straight_through: bool = True, track_usage: bool = False):
    """Residual quantisation of a projected feature map against ``<PE, y_hat>``.

    ``h_proj`` is ``[..., H, W, D_csp]`` and ``y_hat`` is ``[..., D_cp]``.
    Returns ``(h_hat, residual, quant_result)`` where
    ``h_hat = Q(h_proj - cond) + cond``.
    """
    *_, H, W, d_csp = h_proj.shape
    pe_cl = _pe_channels_last(pe, H, W)
    d_pe = 0 if pe_cl is None else pe_cl.shape[-1]
    d_cp = y_hat.shape[-1]
    if d_csp != d_cp + d_pe or cb.D != d_csp:
        raise ContractError(
            f"cspc_quantize: channel alignment requires D_csp == D_cp + D_PE and codeword dim == D_csp; "
            f"got D_cp={d_cp}, D_PE={d_pe}, D_csp={d_csp}, codeword dim={cb.D}"
        )
    cond = condition_field(y_hat, pe_cl, (H, W), tuple(h_proj.shape[:-3]))
    residual = h_proj - cond
    q = quantize_nearest(cb, residual, straight_through=straight_through, track_usage=track_usage)
    return q.quantized + cond, residual, q


def capc_quantize(h_proj: Tensor, cb: Codebook, straight_through: bool = True, track_usage: bool = False):
    """Plain per-position quantisation, no conditioning.  Returns ``(h_hat, quant_result)``."""
    if h_proj.shape[-1] != cb.D:
        raise ContractError(f"capc_quantize: channel dim {h_proj.shape[-1]} != codeword dim {cb.D}")
    q = quantize_nearest(cb, h_proj, straight_through=straight_through, track_usage=track_usage)
    return q.quantized, q


def _pe_channels_last(pe, H, W):
    if pe is None:
        return None
    if isinstance(pe, PositionalTable):
        if (pe.H, pe.W) != (H, W):
            raise ContractError(f"positional table is {pe.H}x{pe.W}, feature map is {H}x{W}")
        return pe.channels_last()
    return np.asarray(pe)


def codebook_init(samples: np.ndarray, K: int, seed: int = 0, name: str = "codebook", dtype=None) -> Codebook:
    """k-means++ seeding: first centre uniform, later ones proportional to squared distance."""
    samples = np.asarray(samples)
    samples = samples.reshape(-1, samples.shape[-1])
    n = samples.shape[0]
    if n < K:
        raise ContractError(f"codebook_init: need at least K={K} samples, got {n}")
    rng = np.random.default_rng(seed)
    chosen = [int(rng.integers(n))]
    d2 = _exact_sq_dist(samples, samples[chosen])[:, 0]
    for _ in range(1, K):
        total = d2.sum()
        if total <= 0:
            remaining = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rng.choice(remaining))
        else:
            nxt = int(rng.choice(n, p=d2 / total))
        chosen.append(nxt)
        d2 = np.minimum(d2, _exact_sq_dist(samples, samples[[nxt]])[:, 0])
    cw = samples[chosen].astype(dtype or samples.dtype)
    cb = Codebook(cw, name=name)
    cb.initialized = True
    return cb


def reseed_codebook(cb: Codebook, samples: np.ndarray, seed: int) -> None:
    """Overwrite ``cb`` in place with a k-means++ seeding from ``samples``."""
    fresh = codebook_init(samples, cb.K, seed=seed, dtype=cb.codewords.dtype)
    cb.codewords.data[...] = fresh.codewords.data
    cb.initialized = True
    cb.reset_usage()


def revive_dead_codes(cb: Codebook, recent_inputs: np.ndarray, threshold: int = 1, seed: int = 0) -> np.ndarray:
    """Reassign codewords used fewer than ``threshold`` times to random recent inputs.

    Usage counters are reset afterwards.  Returns the revived indices.
    """
    recent = np.asarray(recent_inputs).reshape(-1, cb.D)
    if recent.shape[0] < 1:
        raise ContractError("revive_dead_codes: need at least one recent input")
    dead = np.nonzero(cb.usage_counts < threshold)[0]
    if dead.size:
        rng = np.random.default_rng(seed)
        pick = rng.choice(recent.shape[0], size=dead.size, replace=recent.shape[0] < dead.size)
        cb.codewords.data[dead] = recent[pick].astype(cb.codewords.dtype)
    cb.reset_usage()
    return dead
