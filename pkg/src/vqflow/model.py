"""Architecture configuration, model assembly and the batched forward pass."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .codebooks import (
    COMMITMENT_WEIGHT,
    Codebook,
    PositionalTable,
    QuantResult,
    capc_quantize,
    condition_field,
    cspc_quantize,
    quantize_nearest,
)
from .density import GaussianHeads, conditional_logprob, mixture_logprob, standard_logprob
from .exceptions import ConfigError, ContractError, DimensionError
from .flows import FlowBranch
from .layers import MLP, Linear

# (cadm, cpc, cspc, pe) for the rows of the component ablation
ABLATIONS: dict[int, tuple[bool, bool, bool, bool]] = {
    0: (False, False, False, False),
    1: (True, False, False, False),
    2: (False, True, False, False),
    3: (False, False, True, False),
    4: (True, True, False, False),
    5: (True, True, True, False),
    6: (True, True, True, True),
}


@dataclass
class ModelConfig:
    """Architecture of a VQ-Flow model.

    ``branches`` lists the scale indices that get a flow branch (``None``
    means every scale); ``(2,)`` on three scales is the single-branch semantic
    mode.  The prototype codebook always reads the last scale.
    """

    in_channels: tuple[int, ...] = (16, 32, 64)
    spatial: tuple[tuple[int, int], ...] = ((32, 32), (16, 16), (8, 8))
    branches: tuple[int, ...] | None = None
    n_blocks: int = 8
    d_cp: int = 256
    d_pe: int = 32
    d_csp: int | None = None
    k_cp: int = 32
    k_csp: int = 512
    cpc_hidden: int | None = None
    head_hidden: int | None = None
    coupling_hidden: int | None = None
    clamp: float = 2.0
    sigma_floor: float = 1e-3
    cadm: bool = True
    cpc: bool = True
    cspc: bool = True
    pe: bool = True
    straight_through: bool = True
    commitment: float = COMMITMENT_WEIGHT
    zero_init: bool = True
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        self.in_channels = tuple(int(c) for c in self.in_channels)
        self.spatial = tuple((int(h), int(w)) for h, w in self.spatial)
        if self.branches is not None:
            self.branches = tuple(int(b) for b in self.branches)

    @classmethod
    def from_ablation(cls, ablation_id: int, **kwargs) -> "ModelConfig":
        cadm, cpc, cspc, pe = ABLATIONS[ablation_id]
        return cls(cadm=cadm, cpc=cpc, cspc=cspc, pe=pe, **kwargs)

    @property
    def ablation_id(self) -> int | None:
        flags = (self.cadm, self.cpc, self.cspc, self.pe)
        for k, v in ABLATIONS.items():
            if v == flags:
                return k
        return None

    @property
    def branch_scales(self) -> tuple[int, ...]:
        return tuple(range(len(self.in_channels))) if self.branches is None else self.branches

    @property
    def pe_dim(self) -> int:
        return self.d_pe if self.pe else 0

    @property
    def pattern_dim(self) -> int:
        return self.d_cp + self.pe_dim

    @property
    def cond_dim(self) -> int:
        if self.cspc:
            return self.pattern_dim
        if self.cpc:
            return self.d_cp + self.pe_dim
        return self.pe_dim

    def validate(self) -> None:
        n = len(self.in_channels)
        problems = []
        if n < 1:
            problems.append("in_channels must list at least one scale")
        if len(self.spatial) != n:
            problems.append(f"len(spatial) == len(in_channels) violated: {len(self.spatial)} != {n}")
        if any(c < 2 for c in self.in_channels):
            problems.append("every scale needs at least 2 channels")
        if not self.branch_scales or any(not 0 <= b < n for b in self.branch_scales):
            problems.append(f"branches must index existing scales 0..{n - 1}, got {self.branches}")
        if self.d_pe % 2:
            problems.append(f"D_PE must be even, got {self.d_pe}")
        if self.d_csp is not None and self.cspc and self.d_csp != self.pattern_dim:
            problems.append(
                f"D_csp == D_cp + D_PE violated: {self.d_csp} != {self.d_cp} + {self.pe_dim}"
            )
        if self.k_cp < 1 or self.k_csp < 1:
            problems.append("codebook sizes must be positive")
        if self.n_blocks < 1:
            problems.append("n_blocks must be positive")
        if self.dtype not in ("float32", "float64"):
            problems.append(f"dtype must be float32 or float64, got {self.dtype}")
        if problems:
            raise ConfigError("; ".join(problems))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**d)


def desk_config(**overrides) -> ModelConfig:
    """Small architecture that trains on the default synthetic benchmark in about a minute."""
    base = dict(n_blocks=4, d_cp=16, d_pe=8, k_cp=8, k_csp=64, cpc_hidden=32, head_hidden=32)
    base.update(overrides)
    return ModelConfig(**base)


@dataclass
class BranchOutput:
    scale: int
    z: Tensor
    logdet: Tensor
    logprob: Tensor
    cond: Tensor | None = None
    h_proj: Tensor | None = None
    residual: Tensor | None = None
    quant: QuantResult | None = None

    @property
    def nll(self) -> Tensor:
        """Per-position negative log-likelihood ``-(log p(z) + log|det J|)``."""
        return -(self.logprob + self.logdet)


@dataclass
class ForwardOutput:
    branches: list[BranchOutput]
    y: Tensor | None = None
    y_hat: Tensor | None = None
    cpc_quant: QuantResult | None = None
    extras: dict = field(default_factory=dict)


class VqFlowModel:
    """All learnable state plus the architecture config.

    Feature stacks are passed as a list with one channels-last array
    ``[N, H_i, W_i, D_i]`` per scale.
    """

    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        dtype = np.dtype(config.dtype)
        self.dtype = dtype
        rng = np.random.default_rng(config.seed)
        c = config
        d_last = c.in_channels[-1]
        self.d_z = max(c.in_channels[i] for i in c.branch_scales)

        self.cpc_proj = MLP(d_last, c.cpc_hidden or c.d_cp, c.d_cp, rng, dtype) if (c.cpc or c.cadm) else None
        self.cpc_codebook = None
        if c.cpc:
            self.cpc_codebook = Codebook(
                rng.normal(0.0, 1.0, size=(c.k_cp, c.d_cp)).astype(dtype), name="cpc"
            )
        self.heads = (
            GaussianHeads(c.d_cp, self.d_z, rng, hidden=c.head_hidden, sigma_floor=c.sigma_floor, dtype=dtype)
            if c.cadm else None
        )
        self.projections: dict[int, Linear] = {}
        self.cspc_codebooks: dict[int, Codebook] = {}
        self.pe_tables: dict[int, PositionalTable] = {}
        self.flows: dict[int, FlowBranch] = {}
        for i in c.branch_scales:
            if c.cspc:
                self.projections[i] = Linear(c.in_channels[i], c.pattern_dim, rng, dtype)
                self.cspc_codebooks[i] = Codebook(
                    rng.normal(0.0, 1.0, size=(c.k_csp, c.pattern_dim)).astype(dtype), name=f"cspc{i}"
                )
            if c.pe:
                self.pe_tables[i] = PositionalTable(*c.spatial[i], c.d_pe)
            self.flows[i] = FlowBranch(
                c.in_channels[i], c.cond_dim, c.n_blocks, rng, hidden=c.coupling_hidden,
                clamp=c.clamp, dtype=dtype, zero_init=c.zero_init,
            )

    # ------------------------------------------------------------ registry

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = []
        if self.cpc_proj is not None:
            out += list(self.cpc_proj.named_parameters("cpc_proj."))
        if self.cpc_codebook is not None:
            out.append(("cpc.codewords", self.cpc_codebook.codewords))
        if self.heads is not None:
            out += list(self.heads.named_parameters("heads."))
        for i in self.config.branch_scales:
            if i in self.projections:
                out += list(self.projections[i].named_parameters(f"proj{i}."))
                out.append((f"cspc{i}.codewords", self.cspc_codebooks[i].codewords))
            out += list(self.flows[i].named_parameters(f"flow{i}."))
        return out

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def codebooks(self) -> dict[str, Codebook]:
        books = {}
        if self.cpc_codebook is not None:
            books["cpc"] = self.cpc_codebook
        for i, cb in self.cspc_codebooks.items():
            books[f"cspc{i}"] = cb
        return books

    @property
    def codebooks_initialized(self) -> bool:
        return all(cb.initialized for cb in self.codebooks().values())

    # ------------------------------------------------------------ forward

    def _check_features(self, feats: Sequence[Tensor]) -> None:
        c = self.config
        if len(feats) != len(c.in_channels):
            raise DimensionError(f"expected {len(c.in_channels)} scales, got {len(feats)}")
        for i, f in enumerate(feats):
            if f.ndim != 4 or f.shape[-1] != c.in_channels[i]:
                raise DimensionError(
                    f"scale {i}: expected [N, H, W, {c.in_channels[i]}] channels-last features, got {f.shape}"
                )
            if i in c.branch_scales and c.pe and tuple(f.shape[1:3]) != c.spatial[i]:
                raise DimensionError(f"scale {i}: spatial size {f.shape[1:3]} != configured {c.spatial[i]}")

    def encode_prototype(self, h_last: Tensor) -> Tensor:
        """Pooled and projected top-scale features, ``[N, D_cp]``."""
        return self.cpc_proj(ad.avg_pool_spatial(h_last, channels_last=True))

    def forward(self, feats: Sequence, track_usage: bool = False, skip_flows: bool = False) -> ForwardOutput:
        c = self.config
        feats = [f if isinstance(f, Tensor) else Tensor(np.asarray(f, dtype=self.dtype)) for f in feats]
        self._check_features(feats)
        st = c.straight_through
        n = feats[0].shape[0]

        y = y_hat = cpc_q = None
        if self.cpc_proj is not None:
            y = self.encode_prototype(feats[-1])
        if c.cpc:
            cpc_q = quantize_nearest(self.cpc_codebook, y, straight_through=st, track_usage=track_usage)
            y_hat = cpc_q.quantized
        # prototype feeding the density heads: quantised with CPC, continuous without
        head_input = y_hat if c.cpc else y

        branches = []
        for i in c.branch_scales:
            h = feats[i]
            H, W = h.shape[1:3]
            pe = self.pe_tables[i].channels_last(self.dtype) if c.pe else None
            h_proj = residual = quant = None
            if c.cspc:
                h_proj = self.projections[i](h)
                cb = self.cspc_codebooks[i]
                if c.cpc:
                    cond, residual, quant = cspc_quantize(h_proj, y_hat, pe, cb, st, track_usage)
                elif c.pe:
                    zeros = Tensor(np.zeros((n, c.d_cp), dtype=self.dtype))
                    cond, residual, quant = cspc_quantize(h_proj, zeros, pe, cb, st, track_usage)
                else:
                    cond, quant = capc_quantize(h_proj, cb, st, track_usage)
                    residual = h_proj
            else:
                cond = condition_field(y_hat, pe, (H, W), (n,))
            if skip_flows:
                branches.append(BranchOutput(i, None, None, None, cond, h_proj, residual, quant))
                continue
            z, logdet = self.flows[i].forward(h, cond)
            if c.cadm:
                logprob = conditional_logprob(z, head_input, self.heads)
            else:
                logprob = standard_logprob(z)
            branches.append(BranchOutput(i, z, logdet, logprob, cond, h_proj, residual, quant))
        return ForwardOutput(branches=branches, y=y, y_hat=y_hat, cpc_quant=cpc_q)

    def inverse(self, zs: dict[int, Tensor], conds: dict[int, Tensor | None]) -> dict[int, Tensor]:
        return {i: self.flows[i].inverse(zs[i], conds.get(i)) for i in zs}

    def mixture_logprob(self, z: Tensor) -> Tensor:
        if self.heads is None or self.cpc_codebook is None:
            raise ContractError("mixture density needs both the prototype codebook and the Gaussian heads")
        return mixture_logprob(z, self.cpc_codebook, self.heads)

    # ------------------------------------------------------------ state

    def state_arrays(self) -> list[tuple[str, np.ndarray]]:
        """Parameters plus codebook usage counters in fixed registry order."""
        out = [(name, p.data) for name, p in self.named_parameters()]
        for name, cb in self.codebooks().items():
            out.append((f"{name}.usage", cb.usage_counts))
            out.append((f"{name}.initialized", np.array([int(cb.initialized)], dtype=np.int64)))
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        for name, p in params.items():
            if name not in arrays:
                raise ContractError(f"missing parameter {name}")
            if arrays[name].shape != p.shape:
                raise DimensionError(f"{name}: stored shape {arrays[name].shape} != model shape {p.shape}")
            p.data[...] = arrays[name]
        for name, cb in self.codebooks().items():
            cb.usage_counts[...] = arrays[f"{name}.usage"]
            cb.initialized = bool(arrays[f"{name}.initialized"][0])

    def copy(self) -> "VqFlowModel":
        twin = VqFlowModel(replace(self.config))
        twin.load_state_arrays(dict(self.state_arrays()))
        return twin


def build_model(config: ModelConfig | None = None, **overrides) -> VqFlowModel:
    config = config or ModelConfig()
    if overrides:
        config = replace(config, **overrides)
    return VqFlowModel(config)
