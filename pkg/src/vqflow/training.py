"""Unified objective, Adam, and the end-to-end training loop."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import GradientTape, Tensor
from .codebooks import reseed_codebook, revive_dead_codes, vq_loss
from .exceptions import ConfigError, ContractError, NumericError
from .model import ForwardOutput, VqFlowModel

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 16
    epochs: int = 100
    alpha: float | tuple[float, ...] = 1.0
    beta: float = 1.0
    gamma: float | tuple[float, ...] = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float | None = 10.0
    revive_threshold: int = 1
    checkpoint_every: int = 0
    checkpoint_dir: str | None = None
    seed: int = 0

    def validate(self) -> None:
        if self.batch_size < 1 or self.epochs < 0 or self.lr <= 0:
            raise ConfigError("batch_size >= 1, epochs >= 0 and lr > 0 are required")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def _weight(w, k: int, n: int) -> float:
    if isinstance(w, (int, float)):
        return float(w)
    if len(w) != n:
        raise ConfigError(f"expected {n} per-branch loss weights, got {len(w)}")
    return float(w[k])


@dataclass
class LossBreakdown:
    """Reported loss terms.  ``total`` is the weighted sum of the others."""

    flow: list[float]
    cpc: float
    cspc: list[float]
    total: float
    objective: Tensor | None = field(default=None, repr=False)

    def row(self) -> list[float]:
        return [*self.flow, self.cpc, *self.cspc, self.total]


def unified_loss(model: VqFlowModel, batch: Sequence, config: TrainConfig | None = None,
                 track_usage: bool = False, forward: ForwardOutput | None = None) -> LossBreakdown:
    """Weighted flow NLL plus prototype and pattern codebook losses.

    Disabled components contribute 0 and build no graph.
    """
    config = config or TrainConfig()
    if len(batch) == 0 or len(batch[0]) == 0:
        raise ContractError("unified_loss: empty batch")
    c = model.config
    st = c.straight_through
    out = forward or model.forward(batch, track_usage=track_usage)
    n_br = len(out.branches)

    terms: list[Tensor] = []
    flow_vals: list[float] = []
    cspc_vals: list[float] = []
    total = 0.0
    for k, br in enumerate(out.branches):
        lf = ad.mean(br.nll)
        val = float(lf.data)
        if not math.isfinite(val):
            raise NumericError(f"unified_loss: flow NLL of branch {br.scale} is not finite")
        a = _weight(config.alpha, k, n_br)
        terms.append(lf * a)
        flow_vals.append(val)
        total += a * val

    cpc_val = 0.0
    if c.cpc:
        lq = vq_loss(out.y, out.cpc_quant.codes, straight_through=st, commitment=c.commitment)
        cpc_val = float(lq.data)
        if not math.isfinite(cpc_val):
            raise NumericError("unified_loss: prototype codebook loss is not finite")
        terms.append(lq * config.beta)
        total += config.beta * cpc_val

    if c.cspc:
        for k, br in enumerate(out.branches):
            lq = vq_loss(br.residual, br.quant.codes, straight_through=st, commitment=c.commitment)
            val = float(lq.data)
            if not math.isfinite(val):
                raise NumericError(f"unified_loss: pattern codebook loss of scale {br.scale} is not finite")
            g = _weight(config.gamma, k, n_br)
            terms.append(lq * g)
            cspc_vals.append(val)
            total += g * val

    objective = terms[0]
    for t in terms[1:]:
        objective = objective + t
    return LossBreakdown(flow=flow_vals, cpc=cpc_val, cspc=cspc_vals, total=total, objective=objective)


# ---------------------------------------------------------------- optimiser


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0


def init_adam_state(params: dict[str, Tensor]) -> AdamState:
    return AdamState(
        m={k: np.zeros_like(p.data) for k, p in params.items()},
        v={k: np.zeros_like(p.data) for k, p in params.items()},
    )


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState,
              lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if state.m[name].shape != p.shape:
            raise ContractError(f"adam_step: state shape mismatch for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p.data -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype, copy=False)
    return state


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float | None) -> float:
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if max_norm is not None and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


# ---------------------------------------------------------------- loop


@dataclass
class TrainResult:
    model: VqFlowModel
    trace: list[LossBreakdown]
    checkpoints: list[str]

    def trace_rows(self) -> list[list[float]]:
        return [lb.row() for lb in self.trace]


class TrainingDiverged(NumericError):
    def __init__(self, message, result: TrainResult):
        super().__init__(message)
        self.result = result


def _slice(feats: list[np.ndarray], idx) -> list[np.ndarray]:
    return [f[idx] for f in feats]


def initialize_codebooks(model: VqFlowModel, feats: list[np.ndarray], seed: int = 0) -> None:
    """k-means++ seeding of every codebook from a batch of training features."""
    c = model.config
    books = model.codebooks()
    if not books:
        return
    if c.cpc:
        y = model.encode_prototype(Tensor(feats[-1].astype(model.dtype)))
        reseed_codebook(model.cpc_codebook, y.data, seed=seed)
    if c.cspc:
        out = model.forward(feats, skip_flows=True)
        for k, br in enumerate(out.branches):
            reseed_codebook(model.cspc_codebooks[br.scale], br.residual.data, seed=seed + 1 + k)


def train(model: VqFlowModel, dataset, config: TrainConfig | None = None, on_step=None) -> TrainResult:
    """Jointly optimise flows, codebooks, projections and density heads.

    ``dataset`` holds normal samples only: a sequence of FeatureSample or a
    list of channels-last arrays, one per scale.
    """
    from .validation import check_feature_stack
    from .io import save_checkpoint

    config = config or TrainConfig()
    config.validate()
    feats = check_feature_stack(dataset, require_normal=True, dtype=model.dtype)
    n = feats[0].shape[0]
    params = model.parameters()
    state = init_adam_state(params)
    rng = np.random.default_rng(config.seed)
    trace: list[LossBreakdown] = []
    checkpoints: list[str] = []
    good_state = model.state_arrays()
    good_state = [(k, v.copy()) for k, v in good_state]
    result = TrainResult(model, trace, checkpoints)
    # codebooks are seeded from data even when no gradient step is taken
    order = rng.permutation(n)
    if not model.codebooks_initialized:
        k_needed = max([model.config.k_cp if model.config.cpc else 0, config.batch_size])
        initialize_codebooks(model, _slice(feats, order[:max(k_needed, 1)]), seed=config.seed)
    if config.epochs == 0:
        return result

    step = 0
    for epoch in range(config.epochs):
        if epoch:
            order = rng.permutation(n)
        recent = {}
        for start in range(0, n, config.batch_size):
            batch = _slice(feats, order[start:start + config.batch_size])
            for p in params.values():
                p.zero_grad()
            try:
                with GradientTape(params) as tape:
                    out = model.forward(batch, track_usage=True)
                    lb = unified_loss(model, batch, config, forward=out)
                grads = ad.backward(lb.objective, tape)
            except NumericError as exc:
                model.load_state_arrays(dict(good_state))
                raise TrainingDiverged(f"training diverged at step {step}: {exc}", result) from exc
            clip_global_norm(grads, config.clip_norm)
            adam_step(params, grads, state, config.lr, config.beta1, config.beta2, config.adam_eps)
            lb.objective = None
            trace.append(lb)
            if out.y is not None and model.config.cpc:
                recent["cpc"] = out.y.data
            for br in out.branches:
                if br.residual is not None:
                    recent[f"cspc{br.scale}"] = br.residual.data
            if on_step is not None:
                on_step(step, lb)
            step += 1

        for name, cb in model.codebooks().items():
            if name in recent:
                revived = revive_dead_codes(cb, recent[name], threshold=config.revive_threshold,
                                            seed=config.seed * 100003 + epoch)
                if revived.size:
                    log.debug("epoch %d: revived %d codes in %s", epoch, revived.size, name)
        good_state = [(k, v.copy()) for k, v in model.state_arrays()]
        log.info("epoch %d/%d total=%.4f", epoch + 1, config.epochs, trace[-1].total)
        if config.checkpoint_every and config.checkpoint_dir and (epoch + 1) % config.checkpoint_every == 0:
            path = Path(config.checkpoint_dir) / f"epoch{epoch + 1:04d}.vqck"
            path.parent.mkdir(parents=True, exist_ok=True)
            save_checkpoint(model, path)
            checkpoints.append(str(path))
    return result
