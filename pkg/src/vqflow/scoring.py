"""Anomaly maps, image scores, AUROC and the evaluation report."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .data import FeatureSample
from .exceptions import ContractError
from .model import VqFlowModel
from .validation import check_feature_stack

DENSITY_MODES = ("dedicated", "mixture")
SCORE_MODES = ("max", "mean")


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Half-pixel-centred linear interpolation weights, ``[n_out, n_in]``."""
    out = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    out[np.arange(n_out), lo] += 1 - frac
    out[np.arange(n_out), hi] += frac
    return out


def upsample_bilinear(maps: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Resize ``[..., H, W]`` to ``[..., *size]``; identity when sizes agree."""
    H, W = maps.shape[-2:]
    if (H, W) == tuple(size):
        return maps
    ry = _interp_matrix(H, size[0])
    rx = _interp_matrix(W, size[1])
    return np.einsum("ah,...hw,bw->...ab", ry, maps, rx)


def resample_nearest(masks: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    H, W = masks.shape[-2:]
    rows = np.minimum(((np.arange(size[0]) + 0.5) * H / size[0]).astype(int), H - 1)
    cols = np.minimum(((np.arange(size[1]) + 0.5) * W / size[1]).astype(int), W - 1)
    return masks[..., rows[:, None], cols[None, :]]


def branch_nll_maps(model: VqFlowModel, feats: list[np.ndarray], density_mode: str = "dedicated") -> list[np.ndarray]:
    """Per-branch ``-[log p(z) + log|det J|]`` fields, ``[N, H_i, W_i]`` each (channels-last input)."""
    if density_mode not in DENSITY_MODES:
        raise ContractError(f"density_mode must be one of {DENSITY_MODES}, got {density_mode!r}")
    out = model.forward(feats)
    maps = []
    for br in out.branches:
        if density_mode == "mixture":
            logprob = model.mixture_logprob(br.z).data
        else:
            logprob = br.logprob.data
        maps.append(-(logprob.astype(np.float64) + br.logdet.data.astype(np.float64)))
    return maps


def anomaly_maps(model: VqFlowModel, samples, density_mode: str = "dedicated", batch_size: int = 32) -> np.ndarray:
    """Summed, upsampled NLL maps at the finest branch resolution, ``[N, H, W]``."""
    try:
        feats = check_feature_stack(samples, dtype=model.dtype)
    except ValueError as exc:
        raise ContractError(f"anomaly_map: {exc}") from exc
    c = model.config
    if len(feats) != len(c.in_channels) or any(f.shape[-1] != d for f, d in zip(feats, c.in_channels)):
        raise ContractError(
            f"anomaly_map: sample channels {[f.shape[-1] for f in feats]} do not match model {list(c.in_channels)}"
        )
    target = feats[min(c.branch_scales)].shape[1:3]
    n = feats[0].shape[0]
    chunks = []
    for start in range(0, n, batch_size):
        batch = [f[start:start + batch_size] for f in feats]
        per_branch = branch_nll_maps(model, batch, density_mode)
        chunks.append(sum(upsample_bilinear(m, target) for m in per_branch))
    return np.concatenate(chunks, axis=0)


def anomaly_map(model: VqFlowModel, sample: FeatureSample, density_mode: str = "dedicated") -> np.ndarray:
    return anomaly_maps(model, [sample], density_mode)[0]


def image_score(amap: np.ndarray, mode: str = "max") -> float | np.ndarray:
    """Spatial max (default) or mean of one map ``[H, W]`` or a stack ``[N, H, W]``."""
    amap = np.asarray(amap)
    if amap.size == 0:
        raise ContractError("image_score: empty map")
    if mode not in SCORE_MODES:
        raise ContractError(f"score mode must be one of {SCORE_MODES}, got {mode!r}")
    reduce = np.max if mode == "max" else np.mean
    out = reduce(amap, axis=(-2, -1))
    return float(out) if np.ndim(out) == 0 else out


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC; ties between a positive and a negative count one half."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ContractError(f"auroc: {scores.size} scores but {labels.size} labels")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ContractError("auroc: both classes must be present")
    ranks = rankdata(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def pixel_auroc(maps: np.ndarray, masks: np.ndarray) -> float:
    maps = np.asarray(maps)
    masks = np.asarray(masks)
    if masks.shape[-2:] != maps.shape[-2:]:
        masks = resample_nearest(masks, maps.shape[-2:])
    if not masks.any():
        raise ContractError("pixel_auroc: masks contain no anomalous position")
    return auroc(maps.ravel(), (masks.ravel() > 0).astype(np.int64))


@dataclass
class EvalReport:
    det_auroc: float
    loc_auroc: float | None
    sample_ids: list[int]
    labels: list[int]
    scores: list[float]
    density_mode: str = "dedicated"
    score_mode: str = "max"
    codebook_usage: dict[str, list[int]] = field(default_factory=dict)
    loss_trace: str | None = None
    map_ranges: dict[str, list[float]] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        report = cls(**d)
        report.validate()
        return report

    def validate(self) -> None:
        for name in ("det_auroc", "loc_auroc"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ContractError(f"{name}={v} outside [0, 1]")
        if not len(self.sample_ids) == len(self.labels) == len(self.scores):
            raise ContractError("report columns have different lengths")


def _collect_usage(model: VqFlowModel, feats: list[np.ndarray], batch_size: int) -> dict[str, list[int]]:
    books = model.codebooks()
    saved = {k: cb.usage_counts.copy() for k, cb in books.items()}
    for cb in books.values():
        cb.reset_usage()
    n = feats[0].shape[0]
    for start in range(0, n, batch_size):
        model.forward([f[start:start + batch_size] for f in feats], track_usage=True, skip_flows=True)
    usage = {k: cb.usage_counts.tolist() for k, cb in books.items()}
    for k, cb in books.items():
        cb.usage_counts[...] = saved[k]
    return usage


def evaluate(model: VqFlowModel, test_set: Sequence[FeatureSample], density_mode: str = "dedicated",
             score_mode: str = "max", batch_size: int = 32, return_maps: bool = False):
    """Score a labelled test set; returns an EvalReport (and the maps if asked)."""
    labels = np.array([s.label for s in test_set], dtype=np.int64)
    if labels.min() == labels.max():
        raise ContractError("evaluate: test set needs both normal and anomalous samples")
    maps = anomaly_maps(model, test_set, density_mode, batch_size)
    scores = image_score(maps, score_mode)
    loc = None
    masked = [(k, s.mask) for k, s in enumerate(test_set) if s.mask is not None]
    if masked:
        full = np.zeros((len(test_set),) + masked[0][1].shape, dtype=np.uint8)
        for k, m in masked:
            full[k] = m
        loc = pixel_auroc(maps, full)
    feats = check_feature_stack(test_set, dtype=model.dtype)
    report = EvalReport(
        det_auroc=auroc(scores, labels),
        loc_auroc=loc,
        sample_ids=[int(s.sample_id) for s in test_set],
        labels=labels.tolist(),
        scores=[float(v) for v in scores],
        density_mode=density_mode,
        score_mode=score_mode,
        codebook_usage=_collect_usage(model, feats, batch_size),
    )
    return (report, maps) if return_maps else report
