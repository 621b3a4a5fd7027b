"""Input validation helpers in the spirit of ``sklearn.utils.validation``.

Public inputs are channels-first (``[N, D, H, W]`` per scale, matching
FeatureSample); the model consumes channels-last arrays.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .data import ANOMALOUS, FeatureSample
from .exceptions import ContractError, DimensionError


def is_sample_sequence(X) -> bool:
    return isinstance(X, (list, tuple)) and len(X) > 0 and isinstance(X[0], FeatureSample)


def stack_samples(samples: Sequence[FeatureSample]) -> list[np.ndarray]:
    """Stack per-scale channels-first arrays ``[N, D_i, H_i, W_i]``."""
    n_scales = samples[0].n_scales
    out = []
    for i in range(n_scales):
        shapes = {s.features[i].shape for s in samples}
        if len(shapes) != 1:
            raise DimensionError(f"scale {i}: samples disagree on shape {sorted(shapes)}")
        out.append(np.stack([s.features[i] for s in samples]))
    return out


def check_feature_stack(X, require_normal: bool = False, dtype=np.float32) -> list[np.ndarray]:
    """Validate a feature stack and return channels-last arrays ``[N, H_i, W_i, D_i]``.

    ``X`` is a sequence of FeatureSample or a list of channels-first arrays,
    one per scale.
    """
    if is_sample_sequence(X):
        if any(len(s.features) != X[0].n_scales for s in X):
            raise DimensionError("samples disagree on the number of scales")
        if require_normal and any(s.label == ANOMALOUS for s in X):
            n_bad = sum(s.label == ANOMALOUS for s in X)
            raise ContractError(f"training data must be normal only; found {n_bad} anomalous samples")
        arrays = stack_samples(X)
    elif isinstance(X, (list, tuple)) and len(X) > 0 and all(hasattr(a, "shape") for a in X):
        arrays = [np.asarray(a) for a in X]
    else:
        raise ContractError("expected a non-empty sequence of FeatureSample or a list of per-scale arrays")

    n = arrays[0].shape[0] if arrays[0].ndim else 0
    if n == 0:
        raise ContractError("empty feature stack")
    for i, a in enumerate(arrays):
        if a.ndim != 4:
            raise DimensionError(f"scale {i}: expected [N, D, H, W], got shape {a.shape}")
        if a.shape[0] != n:
            raise DimensionError(f"scale {i}: {a.shape[0]} samples, expected {n}")
        if not np.all(np.isfinite(a)):
            raise ContractError(f"scale {i}: features contain non-finite values")
    for i in range(1, len(arrays)):
        (h0, w0), (h1, w1) = arrays[i - 1].shape[2:], arrays[i].shape[2:]
        if h0 != 2 * h1 or w0 != 2 * w1:
            raise DimensionError(f"spatial dims must halve per scale: scale {i - 1} {h0}x{w0}, scale {i} {h1}x{w1}")
    return [np.ascontiguousarray(np.moveaxis(a, 1, -1), dtype=dtype) for a in arrays]


def check_labels(y, n: int) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (n,):
        raise DimensionError(f"expected {n} labels, got shape {y.shape}")
    if not np.isin(y, (0, 1)).all():
        raise ContractError("labels must be 0 (normal) or 1 (anomalous)")
    return y.astype(np.int64)


def check_binary_masks(masks, shape: tuple[int, int]) -> np.ndarray:
    m = np.asarray(masks)
    if m.ndim != 3:
        raise DimensionError(f"expected masks [N, H, W], got {m.shape}")
    if not np.isin(m, (0, 1)).all():
        raise ContractError("masks must be binary")
    return m.astype(np.uint8)
