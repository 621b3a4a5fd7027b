"""Deterministic synthetic multi-class feature stacks and anomaly injection.

Every class owns, per scale, a smooth spatial template plus a channel
signature.  A normal sample is its class template plus i.i.d. noise.  An
anomaly adds, inside one rectangle, a structured perturbation: the
difference between another class's template and the sample's own, plus a
smooth random field.  Both parts are aligned across scales.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .exceptions import ContractError

NORMAL, ANOMALOUS = 0, 1


@dataclass
class FeatureSample:
    """One multi-scale feature stack; ``features[i]`` is ``[D_i, H_i, W_i]``."""

    sample_id: int
    class_id: int
    features: list[np.ndarray]
    label: int = NORMAL
    mask: np.ndarray | None = None

    def __post_init__(self):
        if (self.mask is not None) != (self.label == ANOMALOUS):
            raise ContractError("a mask is present iff the sample is anomalous")

    @property
    def n_scales(self) -> int:
        return len(self.features)

    def equals(self, other: "FeatureSample") -> bool:
        """Bitwise equality of every field."""
        if (self.sample_id, self.class_id, self.label) != (other.sample_id, other.class_id, other.label):
            return False
        if len(self.features) != len(other.features):
            return False
        for a, b in zip(self.features, other.features):
            if a.dtype != b.dtype or a.shape != b.shape or a.tobytes() != b.tobytes():
                return False
        if (self.mask is None) != (other.mask is None):
            return False
        return self.mask is None or self.mask.tobytes() == other.mask.tobytes()


@dataclass
class SynthSpec:
    n_classes: int = 4
    channels: tuple[int, ...] = (16, 32, 64)
    spatial: tuple[tuple[int, int], ...] = ((32, 32), (16, 16), (8, 8))
    n_train: int = 200
    n_test: int = 100
    anomaly_fraction: float = 0.5
    noise: float = 0.1
    signature_scale: float = 1.0
    template_scale: float = 1.0
    patch_range: tuple[int, int] = (6, 12)
    magnitude: float = 1.0
    off_manifold: float = 0.08
    n_waves: int = 4

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.spatial = tuple((int(h), int(w)) for h, w in self.spatial)
        self.patch_range = tuple(int(p) for p in self.patch_range)

    @property
    def n_scales(self) -> int:
        return len(self.channels)

    def validate(self) -> None:
        if self.n_classes < 2:
            raise ContractError(f"multi-class data requires at least 2 classes, got {self.n_classes}")
        if len(self.spatial) != len(self.channels):
            raise ContractError("one spatial size per scale is required")
        for (h0, w0), (h1, w1) in zip(self.spatial, self.spatial[1:]):
            if h1 * 2 != h0 or w1 * 2 != w0:
                raise ContractError(f"spatial dims must halve per scale, got {self.spatial}")
        lo, hi = self.patch_range
        if not 1 <= lo <= hi:
            raise ContractError(f"invalid patch range {self.patch_range}")
        if not 0.0 <= self.anomaly_fraction <= 1.0:
            raise ContractError("anomaly_fraction must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


def _smooth_field(rng: np.random.Generator, H: int, W: int, n_waves: int, max_freq: float = 2.0) -> np.ndarray:
    m = np.arange(H)[:, None] / H
    n = np.arange(W)[None, :] / W
    out = np.zeros((H, W))
    for _ in range(n_waves):
        fy, fx = rng.uniform(-max_freq, max_freq, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        out += np.cos(2 * np.pi * (fy * m + fx * n) + phase)
    return out / np.sqrt(n_waves)


@dataclass
class ClassBank:
    """Per-class templates, ``templates[c][i]`` is ``[D_i, H_i, W_i]`` float64."""

    templates: list[list[np.ndarray]] = field(default_factory=list)


def class_templates(spec: SynthSpec, seed: int) -> ClassBank:
    spec.validate()
    bank = ClassBank()
    for c in range(spec.n_classes):
        rng = np.random.default_rng([seed, 1, c])
        per_scale = []
        for i, (D, (H, W)) in enumerate(zip(spec.channels, spec.spatial)):
            # class signature: orthogonal-ish random directions, shared seed per scale across classes
            sig_rng = np.random.default_rng([seed, 2, i])
            basis = np.linalg.qr(sig_rng.normal(size=(D, max(D, spec.n_classes))))[0]
            signature = basis[:, c % basis.shape[1]] * np.sqrt(D) * spec.signature_scale
            n_fields = 3
            fields_ = np.stack([_smooth_field(rng, H, W, spec.n_waves) for _ in range(n_fields)])
            mixing = rng.normal(size=(D, n_fields)) / np.sqrt(n_fields)
            spatial = np.einsum("dk,khw->dhw", mixing, fields_)
            spatial -= spatial.mean(axis=(1, 2), keepdims=True)
            per_scale.append(signature[:, None, None] + spec.template_scale * spatial)
        bank.templates.append(per_scale)
    return bank


def make_sample(bank: ClassBank, spec: SynthSpec, class_id: int, sample_id: int, rng: np.random.Generator) -> FeatureSample:
    feats = []
    for tmpl in bank.templates[class_id]:
        feats.append((tmpl + spec.noise * rng.normal(size=tmpl.shape)).astype(np.float32))
    return FeatureSample(sample_id=sample_id, class_id=class_id, features=feats)


def inject_anomaly(sample: FeatureSample, spec: SynthSpec, seed, bank: ClassBank | None = None,
                   bank_seed: int = 0, patch: tuple[int, int, int, int] | None = None):
    """Perturb a seeded rectangle of ``sample`` at every scale.

    Returns ``(anomalous_sample, mask)``; the mask is at the finest resolution.
    ``patch`` optionally fixes ``(top, left, height, width)`` at the finest scale.
    """
    if sample.label != NORMAL:
        raise ContractError("inject_anomaly: sample must be normal")
    bank = bank or class_templates(spec, bank_seed)
    rng = np.random.default_rng(seed)
    H1, W1 = sample.features[0].shape[1:]
    if patch is None:
        lo, hi = spec.patch_range
        ph = int(rng.integers(lo, hi + 1))
        pw = int(rng.integers(lo, hi + 1))
        if ph > H1 or pw > W1:
            raise ContractError(f"inject_anomaly: patch {ph}x{pw} larger than map {H1}x{W1}")
        top = int(rng.integers(0, H1 - ph + 1))
        left = int(rng.integers(0, W1 - pw + 1))
    else:
        top, left, ph, pw = patch
        if ph > H1 or pw > W1 or top < 0 or left < 0 or top + ph > H1 or left + pw > W1:
            raise ContractError(f"inject_anomaly: patch {patch} does not fit map {H1}x{W1}")
    mask = np.zeros((H1, W1), dtype=np.uint8)
    mask[top:top + ph, left:left + pw] = 1

    others = [c for c in range(len(bank.templates)) if c != sample.class_id]
    donor = int(rng.choice(others)) if others else sample.class_id
    feats = []
    for i, h in enumerate(sample.features):
        D, H, W = h.shape
        f = H1 // H
        # scale-aligned patch: every coarse cell touched by the fine rectangle
        r0, r1 = top // f, -(-(top + ph) // f)
        c0, c1 = left // f, -(-(left + pw) // f)
        own = bank.templates[sample.class_id][i][:, r0:r1, c0:c1]
        other = bank.templates[donor][i][:, r0:r1, c0:c1]
        direction = rng.normal(size=D)
        direction *= np.sqrt(D) / np.linalg.norm(direction)
        texture = _smooth_field(rng, r1 - r0, c1 - c0, 2, max_freq=1.0)
        perturb = (other - own) + spec.off_manifold * direction[:, None, None] * (1.0 + 0.5 * texture[None])
        out = h.copy()
        out[:, r0:r1, c0:c1] = (h[:, r0:r1, c0:c1] + spec.magnitude * perturb).astype(h.dtype)
        feats.append(out)
    anomalous = FeatureSample(sample.sample_id, sample.class_id, feats, label=ANOMALOUS, mask=mask)
    return anomalous, mask


def synth_dataset(spec: SynthSpec | None = None, seed: int = 0):
    """Return ``(train, test)``; train is normal only, test mixes normal and anomalous samples.

    Classes are assigned round-robin so every split is balanced.
    """
    spec = spec or SynthSpec()
    spec.validate()
    bank = class_templates(spec, seed)
    train = []
    rng = np.random.default_rng([seed, 3])
    for k in range(spec.n_train):
        train.append(make_sample(bank, spec, k % spec.n_classes, k, rng))
    test = []
    rng = np.random.default_rng([seed, 4])
    n_anom = int(round(spec.anomaly_fraction * spec.n_test))
    anomalous_ids = set(np.random.default_rng([seed, 5]).permutation(spec.n_test)[:n_anom].tolist())
    for k in range(spec.n_test):
        sample = make_sample(bank, spec, k % spec.n_classes, spec.n_train + k, rng)
        if k in anomalous_ids:
            sample, _ = inject_anomaly(sample, spec, seed=[seed, 6, k], bank=bank)
        test.append(sample)
    return train, test


def with_overrides(spec: SynthSpec, **kw) -> SynthSpec:
    return replace(spec, **kw)
