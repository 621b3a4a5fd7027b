"""Binary feature files, dataset manifests, checkpoints, CSV traces and PGM dumps."""
from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import struct
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import ANOMALOUS, NORMAL, FeatureSample
from .exceptions import FormatError, VersionError
from .model import ModelConfig, VqFlowModel

FEATURE_MAGIC = b"VQFT"
FEATURE_VERSION = 1
CHECKPOINT_MAGIC = b"VQCK"
CHECKPOINT_VERSION = 1
MANIFEST_HEADER = "# vqflow manifest v1"
MAX_ELEMENTS = 1 << 31

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_DTYPE_CODES = {v: k for k, v in _DTYPES.items()}


class _Reader:
    """Cursor over a byte buffer that reports offsets in its errors."""

    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise FormatError(
                f"truncated file: {what} needs {n} bytes, {len(self.buf) - self.pos} remain", self.pos
            )
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt), what))

    def array(self, dtype: np.dtype, shape: tuple[int, ...], what: str) -> np.ndarray:
        count = math.prod(shape)
        if count > MAX_ELEMENTS:
            raise FormatError(f"dimension overflow: {what} declares {count} elements", self.pos)
        raw = self.take(count * dtype.itemsize, what)
        return np.frombuffer(raw, dtype=dtype).reshape(shape).copy()

    def expect_end(self) -> None:
        if self.pos != len(self.buf):
            raise FormatError(f"{len(self.buf) - self.pos} trailing bytes", self.pos)


def _atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


# ---------------------------------------------------------------- feature files


def encode_feature_sample(sample: FeatureSample) -> bytes:
    parts = [FEATURE_MAGIC, struct.pack("<HH", FEATURE_VERSION, len(sample.features))]
    for h in sample.features:
        parts.append(struct.pack("<III", *h.shape))
    for h in sample.features:
        parts.append(np.ascontiguousarray(h, dtype="<f4").tobytes())
    parts.append(struct.pack("<BIB", sample.label, sample.class_id, int(sample.mask is not None)))
    if sample.mask is not None:
        parts.append(np.ascontiguousarray(sample.mask, dtype=np.uint8).tobytes())
    return b"".join(parts)


def decode_feature_sample(buf: bytes, sample_id: int = 0) -> FeatureSample:
    r = _Reader(buf)
    if r.take(4, "magic") != FEATURE_MAGIC:
        raise FormatError("bad magic, expected b'VQFT'", 0)
    version_at = r.pos
    version, n_scales = r.unpack("HH", "header")
    if version != FEATURE_VERSION:
        raise FormatError(f"unsupported feature file version {version}", version_at)
    if n_scales == 0:
        raise FormatError("scale count must be positive", version_at + 2)
    shapes = []
    for i in range(n_scales):
        at = r.pos
        shape = r.unpack("III", f"dims of scale {i}")
        if 0 in shape:
            raise FormatError(f"scale {i} has a zero dimension {shape}", at)
        shapes.append(shape)
    feats = [r.array(np.dtype("<f4"), s, f"payload of scale {i}") for i, s in enumerate(shapes)]
    label_at = r.pos
    label, class_id, has_mask = r.unpack("BIB", "trailer")
    if label not in (NORMAL, ANOMALOUS) or has_mask not in (0, 1):
        raise FormatError(f"invalid label {label} or mask flag {has_mask}", label_at)
    if bool(has_mask) != (label == ANOMALOUS):
        raise FormatError("mask present iff anomalous violated", label_at)
    mask = None
    if has_mask:
        mask = r.array(np.dtype(np.uint8), shapes[0][1:], "mask")
    r.expect_end()
    return FeatureSample(sample_id, class_id, [f.astype(np.float32) for f in feats], label, mask)


def write_feature_file(sample: FeatureSample, path) -> None:
    _atomic_write(path, encode_feature_sample(sample))


def read_feature_file(path, sample_id: int = 0) -> FeatureSample:
    return decode_feature_sample(Path(path).read_bytes(), sample_id=sample_id)


# ---------------------------------------------------------------- manifests


def write_dataset(out_dir, train: Sequence[FeatureSample], test: Sequence[FeatureSample]) -> Path:
    """Write every sample as a VQFT file plus a manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [MANIFEST_HEADER]
    for split, samples in (("train", train), ("test", test)):
        (out_dir / split).mkdir(exist_ok=True)
        for s in samples:
            rel = f"{split}/{s.sample_id:06d}.vqft"
            write_feature_file(s, out_dir / rel)
            lines.append(f"{split}\t{rel}")
    manifest = out_dir / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def read_manifest(path) -> list[tuple[str, Path]]:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.txt"
    entries = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        try:
            split, rel = line.split("\t")
        except ValueError:
            raise FormatError(f"{path}:{lineno}: expected '<split>\\t<path>'", 0) from None
        if split not in ("train", "test"):
            raise FormatError(f"{path}:{lineno}: unknown split {split!r}", 0)
        entries.append((split, path.parent / rel))
    return entries


def read_dataset(path) -> tuple[list[FeatureSample], list[FeatureSample]]:
    """Load a manifest's splits; asserts the train split is normal only."""
    train, test = [], []
    for k, (split, p) in enumerate(read_manifest(path)):
        sample = read_feature_file(p, sample_id=int(Path(p).stem) if Path(p).stem.isdigit() else k)
        (train if split == "train" else test).append(sample)
    bad = [s.sample_id for s in train if s.label == ANOMALOUS]
    if bad:
        raise FormatError(f"train split contains anomalous samples {bad[:5]}", 0)
    return train, test


# ---------------------------------------------------------------- checkpoints


def _config_blob(config: ModelConfig) -> bytes:
    return json.dumps(config.to_dict(), sort_keys=True).encode()


def encode_checkpoint(model: VqFlowModel) -> bytes:
    blob = _config_blob(model.config)
    arrays = model.state_arrays()
    parts = [CHECKPOINT_MAGIC, struct.pack("<HI", CHECKPOINT_VERSION, len(blob)), blob,
             struct.pack("<I", len(arrays))]
    for name, arr in arrays:
        dt = np.dtype(arr.dtype).newbyteorder("<")
        raw_name = name.encode()
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack("<BB", _DTYPE_CODES[dt], arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
    for _, arr in arrays:
        parts.append(np.ascontiguousarray(arr, dtype=np.dtype(arr.dtype).newbyteorder("<")).tobytes())
    return b"".join(parts)


def config_mismatch(stored: dict, expected: dict) -> list[str]:
    keys = sorted(set(stored) | set(expected))
    return [k for k in keys if stored.get(k) != expected.get(k)]


def decode_checkpoint(buf: bytes, expected: ModelConfig | None = None) -> VqFlowModel:
    r = _Reader(buf)
    if r.take(4, "magic") != CHECKPOINT_MAGIC:
        raise FormatError("bad magic, expected b'VQCK'", 0)
    version, blob_len = r.unpack("HI", "header")
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"checkpoint version {version} is not supported (expected {CHECKPOINT_VERSION})",
                           fields=("version",))
    at = r.pos
    try:
        stored = json.loads(r.take(blob_len, "config").decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable config block: {exc}", at) from None
    config = ModelConfig.from_dict(_tuplify(stored))
    if expected is not None:
        diff = config_mismatch(config.to_dict(), expected.to_dict())
        if diff:
            raise VersionError(f"checkpoint config differs in fields: {', '.join(diff)}", fields=diff)
    (n_entries,) = r.unpack("I", "entry count")
    header = []
    for k in range(n_entries):
        (n_len,) = r.unpack("H", f"name length of entry {k}")
        name = r.take(n_len, f"name of entry {k}").decode()
        at = r.pos
        code, ndim = r.unpack("BB", f"dtype of {name}")
        if code not in _DTYPES:
            raise FormatError(f"unknown dtype code {code} for {name}", at)
        shape = r.unpack(f"{ndim}I", f"shape of {name}") if ndim else ()
        header.append((name, _DTYPES[code], shape))
    arrays = {name: r.array(dt, shape, name) for name, dt, shape in header}
    r.expect_end()

    model = VqFlowModel(config)
    registry = [name for name, _ in model.state_arrays()]
    if registry != [name for name, _, _ in header]:
        missing = sorted(set(registry) ^ {name for name, _, _ in header})
        raise VersionError(f"parameter registry mismatch: {missing or 'order differs'}", fields=missing)
    model.load_state_arrays(arrays)
    return model


def _tuplify(d: dict) -> dict:
    out = {}
    for k, v in d.items():
        out[k] = tuple(tuple(x) if isinstance(x, list) else x for x in v) if isinstance(v, list) else v
    return out


def save_checkpoint(model: VqFlowModel, path) -> str:
    """Write the checkpoint and return its sha256 digest."""
    payload = encode_checkpoint(model)
    _atomic_write(path, payload)
    return hashlib.sha256(payload).hexdigest()


def load_checkpoint(path, expected: ModelConfig | None = None) -> VqFlowModel:
    return decode_checkpoint(Path(path).read_bytes(), expected=expected)


def checkpoint_digest(model: VqFlowModel) -> str:
    return hashlib.sha256(encode_checkpoint(model)).hexdigest()


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------- text outputs


def trace_header(n_branches: int, n_cspc: int) -> list[str]:
    return (["step"] + [f"L_f^{k + 1}" for k in range(n_branches)] + ["L_Qcp"]
            + [f"L_Qcsp^{k + 1}" for k in range(n_cspc)] + ["total"])


def write_loss_trace(path, rows: Iterable[Sequence[float]], n_branches: int, n_cspc: int) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(trace_header(n_branches, n_cspc))
        for step, row in enumerate(rows):
            w.writerow([step, *(repr(float(v)) for v in row)])


def read_loss_trace(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise FormatError(f"{path}: empty loss trace", 0)
    body = np.array([[float(v) for v in r] for r in rows[1:]], dtype=np.float64).reshape(-1, len(rows[0]))
    return rows[0], body


def write_pgm(path, grid: np.ndarray) -> tuple[float, float]:
    """Dump a 2-D map as binary P5 scaled to [0, 255]; returns ``(min, max)``."""
    grid = np.asarray(grid, dtype=np.float64)
    lo, hi = float(grid.min()), float(grid.max())
    scaled = np.zeros_like(grid) if hi == lo else (grid - lo) / (hi - lo) * 255.0
    pixels = np.rint(scaled).astype(np.uint8)
    header = f"P5\n{grid.shape[1]} {grid.shape[0]}\n255\n".encode()
    _atomic_write(path, header + pixels.tobytes())
    return lo, hi


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while buf[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not buf[pos:pos + 1].isspace():
            pos += 1
        tokens.append(buf[start:pos])
    if tokens[0] != b"P5":
        raise FormatError("not a P5 greymap", 0)
    w, h = int(tokens[1]), int(tokens[2])
    pos += 1
    r = _Reader(buf)
    r.pos = pos
    out = r.array(np.dtype(np.uint8), (h, w), "pixels")
    r.expect_end()
    return out
