"""Covariate-shift generators.

Image corruptions act on (N, C, H, W) inputs in [-1, 1] and clamp back into
that range. Feature randomization acts on (N, F) tables. Severity tables are
this package's own constants, loosely modelled on the usual corruption
benchmark conventions.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy import ndimage

from .data import Dataset


class ShiftKind(str, Enum):
    IDENTITY = "identity"
    GAUSSIAN_NOISE = "gaussian_noise"
    IMPULSE_NOISE = "impulse_noise"
    GAUSSIAN_BLUR = "gaussian_blur"
    CONTRAST = "contrast"
    PIXELATE = "pixelate"
    FEATURE_RANDOMIZE = "feature_randomize"


IMAGE_KINDS = (
    ShiftKind.GAUSSIAN_NOISE,
    ShiftKind.IMPULSE_NOISE,
    ShiftKind.GAUSSIAN_BLUR,
    ShiftKind.CONTRAST,
    ShiftKind.PIXELATE,
)

DYNAMIC_RANGE = 2.0  # inputs live in [-1, 1]

# severity 1..5 -> parameter; every table is monotone in distortion
SEVERITY = {
    # noise std as a fraction of the dynamic range
    ShiftKind.GAUSSIAN_NOISE: (0.04, 0.08, 0.12, 0.18, 0.26),
    # fraction of pixels replaced by salt or pepper
    ShiftKind.IMPULSE_NOISE: (0.03, 0.06, 0.09, 0.17, 0.27),
    # blur sigma in pixels
    ShiftKind.GAUSSIAN_BLUR: (0.4, 0.6, 0.8, 1.0, 1.4),
    # contrast multiplier around the per-image channel mean
    ShiftKind.CONTRAST: (0.75, 0.5, 0.4, 0.3, 0.15),
    # side length of the downsampled image, as a fraction of the original
    ShiftKind.PIXELATE: (0.9, 0.75, 0.6, 0.5, 0.35),
}

# FeatureRandomize severity is the replacement probability itself; these are
# the default grid levels
FEATURE_RANDOMIZE_LEVELS = (0.05, 0.25, 0.5, 0.75, 0.95)


class ShiftError(ValueError):
    """A shift was applied to inputs of the wrong modality or severity."""


@dataclass(frozen=True)
class ShiftSpec:
    kind: ShiftKind | str
    severity: float = 1
    seed: int = 0

    def __post_init__(self):
        kind = ShiftKind(self.kind)
        object.__setattr__(self, "kind", kind)
        s = self.severity
        if kind is ShiftKind.IDENTITY:
            object.__setattr__(self, "severity", 0)
        elif kind is ShiftKind.FEATURE_RANDOMIZE:
            if not 0.0 < s <= 1.0:
                raise ShiftError(f"feature_randomize probability must lie in (0, 1], got {s}")
        elif s not in (1, 2, 3, 4, 5):
            raise ShiftError(f"{kind.value} severity must be an integer 1-5, got {s}")
        else:
            object.__setattr__(self, "severity", int(s))

    @property
    def modality(self) -> str | None:
        if self.kind is ShiftKind.IDENTITY:
            return None
        return "tabular" if self.kind is ShiftKind.FEATURE_RANDOMIZE else "image"

    @property
    def parameter(self) -> float:
        if self.kind is ShiftKind.IDENTITY:
            return 0.0
        if self.kind is ShiftKind.FEATURE_RANDOMIZE:
            return float(self.severity)
        return SEVERITY[self.kind][int(self.severity) - 1]

    def rng(self) -> np.random.Generator:
        code = list(ShiftKind).index(self.kind)
        return np.random.Generator(np.random.PCG64(
            [self.seed, code, int(round(float(self.severity) * 1000))]))

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "severity": self.severity, "seed": self.seed}


def _gaussian_noise(X, p, rng):
    return X + rng.normal(scale=p * DYNAMIC_RANGE, size=X.shape)


def _impulse_noise(X, p, rng):
    out = X.copy()
    hit = rng.random(X.shape) < p
    salt = rng.random(X.shape) < 0.5
    out[hit & salt] = 1.0
    out[hit & ~salt] = -1.0
    return out


def _gaussian_blur(X, p, rng):
    return ndimage.gaussian_filter(X, sigma=(0, 0, p, p), mode="reflect")


def _contrast(X, p, rng):
    mu = X.mean(axis=(2, 3), keepdims=True)
    return (X - mu) * p + mu


def _pixelate(X, p, rng):
    H, W = X.shape[2:]
    h, w = max(2, int(round(H * p))), max(2, int(round(W * p)))
    # area-average onto an h x w grid, then nearest-neighbour back up
    ry = np.minimum((np.arange(H) * h) // H, h - 1)
    rx = np.minimum((np.arange(W) * w) // W, w - 1)
    sums = np.zeros(X.shape[:2] + (h, w))
    counts = np.zeros((h, w))
    np.add.at(counts, (ry[:, None], rx[None, :]), 1.0)
    for i in range(H):
        for j in range(W):
            sums[:, :, ry[i], rx[j]] += X[:, :, i, j]
    small = sums / counts
    return small[:, :, ry][:, :, :, rx]


_IMAGE_OPS = {
    ShiftKind.GAUSSIAN_NOISE: _gaussian_noise,
    ShiftKind.IMPULSE_NOISE: _impulse_noise,
    ShiftKind.GAUSSIAN_BLUR: _gaussian_blur,
    ShiftKind.CONTRAST: _contrast,
    ShiftKind.PIXELATE: _pixelate,
}


def feature_randomize(X: np.ndarray, p: float, rng: np.random.Generator,
                      reference: np.ndarray | None = None) -> np.ndarray:
    """Replace each entry with probability ``p`` by a draw from that column's marginal.

    Replacement values are resampled from ``reference`` (the training features)
    column by column; without a reference the input's own columns are used.
    """
    ref = X if reference is None else np.asarray(reference, dtype=np.float64)
    if ref.ndim != 2 or ref.shape[1] != X.shape[1]:
        raise ShiftError("reference features must be a table with matching columns")
    hit = rng.random(X.shape) < p
    rows = rng.integers(0, len(ref), size=X.shape)
    replacement = ref[rows, np.arange(X.shape[1])[None, :]]
    return np.where(hit, replacement, X)


def apply_shift(X: np.ndarray, spec: ShiftSpec, reference: np.ndarray | None = None) -> np.ndarray:
    """Shifted copy of ``X``; deterministic in (``X``, ``spec``)."""
    X = np.asarray(X, dtype=np.float64)
    if spec.kind is ShiftKind.IDENTITY:
        return X.copy()
    modality = "image" if X.ndim == 4 else "tabular" if X.ndim == 2 else None
    if modality != spec.modality:
        raise ShiftError(f"{spec.kind.value} needs {spec.modality} inputs, got shape {X.shape}")
    rng = spec.rng()
    if spec.kind is ShiftKind.FEATURE_RANDOMIZE:
        return feature_randomize(X, spec.parameter, rng, reference)
    out = _IMAGE_OPS[spec.kind](X, spec.parameter, rng)
    return np.clip(out, -1.0, 1.0)


def build_split(dataset: Dataset, spec: ShiftSpec, reference: np.ndarray | None = None) -> Dataset:
    """Shifted copy of a dataset: features transformed, labels untouched."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    meta = dict(dataset.meta)
    meta.update({"shift": spec.kind.value, "severity": spec.severity, "shift_seed": spec.seed})
    return Dataset(apply_shift(dataset.X, spec, reference), dataset.y.copy(), meta)


def build_mixed_batch(splits: list[Dataset], batch_size: int, seed: int) -> Dataset:
    """One batch whose slots are drawn uniformly from the given splits.

    Each slot independently picks a split, then distinct examples are drawn
    within each split. ``meta["composition"]`` records the per-split counts.
    """
    if not splits:
        raise ValueError("no splits to mix")
    if batch_size < len(splits):
        raise ValueError(f"batch size {batch_size} is smaller than the {len(splits)} splits mixed")
    rng = np.random.Generator(np.random.PCG64([seed, len(splits), batch_size]))
    which = rng.integers(0, len(splits), size=batch_size)
    X, y = [], []
    counts = np.bincount(which, minlength=len(splits))
    for k, split in enumerate(splits):
        if counts[k] > len(split):
            raise ValueError(f"split {k} has only {len(split)} examples")
        idx = rng.choice(len(split), size=counts[k], replace=False)
        X.append(split.X[idx])
        y.append(split.y[idx])
    order = rng.permutation(batch_size)
    return Dataset(np.concatenate(X)[order], np.concatenate(y)[order],
                   {"shift": "mixed", "composition": counts.tolist()})


def build_mixed_split(splits: list[Dataset], seed: int) -> Dataset:
    """Per-example mixture of aligned splits of the same test set.

    Example i comes from a uniformly chosen split, so every prediction batch
    holds a blend of shift kinds while each test example still appears once.
    """
    if not splits:
        raise ValueError("no splits to mix")
    n = len(splits[0])
    if any(len(s) != n for s in splits):
        raise ValueError("splits must be aligned (same length)")
    rng = np.random.Generator(np.random.PCG64([seed, len(splits), n]))
    which = rng.integers(0, len(splits), size=n)
    stacked = np.stack([s.X for s in splits])
    X = stacked[which, np.arange(n)]
    return Dataset(X, splits[0].y.copy(), {
        "shift": "mixed",
        "composition": np.bincount(which, minlength=len(splits)).tolist(),
    })
