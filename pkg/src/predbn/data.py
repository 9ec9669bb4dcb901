"""Seeded synthetic datasets: Gaussian-mixture tables and procedural images.

Both generators are deterministic functions of their arguments, so nothing is
downloaded and every split can be rebuilt bit-identically.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

IMAGE_CLASSES = (
    "hstripes", "vstripes", "checker", "disk", "ring",
    "square", "cross", "diagonal", "dots", "triangle",
)


@dataclass
class Dataset:
    """Features ``X`` (rank 2 or 4), integer labels ``y`` and free-form metadata."""

    X: np.ndarray
    y: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.ascontiguousarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if len(self.X) != len(self.y):
            raise ValueError(f"{len(self.X)} feature rows but {len(self.y)} labels")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def modality(self) -> str:
        return "image" if self.X.ndim == 4 else "tabular"

    def subset(self, idx) -> Dataset:
        return Dataset(self.X[idx], self.y[idx], dict(self.meta))


@dataclass
class Splits:
    train: Dataset
    val: Dataset
    test: Dataset


def _rng(seed: int, tag: str) -> np.random.Generator:
    # stream per purpose so changing one split size never perturbs another
    return np.random.Generator(np.random.PCG64([seed, sum(map(ord, tag)), len(tag)]))


def make_tabular(n_classes: int = 10, n_features: int = 20, n_train: int = 4000,
                 n_val: int = 1000, n_test: int = 2000, separation: float = 1.0,
                 nuisance_rank: int = 2, nuisance_scale: float = 20.0,
                 seed: int = 0) -> Splits:
    """Gaussian mixture with a class-shared covariance ``I + V V^T``.

    ``V`` (``n_features x nuisance_rank``) adds strong correlated nuisance
    variance. Discriminative directions end up roughly orthogonal to it, which
    is what makes marginal-preserving feature randomization a harsh covariate
    shift. Features are standardized with training-set moments.
    """
    if n_classes < 2:
        raise ValueError("need at least two classes")
    g = _rng(seed, "tabular-structure")
    means = g.normal(scale=separation, size=(n_classes, n_features))
    V = g.normal(scale=nuisance_scale / np.sqrt(n_features), size=(n_features, nuisance_rank))

    def draw(n: int, tag: str) -> Dataset:
        r = _rng(seed, tag)
        y = r.integers(0, n_classes, size=n)
        z = r.normal(size=(n, nuisance_rank))
        X = means[y] + z @ V.T + r.normal(size=(n, n_features))
        return Dataset(X, y)

    train, val, test = draw(n_train, "train"), draw(n_val, "val"), draw(n_test, "test")
    mu = train.X.mean(axis=0)
    sd = train.X.std(axis=0)
    for d in (train, val, test):
        d.X = (d.X - mu) / sd
        d.meta["source"] = "synthetic-tabular"
    return Splits(train, val, test)


def _grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    c = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    return np.meshgrid(c, c, indexing="ij")


def _shape_mask(cls: int, size: int, r: np.random.Generator) -> np.ndarray:
    yy, xx = _grid(size)
    cy, cx = r.uniform(-0.3, 0.3, size=2)
    dy, dx = yy - cy, xx - cx
    name = IMAGE_CLASSES[cls]
    freq = r.uniform(2.0, 3.5)
    phase = r.uniform(0, 2 * np.pi)
    if name == "hstripes":
        m = np.sin(np.pi * freq * yy + phase) > 0
    elif name == "vstripes":
        m = np.sin(np.pi * freq * xx + phase) > 0
    elif name == "checker":
        m = (np.sin(np.pi * freq * yy + phase) > 0) ^ (np.sin(np.pi * freq * xx + phase) > 0)
    elif name == "disk":
        m = dy ** 2 + dx ** 2 < r.uniform(0.3, 0.55) ** 2
    elif name == "ring":
        rad = np.sqrt(dy ** 2 + dx ** 2)
        r0 = r.uniform(0.35, 0.55)
        m = np.abs(rad - r0) < 0.12
    elif name == "square":
        h = r.uniform(0.3, 0.5)
        m = (np.abs(dy) < h) & (np.abs(dx) < h)
    elif name == "cross":
        w = r.uniform(0.1, 0.18)
        m = ((np.abs(dy) < w) | (np.abs(dx) < w)) & (np.abs(dy) < 0.7) & (np.abs(dx) < 0.7)
    elif name == "diagonal":
        m = np.sin(np.pi * freq * (yy + xx) / np.sqrt(2) + phase) > 0
    elif name == "dots":
        m = (np.sin(np.pi * freq * yy + phase) > 0.6) & (np.sin(np.pi * freq * xx + phase) > 0.6)
    else:  # triangle
        h = r.uniform(0.4, 0.6)
        m = (dy < h) & (dy > -h) & (np.abs(dx) < (dy + h) / 2)
    return m.astype(np.float64)


def make_images(n_classes: int = 10, size: int = 16, n_train: int = 3000,
                n_val: int = 500, n_test: int = 1000, noise: float = 0.15,
                seed: int = 0) -> Splits:
    """Procedural RGB shape/texture images in [-1, 1], shape (N, 3, size, size).

    Each class is a binary pattern (stripes, rings, checkerboards, ...) with
    random position, frequency and phase, painted with random foreground and
    background colours plus per-pixel Gaussian noise.
    """
    if not 2 <= n_classes <= len(IMAGE_CLASSES):
        raise ValueError(f"n_classes must lie in [2, {len(IMAGE_CLASSES)}]")

    def draw(n: int, tag: str) -> Dataset:
        r = _rng(seed, tag)
        y = r.integers(0, n_classes, size=n)
        X = np.empty((n, 3, size, size))
        for i, cls in enumerate(y):
            m = _shape_mask(int(cls), size, r)
            fg = r.uniform(-1, 1, size=3)
            bg = r.uniform(-1, 1, size=3)
            # keep a minimum foreground/background contrast
            while np.abs(fg - bg).max() < 0.6:
                bg = r.uniform(-1, 1, size=3)
            img = m[None] * fg[:, None, None] + (1 - m[None]) * bg[:, None, None]
            img += r.normal(scale=noise, size=img.shape)
            X[i] = np.clip(img, -1.0, 1.0)
        return Dataset(X, y, {"source": "synthetic-image"})

    return Splits(draw(n_train, "train"), draw(n_val, "val"), draw(n_test, "test"))
