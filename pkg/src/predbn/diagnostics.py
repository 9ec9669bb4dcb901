"""Activation-distribution diagnostics.

Moment-matched Gaussian discrepancy between train and test activations,
covariance eigenspectra, and shared-range histograms for overlay plots.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

RIDGE = 1e-6
SYMMETRY_TOL = 1e-8


class SingularCovarianceError(np.linalg.LinAlgError):
    pass


@dataclass
class ActivationSummary:
    """Per-channel moments of one layer's activations from one source.

    ``cov`` is the full channel covariance for the penultimate and logit
    layers and ``None`` for internal layers, where only the diagonal is kept.
    """

    layer: str
    mean: np.ndarray
    var: np.ndarray
    cov: np.ndarray | None
    samples: np.ndarray
    n: int
    source: str = ""
    mode: str = ""

    @property
    def channels(self) -> int:
        return self.mean.shape[0]


class Reservoir:
    """Uniform fixed-size sample of a row stream (Algorithm R, seeded)."""

    def __init__(self, capacity: int, seed: int = 0):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.rng = np.random.Generator(np.random.PCG64(seed))
        self.rows: list[np.ndarray] = []
        self.seen = 0

    def extend(self, rows: np.ndarray) -> None:
        for row in rows:
            if len(self.rows) < self.capacity:
                self.rows.append(np.array(row))
            else:
                j = int(self.rng.integers(0, self.seen + 1))
                if j < self.capacity:
                    self.rows[j] = np.array(row)
            self.seen += 1

    def samples(self) -> np.ndarray:
        return np.array(self.rows)


def summarize(values: np.ndarray, layer: str, source: str = "", mode: str = "",
              full_cov: bool = True, samples: np.ndarray | None = None) -> ActivationSummary:
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2 or len(values) == 0:
        raise ValueError("expected a non-empty (n, channels) matrix")
    mean = values.mean(axis=0)
    centered = values - mean
    var = (centered ** 2).mean(axis=0)
    cov = None
    if full_cov:
        cov = centered.T @ centered / len(values)
        cov = (cov + cov.T) / 2
    return ActivationSummary(layer, mean, var, cov, values if samples is None else samples,
                             len(values), source, mode)


def _gaussian(summary: ActivationSummary, full: bool) -> tuple[np.ndarray, np.ndarray]:
    cov = summary.cov if full else np.diag(summary.var)
    lam = RIDGE * float(np.mean(np.diag(cov)))
    return summary.mean, cov + lam * np.eye(len(cov))


def gaussian_log_density(h: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as err:
        raise SingularCovarianceError("covariance is singular after regularization") from err
    z = np.linalg.solve(L, (h - mean).T)
    logdet = 2.0 * np.log(np.diag(L)).sum()
    d = len(mean)
    return -0.5 * ((z ** 2).sum(axis=0) + logdet + d * np.log(2 * np.pi))


def gaussian_kl_discrepancy(train: ActivationSummary, test: ActivationSummary,
                            test_samples: np.ndarray | None = None) -> float:
    """Mean over test activations of ``ln q(h) - ln p(h)``.

    ``p`` and ``q`` are normals moment-matched to the train and test
    summaries, so this is a test-sample estimate of KL(q || p). Full
    covariances are used when both summaries carry them, diagonal ones
    otherwise.
    """
    if train.channels != test.channels or train.layer != test.layer:
        raise ValueError("summaries must describe the same layer and channel count")
    h = test.samples if test_samples is None else np.asarray(test_samples, dtype=np.float64)
    if h.ndim == 1:
        h = h[:, None]
    full = train.cov is not None and test.cov is not None
    mp, cp = _gaussian(train, full)
    mq, cq = _gaussian(test, full)
    return float(np.mean(gaussian_log_density(h, mq, cq) - gaussian_log_density(h, mp, cp)))


def covariance_eigenspectrum(summary_or_cov) -> np.ndarray:
    """Eigenvalues of a covariance matrix, descending; tiny negatives set to 0."""
    cov = summary_or_cov.cov if isinstance(summary_or_cov, ActivationSummary) else summary_or_cov
    if cov is None:
        raise ValueError("summary has no covariance matrix")
    cov = np.asarray(cov, dtype=np.float64)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ValueError(f"covariance must be square, got {cov.shape}")
    scale = max(1.0, float(np.abs(cov).max()))
    if np.abs(cov - cov.T).max() > SYMMETRY_TOL * scale:
        raise ValueError("covariance matrix is not symmetric")
    lam = np.linalg.eigvalsh(cov)[::-1]
    if lam.min() < -1e-8 * scale:
        raise ValueError(f"covariance is not positive semi-definite (min eigenvalue {lam.min():.3g})")
    return np.where(lam < 0, 0.0, lam)


def histogram_dump(summaries: list[ActivationSummary], channels=None, bins: int = 50) -> list[dict]:
    """Per-channel histograms over a range shared by all compared sources.

    Returns one row per (source, mode, channel, bin).
    """
    if not summaries:
        raise ValueError("no summaries given")
    if any(len(s.samples) == 0 for s in summaries):
        raise ValueError("summary has no retained samples")
    C = summaries[0].channels
    chans = range(C) if channels is None else list(channels)
    rows = []
    for c in chans:
        lo = min(float(s.samples[:, c].min()) for s in summaries)
        hi = max(float(s.samples[:, c].max()) for s in summaries)
        if hi <= lo:
            hi = lo + 1.0
        edges = np.linspace(lo, hi, bins + 1)
        for s in summaries:
            counts, _ = np.histogram(s.samples[:, c], bins=edges)
            for b in range(bins):
                rows.append({
                    "layer": s.layer, "source": s.source, "mode": s.mode, "channel": int(c),
                    "bin": b, "lo": float(edges[b]), "hi": float(edges[b + 1]),
                    "count": int(counts[b]),
                })
    return rows


def spearman(x, y) -> float:
    return float(stats.spearmanr(x, y).statistic)
