"""Accuracy, calibration and proper-scoring metrics, plus temperature scaling."""
from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import optimize, stats

NLL_FLOOR = 1e-12
ROW_TOL = 1e-6
T_BOUNDS = (0.05, 20.0)
HIST_BINS = 100


def _check(probs, labels) -> tuple[np.ndarray, np.ndarray]:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.ndim != 2 or len(probs) == 0:
        raise ValueError("probs must be a non-empty (n, K) matrix")
    if labels.shape != (len(probs),):
        raise ValueError(f"labels shape {labels.shape} != ({len(probs)},)")
    if probs.min() < -ROW_TOL or np.abs(probs.sum(axis=1) - 1.0).max() > ROW_TOL:
        raise ValueError("rows of probs must be probability distributions")
    if labels.min() < 0 or labels.max() >= probs.shape[1]:
        raise ValueError("labels out of range")
    return probs, labels.astype(np.int64)


def bin_index(conf: np.ndarray, num_bins: int) -> np.ndarray:
    """Equal-width bin of each confidence.

    A confidence on an interior edge goes to the upper bin; 1.0 goes to the
    last bin.
    """
    edges = np.arange(num_bins + 1) / num_bins
    idx = np.searchsorted(edges, conf, side="right") - 1
    return np.clip(idx, 0, num_bins - 1)


@dataclass
class CalibrationBins:
    num_bins: int
    counts: np.ndarray
    conf_sum: np.ndarray
    correct_sum: np.ndarray

    @classmethod
    def from_predictions(cls, probs, labels, num_bins: int = 10) -> CalibrationBins:
        probs, labels = _check(probs, labels)
        conf = probs.max(axis=1)
        correct = (probs.argmax(axis=1) == labels).astype(np.float64)
        idx = bin_index(conf, num_bins)
        return cls(
            num_bins,
            np.bincount(idx, minlength=num_bins),
            np.bincount(idx, weights=conf, minlength=num_bins),
            np.bincount(idx, weights=correct, minlength=num_bins),
        )

    def ece(self) -> float:
        n = int(self.counts.sum())
        total = 0.0
        for b in range(self.num_bins):
            c = int(self.counts[b])
            if c == 0:
                continue
            acc = self.correct_sum[b] / c
            conf = self.conf_sum[b] / c
            total += (c / n) * abs(acc - conf)
        return float(total)


def ece(probs, labels, num_bins: int = 10) -> float:
    """Expected calibration error with equal-width confidence bins."""
    return CalibrationBins.from_predictions(probs, labels, num_bins).ece()


def brier(probs, labels, per_class: bool = False) -> float:
    """Mean squared distance to the one-hot label; ``per_class`` divides by K."""
    probs, labels = _check(probs, labels)
    diff = probs.copy()
    diff[np.arange(len(labels)), labels] -= 1.0
    score = float(np.mean((diff ** 2).sum(axis=1)))
    return score / probs.shape[1] if per_class else score


def nll(probs, labels) -> float:
    """Mean negative log-likelihood; probabilities are floored at 1e-12."""
    probs, labels = _check(probs, labels)
    p = probs[np.arange(len(labels)), labels]
    return float(-np.mean(np.log(np.maximum(p, NLL_FLOOR))))


def accuracy(probs, labels) -> float:
    """Top-1 accuracy; argmax ties go to the lowest class index."""
    probs, labels = _check(probs, labels)
    return float(np.mean(probs.argmax(axis=1) == labels))


def auc(scores, labels) -> float:
    """Binary ROC AUC via the rank-sum statistic, ties given average rank."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both positive and negative examples")
    ranks = stats.rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def confidence_histogram(probs, labels, num_bins: int = HIST_BINS) -> tuple[np.ndarray, np.ndarray]:
    """Counts and correct counts per equal-width confidence bin."""
    b = CalibrationBins.from_predictions(probs, labels, num_bins)
    return b.counts.astype(np.int64), np.rint(b.correct_sum).astype(np.int64)


def _scaled_nll(log_t: float, logits: np.ndarray, labels: np.ndarray) -> float:
    z = logits / math.exp(log_t)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(labels)), labels].mean())


def fit_temperature(logits, labels) -> float:
    """Temperature in [0.05, 20] minimizing validation NLL of softmax(logits / T).

    Searches log T with bounded Brent (golden-section steps with parabolic
    acceleration). A validation set with a single class returns 1.0.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    if logits.ndim != 2 or len(logits) == 0:
        raise ValueError("validation logits must be a non-empty (n, K) matrix")
    if len(np.unique(labels)) < 2:
        warnings.warn("degenerate validation set (single class); using T=1", RuntimeWarning)
        return 1.0
    lo, hi = (math.log(b) for b in T_BOUNDS)
    res = optimize.minimize_scalar(_scaled_nll, bounds=(lo, hi), args=(logits, labels),
                                   method="bounded", options={"xatol": 1e-8})
    return float(math.exp(res.x))


def apply_temperature(logits, temperature: float) -> np.ndarray:
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class EvalRecord:
    """Metrics of one (method, shift, severity, batch size, seed) evaluation."""

    method: str
    shift: str
    severity: float
    batch_size: int
    eps: float
    seed: int
    accuracy: float
    ece: float
    brier: float
    brier_per_class: float
    nll: float
    n: int
    num_bins: int
    n_batches: int
    last_batch: int
    temperature: float = 1.0
    hist_counts: list[int] = field(default_factory=list)
    hist_correct: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError("accuracy outside [0, 1]")
        if self.brier < 0 or not 0.0 <= self.ece <= 1.0:
            raise ValueError("invalid Brier or ECE value")

    @classmethod
    def from_predictions(cls, probs, labels, *, num_bins: int = 10, **fields) -> EvalRecord:
        counts, correct = confidence_histogram(probs, labels)
        return cls(
            accuracy=accuracy(probs, labels),
            ece=ece(probs, labels, num_bins),
            brier=brier(probs, labels),
            brier_per_class=brier(probs, labels, per_class=True),
            nll=nll(probs, labels),
            n=len(labels),
            num_bins=num_bins,
            hist_counts=counts.tolist(),
            hist_correct=correct.tolist(),
            **fields,
        )

    def to_dict(self) -> dict:
        return asdict(self)
