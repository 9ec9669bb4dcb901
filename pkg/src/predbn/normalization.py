"""Normalization layers and the statistic-selection modes of batch norm.

A batch-norm layer normalizes with one of four statistic sources:

* ``TRAIN``       - batch moments, gradient flows through them, EMA updated
* ``EVAL_EMA``    - the exponential moving averages accumulated in training
* ``EVAL_BATCH``  - moments of the current prediction batch
* ``EVAL_FROZEN`` - moments captured once from a reference batch

Instance, layer and group norm always use per-example statistics and have no
train/eval asymmetry.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Iterator, Protocol

import numpy as np

from .tensor import Tensor, channel_affine, moments, reshape, standardize

WS_EPS = 1e-10


class Mode(str, Enum):
    TRAIN = "train"
    EVAL_EMA = "eval_ema"
    EVAL_BATCH = "eval_batch"
    EVAL_FROZEN = "eval_frozen"


PREDICTION_MODES = (Mode.EVAL_EMA, Mode.EVAL_BATCH, Mode.EVAL_FROZEN)


class NormKind(str, Enum):
    BATCH = "batch"
    INSTANCE = "instance"
    LAYER = "layer"
    GROUP = "group"
    NONE = "none"


class FrozenStatsError(RuntimeError):
    """EVAL_FROZEN was requested before statistics were frozen."""


@dataclass
class NormState:
    """Parameters and running statistics of one batch-norm layer."""

    gamma: Tensor
    beta: Tensor
    ema_mean: np.ndarray
    ema_var: np.ndarray
    eps: float = 1e-3
    momentum: float = 0.99
    mode: Mode = Mode.TRAIN
    frozen_mean: np.ndarray | None = None
    frozen_var: np.ndarray | None = None
    # prediction-time only; never applied in TRAIN mode
    eps_override: float | None = None
    # when set, the next forward stores the batch moments it sees as frozen stats
    capture: bool = field(default=False, repr=False)

    @classmethod
    def create(cls, channels: int, eps: float = 1e-3, momentum: float = 0.99) -> NormState:
        if eps <= 0:
            raise ValueError("eps must be > 0")
        if not 0.0 < momentum < 1.0:
            raise ValueError("momentum must lie in (0, 1)")
        return cls(
            gamma=Tensor(np.ones(channels), requires_grad=True),
            beta=Tensor(np.zeros(channels), requires_grad=True),
            ema_mean=np.zeros(channels),
            ema_var=np.ones(channels),
            eps=eps,
            momentum=momentum,
        )

    @property
    def channels(self) -> int:
        return self.ema_mean.shape[0]

    @property
    def prediction_eps(self) -> float:
        return self.eps if self.eps_override is None else self.eps_override


def _bn_axes(ndim: int) -> tuple[int, ...]:
    if ndim == 2:
        return (0,)
    if ndim == 4:
        return (0, 2, 3)
    raise ValueError(f"normalization expects rank 2 or 4 input, got rank {ndim}")


def _keep(vec: np.ndarray, ndim: int) -> np.ndarray:
    return vec.reshape((1, -1) if ndim == 2 else (1, -1, 1, 1))


def batch_stats(x: Tensor | np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and biased variance pooled over batch and spatial axes."""
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    mu, var = moments(data, _bn_axes(data.ndim))
    return mu.reshape(-1), var.reshape(-1)


def bn_forward(x: Tensor, state: NormState) -> Tensor:
    """Batch-normalize ``x`` with the statistics selected by ``state.mode``."""
    axes = _bn_axes(x.ndim)
    if x.shape[1] != state.channels:
        raise ValueError(f"input has {x.shape[1]} channels, layer has {state.channels}")
    mode = state.mode
    if mode is Mode.TRAIN:
        mu, var = batch_stats(x)
        xhat = standardize(x, axes, state.eps)
        m = state.momentum
        state.ema_mean = m * state.ema_mean + (1.0 - m) * mu
        state.ema_var = m * state.ema_var + (1.0 - m) * var
    else:
        eps = state.prediction_eps
        if mode is Mode.EVAL_BATCH or state.capture:
            mu, var = batch_stats(x)
            if state.capture:
                state.frozen_mean, state.frozen_var = mu, var
        if mode is Mode.EVAL_EMA:
            mu, var = state.ema_mean, state.ema_var
        elif mode is Mode.EVAL_FROZEN:
            if state.frozen_mean is None:
                raise FrozenStatsError("no frozen statistics stored; call freeze_stats first")
            mu, var = state.frozen_mean, state.frozen_var
        xhat = standardize(x, axes, eps, _keep(mu, x.ndim), _keep(var, x.ndim))
    return channel_affine(xhat, state.gamma, state.beta)


def alt_norm_forward(x: Tensor, kind: NormKind | str, gamma: Tensor | None,
                     beta: Tensor | None, eps: float, groups: int = 2) -> Tensor:
    """Instance, layer or group normalization followed by the channel affine."""
    kind = NormKind(kind)
    C = x.shape[1]
    if kind is NormKind.INSTANCE:
        if x.ndim != 4:
            raise ValueError("instance norm needs spatial dimensions (rank-4 input)")
        xhat = standardize(x, (2, 3), eps)
    elif kind is NormKind.LAYER:
        xhat = standardize(x, tuple(range(1, x.ndim)), eps)
    elif kind is NormKind.GROUP:
        if groups < 1 or C % groups:
            raise ValueError(f"{groups} groups do not evenly divide {C} channels")
        shape = x.shape
        grouped = reshape(x, (shape[0], groups, C // groups) + shape[2:])
        xhat = reshape(standardize(grouped, tuple(range(2, grouped.ndim)), eps), shape)
    else:
        raise ValueError(f"alt_norm_forward does not handle {kind.value!r}")
    if gamma is None and beta is None:
        return xhat
    return channel_affine(xhat, gamma, beta)


def weight_standardize(w: Tensor, eps: float = WS_EPS) -> Tensor:
    """Standardize each output filter over its fan-in.

    Conv filters are (F, C, kh, kw) with fan-in over the last three axes;
    linear weights are stored (in, out) with fan-in along axis 0.
    """
    if w.ndim == 4:
        fan_in = w.shape[1] * w.shape[2] * w.shape[3]
        axes: tuple[int, ...] = (1, 2, 3)
    elif w.ndim == 2:
        fan_in = w.shape[0]
        axes = (0,)
    else:
        raise ValueError(f"cannot standardize a rank-{w.ndim} weight")
    if fan_in < 2:
        raise ValueError("weight standardization needs a fan-in of at least 2")
    return standardize(w, axes, eps)


class HasBatchNorms(Protocol):
    def batch_norms(self) -> list[NormState]: ...


def _select(model: HasBatchNorms, layers: Iterable[int] | None) -> list[NormState]:
    states = model.batch_norms()
    if layers is None:
        return states
    idx = list(layers)
    n = len(states)
    return [states[i if i >= 0 else n + i] for i in idx]


def set_prediction_mode(model: HasBatchNorms, mode: Mode | str,
                        layers: Iterable[int] | None = None) -> None:
    """Switch batch-norm layers (all, or the given indices) to ``mode``.

    Validation happens before any layer is touched, so a failed call leaves the
    model unchanged.
    """
    mode = Mode(mode)
    targets = _select(model, layers)
    if mode is Mode.EVAL_FROZEN:
        missing = [i for i, s in enumerate(targets) if s.frozen_mean is None]
        if missing:
            raise FrozenStatsError(f"batch-norm layers {missing} have no frozen statistics")
    for s in targets:
        s.mode = mode


def freeze_stats(model, reference_batch, upstream: str = "batch") -> None:
    """Store per-layer batch statistics computed from one reference batch.

    With ``upstream="batch"`` (default) a single prediction-time-BN pass is run,
    so layer k's statistics are taken after layers 1..k-1 have normalized with
    their own batch statistics. With ``upstream="ema"`` every layer records the
    moments of its input while normalizing with the training EMA.
    """
    data = reference_batch.data if isinstance(reference_batch, Tensor) else reference_batch
    if len(data) == 0:
        raise ValueError("reference batch is empty")
    if upstream not in ("batch", "ema"):
        raise ValueError(f"upstream must be 'batch' or 'ema', got {upstream!r}")
    states = model.batch_norms()
    saved = [s.mode for s in states]
    try:
        for s in states:
            s.mode = Mode.EVAL_BATCH if upstream == "batch" else Mode.EVAL_EMA
            s.capture = True
        model.forward(Tensor(data))
    finally:
        for s, m in zip(states, saved):
            s.mode = m
            s.capture = False


@contextlib.contextmanager
def prediction_eps(model: HasBatchNorms, eps: float | None) -> Iterator[None]:
    """Temporarily override batch-norm epsilon at prediction time."""
    states = model.batch_norms()
    saved = [s.eps_override for s in states]
    if eps is not None:
        if eps <= 0:
            raise ValueError("eps override must be > 0")
        for s in states:
            s.eps_override = eps
    try:
        yield
    finally:
        for s, e in zip(states, saved):
            s.eps_override = e
