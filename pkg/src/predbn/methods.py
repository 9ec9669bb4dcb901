"""Named evaluable methods: base model(s) x norm mode x temperature x eps override."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .data import Dataset
from .metrics import EvalRecord, fit_temperature
from .model import Checkpoint, Network, _check_members, iter_batches
from .normalization import Mode, freeze_stats, prediction_eps, set_prediction_mode
from .tensor import Tensor, _log_softmax_np, _softmax_np

BATCH_LAYERS = ("all", "last")
REFERENCE_POLICIES = ("first_batch",)


class MissingCheckpointError(LookupError):
    """A method needs more trained members than were supplied."""


@dataclass(frozen=True)
class MethodSpec:
    """One evaluable method.

    ``norm`` and ``architecture`` pick which trained model family the members
    come from (``None`` means the experiment default). ``batch_layers="last"``
    applies ``bn_mode`` to the final batch-norm layer only and leaves every
    other layer on its training EMA. ``reference`` is the EvalFrozen policy:
    statistics come from the first prediction batch of each split.
    """

    name: str
    ensemble_size: int = 1
    bn_mode: Mode | str = Mode.EVAL_EMA
    norm: str | None = None
    architecture: str | None = None
    temperature: bool = False
    eps: float | None = None
    batch_layers: str = "all"
    reference: str = "first_batch"

    def __post_init__(self):
        object.__setattr__(self, "bn_mode", Mode(self.bn_mode))
        if self.bn_mode is Mode.TRAIN:
            raise ValueError("a method must use a prediction mode, not train")
        if self.ensemble_size < 1:
            raise ValueError("ensemble_size must be >= 1")
        if self.batch_layers not in BATCH_LAYERS:
            raise ValueError(f"batch_layers must be one of {BATCH_LAYERS}")
        if self.reference not in REFERENCE_POLICIES:
            raise ValueError(f"reference policy must be one of {REFERENCE_POLICIES}")
        if self.eps is not None and self.eps <= 0:
            raise ValueError("eps override must be > 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bn_mode"] = self.bn_mode.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> MethodSpec:
        return cls(**d)


def _nets(method: MethodSpec, members: Sequence[Checkpoint | Network]) -> list[Network]:
    if len(members) < method.ensemble_size:
        raise MissingCheckpointError(
            f"method {method.name!r} needs {method.ensemble_size} checkpoints, got {len(members)}")
    return _check_members(list(members)[:method.ensemble_size])


def _configure(net: Network, method: MethodSpec, reference: np.ndarray | None) -> None:
    mode = method.bn_mode
    n_bn = len(net.batch_norms())
    layers = None
    if method.batch_layers == "last" and n_bn:
        set_prediction_mode(net, Mode.EVAL_EMA)
        layers = [n_bn - 1]
    if mode is Mode.EVAL_FROZEN:
        with prediction_eps(net, method.eps):
            freeze_stats(net, reference)
    if n_bn:
        set_prediction_mode(net, mode, layers)


def method_log_probs(method: MethodSpec, members: Sequence[Checkpoint | Network],
                     X: np.ndarray, batch_size: int) -> tuple[np.ndarray, list[int]]:
    """Untempered log predictive probabilities, batch by batch.

    Returns the ``(n, K)`` log-probabilities and the list of batch sizes. For
    ensembles this is the log of the mean member probability.
    """
    if batch_size < 1:
        raise ValueError("batch size t must be >= 1")
    if len(X) == 0:
        raise ValueError("split is empty")
    nets = _nets(method, members)
    slices = list(iter_batches(len(X), batch_size))
    reference = X[slices[0]]
    for net in nets:
        _configure(net, method, reference)
    out, sizes = [], []
    for sl in slices:
        xb = X[sl]
        if len(nets) == 1:
            with prediction_eps(nets[0], method.eps):
                logp = _log_softmax_np(nets[0].forward(Tensor(xb)).data)
        else:
            total = None
            for net in nets:
                with prediction_eps(net, method.eps):
                    p = _softmax_np(net.forward(Tensor(xb)).data)
                total = p if total is None else total + p
            logp = np.log(total / len(nets))
        out.append(logp)
        sizes.append(len(xb))
    return np.concatenate(out), sizes


def tempered(log_probs: np.ndarray, temperature: float) -> np.ndarray:
    """softmax(log p / T); equals softmax(logits / T) for a single model."""
    return _softmax_np(log_probs / temperature)


def fit_method_temperature(method: MethodSpec, members: Sequence[Checkpoint | Network],
                           val: Dataset, batch_size: int) -> float:
    """Temperature fitted on unshifted validation data under the method's own mode."""
    logp, _ = method_log_probs(method, members, val.X, batch_size)
    return fit_temperature(logp, val.y)


def evaluate_method(method: MethodSpec, members: Sequence[Checkpoint | Network], split: Dataset,
                    batch_size: int, temperature: float = 1.0, *, shift: str | None = None,
                    severity: float | None = None, seed: int = 0,
                    num_bins: int = 10) -> EvalRecord:
    """Evaluate a method on one split in prediction batches of ``batch_size``.

    The final partial batch is kept and normalized with its own statistics.
    Metrics are computed once over the concatenated per-example predictions.
    ``temperature`` should come from :func:`fit_method_temperature` when
    ``method.temperature`` is set; it is ignored otherwise.
    """
    logp, sizes = method_log_probs(method, members, split.X, batch_size)
    T = float(temperature) if method.temperature else 1.0
    probs = tempered(logp, T)
    eps = method.eps
    if eps is None:
        nets = _nets(method, members)
        eps = nets[0].spec.eps
    return EvalRecord.from_predictions(
        probs, split.y, num_bins=num_bins,
        method=method.name,
        shift=shift if shift is not None else str(split.meta.get("shift", "identity")),
        severity=severity if severity is not None else split.meta.get("severity", 0),
        batch_size=int(batch_size),
        eps=float(eps),
        seed=int(seed),
        n_batches=len(sizes),
        last_batch=sizes[-1],
        temperature=T,
    )
