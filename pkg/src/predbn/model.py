"""Desk-scale networks, training loop, ensembles and checkpoints."""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .data import Dataset
from .diagnostics import ActivationSummary, Reservoir, summarize
from .normalization import (
    Mode,
    NormKind,
    NormState,
    alt_norm_forward,
    bn_forward,
    set_prediction_mode,
    weight_standardize,
)
from .tensor import GradTape, NonFiniteError, Tensor

logger = logging.getLogger(__name__)

ARCHITECTURES = ("mlp", "mlp_last_bn", "tiny_cnn", "tiny_cnn_last_bn")
CKPT_MAGIC = b"PREDBN-CKPT\x00"
CKPT_VERSION = 1
RNG_NAME = "numpy.PCG64"


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description.

    ``hidden`` holds layer widths for the MLPs and conv channel counts for the
    CNNs; ``strides`` is only read by the CNNs. MLPs flatten inputs of any
    shape. The ``*_last_bn`` variants drop
    every internal norm and put a single batch norm right before the final
    linear layer.
    """

    architecture: str = "mlp"
    hidden: tuple[int, ...] = (128, 128)
    strides: tuple[int, ...] = ()
    norm: str = "batch"
    groups: int = 2
    weight_standardization: bool | None = None
    num_classes: int = 10
    input_shape: tuple[int, ...] = (20,)
    eps: float = 1e-3
    momentum: float = 0.99
    seed: int = 0

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        NormKind(self.norm)
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if self.is_cnn:
            if len(self.input_shape) != 3:
                raise ValueError("CNN input_shape must be (C, H, W)")
            if self.strides and len(self.strides) != len(self.hidden):
                raise ValueError("strides must match the number of conv blocks")
        elif not self.input_shape:
            raise ValueError("MLP input_shape must not be empty")
        if self.norm == "group" and any(h % self.groups for h in self.hidden):
            raise ValueError(f"groups={self.groups} must divide every hidden width")

    @property
    def is_cnn(self) -> bool:
        return self.architecture.startswith("tiny_cnn")

    @property
    def last_layer_bn(self) -> bool:
        return self.architecture.endswith("_last_bn")

    @property
    def use_ws(self) -> bool:
        if self.weight_standardization is None:
            return self.norm == "group"
        return self.weight_standardization

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("hidden", "strides", "input_shape"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelSpec:
        return cls(**d)


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer and schedule.

    ``lr_drops`` lists ``(epoch_fraction, factor)`` pairs: from that fraction of
    the run onwards the learning rate is ``lr * factor``.
    """

    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 128
    epochs: int = 20
    lr_drops: tuple[tuple[float, float], ...] = ((0.4, 0.1), (0.6, 0.01), (0.8, 0.001), (0.9, 0.0005))
    weight_decay: float = 0.0
    augment: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.optimizer not in ("adam", "nesterov"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.lr <= 0:
            raise ValueError("learning rate must be > 0")
        if self.batch_size < 2:
            raise ValueError("batch size must be >= 2 so batch norm has a variance")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        object.__setattr__(self, "lr_drops", tuple(tuple(map(float, p)) for p in self.lr_drops))

    def lr_at(self, epoch: int) -> float:
        factor = 1.0
        for frac, f in self.lr_drops:
            if epoch >= frac * self.epochs:
                factor = f
        return self.lr * factor

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_drops"] = [list(p) for p in self.lr_drops]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        return cls(**d)


# -- layers -----------------------------------------------------------------

class Linear:
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True,
                 ws: bool = False, gain: float = 2.0):
        self.weight = Tensor(rng.normal(scale=np.sqrt(gain / n_in), size=(n_in, n_out)),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(n_out), requires_grad=True) if bias else None
        self.ws = ws

    def params(self) -> dict[str, Tensor]:
        p = {"weight": self.weight}
        if self.bias is not None:
            p["bias"] = self.bias
        return p

    def forward(self, x: Tensor) -> Tensor:
        w = weight_standardize(self.weight) if self.ws else self.weight
        y = T.matmul(x, w)
        return T.channel_affine(y, None, self.bias) if self.bias is not None else y


class Conv2d:
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, stride: int = 1,
                 bias: bool = True, ws: bool = False, kernel: int = 3):
        fan_in = c_in * kernel * kernel
        self.weight = Tensor(rng.normal(scale=np.sqrt(2.0 / fan_in),
                                        size=(c_out, c_in, kernel, kernel)), requires_grad=True)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True) if bias else None
        self.stride = stride
        self.padding = kernel // 2
        self.ws = ws

    def params(self) -> dict[str, Tensor]:
        p = {"weight": self.weight}
        if self.bias is not None:
            p["bias"] = self.bias
        return p

    def forward(self, x: Tensor) -> Tensor:
        w = weight_standardize(self.weight) if self.ws else self.weight
        y = T.conv2d(x, w, self.stride, self.padding)
        return T.channel_affine(y, None, self.bias) if self.bias is not None else y


class Norm:
    """Normalization layer of any kind; batch norm keeps a :class:`NormState`."""

    def __init__(self, kind: str, channels: int, eps: float, momentum: float, groups: int = 2):
        self.kind = NormKind(kind)
        self.groups = groups
        self.eps = eps
        if self.kind is NormKind.BATCH:
            self.state: NormState | None = NormState.create(channels, eps, momentum)
            self.gamma, self.beta = self.state.gamma, self.state.beta
        else:
            self.state = None
            self.gamma = Tensor(np.ones(channels), requires_grad=True)
            self.beta = Tensor(np.zeros(channels), requires_grad=True)

    def params(self) -> dict[str, Tensor]:
        return {"gamma": self.gamma, "beta": self.beta}

    def forward(self, x: Tensor) -> Tensor:
        if self.state is not None:
            return bn_forward(x, self.state)
        return alt_norm_forward(x, self.kind, self.gamma, self.beta, self.eps, self.groups)


class ReLU:
    def params(self) -> dict[str, Tensor]:
        return {}

    def forward(self, x: Tensor) -> Tensor:
        return T.relu(x)


class GlobalAvgPool:
    def params(self) -> dict[str, Tensor]:
        return {}

    def forward(self, x: Tensor) -> Tensor:
        return T.global_avg_pool(x)


class Network:
    """A sequential stack of named layers built from a :class:`ModelSpec`.

    Tap names: ``norm{i}`` (output of the i-th norm layer, before the ReLU),
    ``penultimate`` (input of the final linear layer) and ``logits``.
    """

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        rng = np.random.Generator(np.random.PCG64(spec.seed))
        self.layers: list[tuple[str, object]] = []
        internal_norm = "none" if spec.last_layer_bn else spec.norm
        has_norm = internal_norm != "none"
        n_norm = 0

        def add_norm(channels: int, kind: str):
            nonlocal n_norm
            self.layers.append((f"norm{n_norm}", Norm(kind, channels, spec.eps, spec.momentum,
                                                      spec.groups)))
            n_norm += 1

        if spec.is_cnn:
            c_in = spec.input_shape[0]
            strides = spec.strides or (1,) * len(spec.hidden)
            for i, (c, s) in enumerate(zip(spec.hidden, strides)):
                self.layers.append((f"conv{i}", Conv2d(c_in, c, rng, stride=s, bias=not has_norm,
                                                       ws=spec.use_ws)))
                if has_norm:
                    add_norm(c, internal_norm)
                self.layers.append((f"relu{i}", ReLU()))
                c_in = c
            self.layers.append(("pool", GlobalAvgPool()))
            width = c_in
        else:
            width = int(np.prod(spec.input_shape))
            for i, h in enumerate(spec.hidden):
                self.layers.append((f"fc{i}", Linear(width, h, rng, bias=not has_norm,
                                                     ws=spec.use_ws)))
                if has_norm:
                    add_norm(h, internal_norm)
                self.layers.append((f"relu{i}", ReLU()))
                width = h
        if spec.last_layer_bn:
            add_norm(width, "batch")
        self.layers.append(("out", Linear(width, spec.num_classes, rng, gain=1.0)))

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [(f"{name}.{pname}", p) for name, layer in self.layers
                for pname, p in layer.params().items()]

    def norm_layers(self) -> list[tuple[str, Norm]]:
        return [(name, layer) for name, layer in self.layers if isinstance(layer, Norm)]

    def batch_norms(self) -> list[NormState]:
        return [layer.state for _, layer in self.norm_layers() if layer.state is not None]

    def tap_names(self) -> list[str]:
        return [name for name, _ in self.norm_layers()] + ["penultimate", "logits"]

    def train_mode(self) -> None:
        for s in self.batch_norms():
            s.mode = Mode.TRAIN

    def forward(self, x: Tensor, taps: dict[str, np.ndarray] | None = None) -> Tensor:
        expected = self.spec.input_shape
        if tuple(x.shape[1:]) != expected:
            raise ValueError(f"input shape {tuple(x.shape[1:])} does not match {expected}")
        if not self.spec.is_cnn and x.ndim > 2:
            x = T.reshape(x, (x.shape[0], -1))
        for name, layer in self.layers:
            if name == "out" and taps is not None and "penultimate" in taps:
                taps["penultimate"] = x.data
            x = layer.forward(x)
            if taps is not None and name in taps:
                taps[name] = x.data
        if taps is not None and "logits" in taps:
            taps["logits"] = x.data
        return x

    # serialization helpers
    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {name: p.data for name, p in self.parameters()}
        for name, layer in self.norm_layers():
            s = layer.state
            if s is None:
                continue
            arrays[f"{name}.ema_mean"] = s.ema_mean
            arrays[f"{name}.ema_var"] = s.ema_var
            if s.frozen_mean is not None:
                arrays[f"{name}.frozen_mean"] = s.frozen_mean
                arrays[f"{name}.frozen_var"] = s.frozen_var
        return arrays

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, p in self.parameters():
            if arrays[name].shape != p.data.shape:
                raise ValueError(f"{name}: stored shape {arrays[name].shape} != {p.data.shape}")
            p.data = np.array(arrays[name], dtype=np.float64)
        for name, layer in self.norm_layers():
            s = layer.state
            if s is None:
                continue
            s.ema_mean = np.array(arrays[f"{name}.ema_mean"])
            s.ema_var = np.array(arrays[f"{name}.ema_var"])
            if f"{name}.frozen_mean" in arrays:
                s.frozen_mean = np.array(arrays[f"{name}.frozen_mean"])
                s.frozen_var = np.array(arrays[f"{name}.frozen_var"])


# -- checkpoints ------------------------------------------------------------

class CheckpointError(ValueError):
    """A checkpoint file is malformed or from an unsupported format version."""


@dataclass
class Checkpoint:
    spec: ModelSpec
    config: TrainConfig
    model: Network
    history: list[float] = field(default_factory=list)

    def save(self, path: str | Path) -> None:
        """Write a deterministic binary container.

        Layout: magic, ``<I`` version, ``<Q`` header length, UTF-8 JSON header,
        then every array as raw little-endian float64 in header order.
        """
        arrays = self.model.state_arrays()
        entries, blobs, offset = [], [], 0
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype="<f8")
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
            blobs.append(arr.tobytes())
            offset += arr.nbytes
        modes = {name: layer.state.mode.value for name, layer in self.model.norm_layers()
                 if layer.state is not None}
        header = {
            "format": "predbn-checkpoint",
            "spec": self.spec.to_dict(),
            "config": self.config.to_dict(),
            "history": [float(h) for h in self.history],
            "rng": RNG_NAME,
            "norm_modes": modes,
            "arrays": entries,
        }
        head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            fh.write(CKPT_MAGIC)
            fh.write(struct.pack("<IQ", CKPT_VERSION, len(head)))
            fh.write(head)
            for b in blobs:
                fh.write(b)

    @classmethod
    def load(cls, path: str | Path) -> Checkpoint:
        raw = Path(path).read_bytes()
        if not raw.startswith(CKPT_MAGIC):
            raise CheckpointError(f"{path}: not a predbn checkpoint")
        pos = len(CKPT_MAGIC)
        version, hlen = struct.unpack_from("<IQ", raw, pos)
        if version != CKPT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        pos += struct.calcsize("<IQ")
        header = json.loads(raw[pos:pos + hlen])
        body = pos + hlen
        arrays = {}
        for e in header["arrays"]:
            n = int(np.prod(e["shape"], dtype=np.int64))
            start = body + e["offset"]
            arrays[e["name"]] = np.frombuffer(raw, dtype="<f8", count=n,
                                              offset=start).reshape(e["shape"]).astype(np.float64)
        spec = ModelSpec.from_dict(header["spec"])
        model = Network(spec)
        model.load_arrays(arrays)
        for name, layer in model.norm_layers():
            if layer.state is not None:
                layer.state.mode = Mode(header["norm_modes"][name])
        return cls(spec, TrainConfig.from_dict(header["config"]), model, header["history"])


# -- training ---------------------------------------------------------------

def _augment(X: np.ndarray, rng: np.random.Generator, pad: int = 2) -> np.ndarray:
    n, _, H, W = X.shape
    padded = np.pad(X, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oy = rng.integers(0, 2 * pad + 1, size=n)
    ox = rng.integers(0, 2 * pad + 1, size=n)
    flip = rng.random(n) < 0.5
    out = np.empty_like(X)
    for i in range(n):
        img = padded[i, :, oy[i]:oy[i] + H, ox[i]:ox[i] + W]
        out[i] = img[:, :, ::-1] if flip[i] else img
    return out


class _Optimizer:
    def __init__(self, params: list[tuple[str, Tensor]], cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.m = [np.zeros_like(p.data) for _, p in params]
        self.v = [np.zeros_like(p.data) for _, p in params]
        self.decay = [name.endswith(".weight") for name, _ in params]
        self.t = 0

    def step(self, lr: float) -> None:
        cfg = self.cfg
        self.t += 1
        for i, (_, p) in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            if cfg.weight_decay and self.decay[i]:
                g = g + cfg.weight_decay * p.data
            if cfg.optimizer == "adam":
                b1, b2 = cfg.momentum, cfg.beta2
                self.m[i] = b1 * self.m[i] + (1 - b1) * g
                self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
                mhat = self.m[i] / (1 - b1 ** self.t)
                vhat = self.v[i] / (1 - b2 ** self.t)
                p.data = p.data - lr * mhat / (np.sqrt(vhat) + cfg.adam_eps)
            else:
                self.m[i] = cfg.momentum * self.m[i] + g
                p.data = p.data - lr * (g + cfg.momentum * self.m[i])


def train(spec: ModelSpec, cfg: TrainConfig, data: Dataset) -> Checkpoint:
    """Train a fresh network on ``data``; deterministic given both seeds.

    ``spec.seed`` drives initialization and ``cfg.seed`` the shuffling and
    augmentation stream.
    """
    if len(data) == 0:
        raise ValueError("training set is empty")
    if data.y.min() < 0 or data.y.max() >= spec.num_classes:
        raise ValueError(f"labels must lie in [0, {spec.num_classes})")
    model = Network(spec)
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    opt = _Optimizer(model.parameters(), cfg)
    params = [p for _, p in model.parameters()]
    n = len(data)
    bs = min(cfg.batch_size, n)
    history = []
    model.train_mode()
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = rng.permutation(n)
        total, steps = 0.0, 0
        for start in range(0, n - bs + 1, bs):
            idx = order[start:start + bs]
            xb = data.X[idx]
            if cfg.augment and xb.ndim == 4:
                xb = _augment(xb, rng)
            with GradTape() as tape:
                try:
                    loss = T.cross_entropy(model.forward(Tensor(xb)), data.y[idx])
                except NonFiniteError as err:
                    raise NonFiniteError(f"epoch {epoch} step {steps}: {err}") from err
            tape.backward(loss)
            opt.step(lr)
            for p in params:
                if not np.isfinite(p.data).all():
                    raise NonFiniteError(f"epoch {epoch} step {steps}: parameters diverged")
            total += loss.item()
            steps += 1
        history.append(total / max(steps, 1))
        logger.debug("epoch %d lr %.2e loss %.4f", epoch, lr, history[-1])
    set_prediction_mode(model, Mode.EVAL_EMA)
    return Checkpoint(spec, cfg, model, history)


# -- prediction -------------------------------------------------------------

def _network(m: Checkpoint | Network) -> Network:
    return m.model if isinstance(m, Checkpoint) else m


def predict_logits(model: Checkpoint | Network, X: np.ndarray, mode: Mode | str | None = None) -> np.ndarray:
    """Logits for one prediction batch; ``mode=None`` keeps the current layer modes."""
    net = _network(model)
    if mode is not None:
        set_prediction_mode(net, mode)
    return net.forward(Tensor(X)).data


def predict_batch(model: Checkpoint | Network, X: np.ndarray, mode: Mode | str | None = None) -> np.ndarray:
    """Class probabilities for ``X`` treated as a single prediction batch."""
    return T._softmax_np(predict_logits(model, X, mode))


def _check_members(members: Sequence[Checkpoint | Network]) -> list[Network]:
    if not members:
        raise ValueError("an ensemble needs at least one member")
    nets = [_network(m) for m in members]
    ref = replace(nets[0].spec, seed=0)
    for n in nets[1:]:
        if replace(n.spec, seed=0) != ref:
            raise ValueError("ensemble members have mismatched model specs")
    return nets


def ensemble_predict(members: Sequence[Checkpoint | Network], X: np.ndarray,
                     mode: Mode | str | None = None) -> np.ndarray:
    """Arithmetic mean of member softmax outputs; each member uses its own statistics."""
    nets = _check_members(members)
    total = predict_batch(nets[0], X, mode)
    for n in nets[1:]:
        total = total + predict_batch(n, X, mode)
    return total / len(nets)


def iter_batches(n: int, batch_size: int) -> Iterable[slice]:
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    for start in range(0, n, batch_size):
        yield slice(start, min(start + batch_size, n))


def capture_activations(model: Checkpoint | Network, X: np.ndarray, mode: Mode | str | None,
                        layers: str | Iterable[str] = "all", batch_size: int | None = None,
                        n_keep: int = 4096, seed: int = 0, source: str = "") -> list[ActivationSummary]:
    """Summaries of tapped activations, averaged over spatial dims per channel.

    ``layers`` is ``"all"``, ``"norms"`` or an iterable of tap names. Inputs
    are fed in prediction batches of ``batch_size`` (whole ``X`` if None).
    """
    net = _network(model)
    names = net.tap_names()
    if layers == "all":
        wanted = names
    elif layers == "norms":
        wanted = [n for n in names if n.startswith("norm")]
    else:
        wanted = [layers] if isinstance(layers, str) else list(layers)
        unknown = [w for w in wanted if w not in names]
        if unknown:
            raise KeyError(f"unknown layers {unknown}; available: {names}")
    if mode is not None:
        set_prediction_mode(net, mode)
    mode_tag = Mode(mode).value if mode is not None else "mixed"
    chunks: dict[str, list[np.ndarray]] = {w: [] for w in wanted}
    reservoirs = {w: Reservoir(n_keep, seed) for w in wanted}
    for sl in iter_batches(len(X), batch_size or max(len(X), 1)):
        taps = {w: None for w in wanted}
        net.forward(Tensor(X[sl]), taps)
        for w in wanted:
            v = taps[w]
            if v.ndim == 4:
                v = v.mean(axis=(2, 3))
            chunks[w].append(v)
            reservoirs[w].extend(v)
    out = []
    for w in wanted:
        values = np.concatenate(chunks[w])
        full = w in ("penultimate", "logits")
        out.append(summarize(values, w, source=source, mode=mode_tag, full_cov=full,
                             samples=reservoirs[w].samples()))
    return out
