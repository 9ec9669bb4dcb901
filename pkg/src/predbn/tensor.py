"""Dense float64 tensors with a reverse-mode gradient tape.

Operations run eagerly on numpy arrays. While a :class:`GradTape` is active,
every op that touches a tensor with ``requires_grad`` appends one record to the
tape; :meth:`GradTape.backward` replays those records in reverse.

Broadcasting is deliberately limited to the per-channel patterns the layers
need (:func:`channel_affine`), plus python scalars in the arithmetic ops.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import _kernels

DTYPE = np.float64

__all__ = [
    "DTYPE",
    "GradTape",
    "NonFiniteError",
    "Tensor",
    "add",
    "channel_affine",
    "conv2d",
    "cross_entropy",
    "global_avg_pool",
    "log_softmax",
    "matmul",
    "mean",
    "moments",
    "mul",
    "neg",
    "relu",
    "reshape",
    "softmax",
    "standardize",
    "sub",
    "sum",
]


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf from its inputs."""


class Tensor:
    """An n-dimensional float64 array (rank <= 4) that can carry a gradient."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=DTYPE, copy=True, order="C")
        if arr.ndim > 4:
            raise ValueError(f"rank {arr.ndim} exceeds the supported maximum of 4")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> Tensor:
        # internal constructor: takes ownership of a freshly computed array
        t = cls.__new__(cls)
        t.data = np.require(arr, dtype=DTYPE, requirements="C")
        t.grad = None
        t.requires_grad = requires_grad
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class _Record:
    output: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    name: str


_state = threading.local()


def _tape_stack() -> list:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


class GradTape:
    """Ordered record of the differentiable ops executed inside its context.

    Tapes are thread-local: a tape only sees ops run on the thread that entered
    it, so independent models can train concurrently on separate tapes.

    Example::

        with GradTape() as tape:
            loss = sum(mul(x, x))
        tape.backward(loss)   # x.grad == 2 * x.data
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> GradTape:
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor, sources: Sequence[Tensor] | None = None):
        """Accumulate reverse-mode gradients of a scalar ``loss``.

        Every tracked leaf seen on the tape gets ``.grad`` assigned; leaves the
        loss does not depend on get zeros. If ``sources`` is given, their
        gradients are also returned in order.
        """
        if loss.data.size != 1:
            raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        produced = {id(r.output) for r in self.records}
        if id(loss) not in produced and not loss.requires_grad:
            raise ValueError("loss was not recorded on this tape")
        leaves: dict[int, Tensor] = {}
        for rec in reversed(self.records):
            for inp in rec.inputs:
                if inp.requires_grad and id(inp) not in produced:
                    leaves[id(inp)] = inp
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            for inp, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        if loss.requires_grad and id(loss) not in produced:
            leaves[id(loss)] = loss
        for key, leaf in leaves.items():
            leaf.grad = grads.get(key, np.zeros_like(leaf.data))
        if sources is None:
            return None
        return [grads.get(id(s), np.zeros_like(s.data)) for s in sources]


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")


def _result(arr: np.ndarray, inputs: tuple[Tensor, ...], backward, name: str) -> Tensor:
    _check_finite(arr, name)
    track = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(arr, track)
    if track:
        stack = _tape_stack()
        if stack:
            stack[-1].records.append(_Record(out, inputs, backward, name))
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} differ")


# -- elementwise ------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        s = float(b)
        return _result(a.data + s, (a,), lambda g: (g,), "add")
    _same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        s = float(b)
        return _result(a.data - s, (a,), lambda g: (g,), "sub")
    _same_shape(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        s = float(b)
        return _result(a.data * s, (a,), lambda g: (g * s,), "mul")
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return _result(np.asarray(x.data.sum()), (x,),
                   lambda g: (np.full(shape, float(g)),), "sum")


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    return _result(np.asarray(x.data.mean()), (x,),
                   lambda g: (np.full(shape, float(g) / n),), "mean")


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


# -- linear algebra ---------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of ``a`` (m x k) and ``b`` (k x n)."""
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = _kernels.matmul(g, np.ascontiguousarray(bd.T)) if a.requires_grad else None
        gb = _kernels.matmul(np.ascontiguousarray(ad.T), g) if b.requires_grad else None
        return ga, gb

    return _result(_kernels.matmul(ad, bd), (a, b), backward, "matmul")


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (N,C,H,W) with filters ``w`` (F,C,kh,kw)."""
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects rank-4 operands, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d channel mismatch: input {x.shape[1]}, kernel {w.shape[1]}")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    _, _, H, W = x.shape
    kh, kw = w.shape[2], w.shape[3]
    if kh > H + 2 * padding or kw > W + 2 * padding:
        raise ValueError(f"kernel {kh}x{kw} larger than padded input {H}x{W} (pad {padding})")
    xd, wd = x.data, w.data

    def backward(g):
        g = np.ascontiguousarray(g)
        gx = (_kernels.conv2d_grad_input(g, wd, xd.shape, stride, padding)
              if x.requires_grad else None)
        gw = (_kernels.conv2d_grad_weight(g, xd, wd.shape, stride, padding)
              if w.requires_grad else None)
        return gx, gw

    return _result(_kernels.conv2d(xd, wd, stride, padding), (x, w), backward, "conv2d")


def channel_affine(x: Tensor, scale: Tensor | None = None, shift: Tensor | None = None) -> Tensor:
    """``x * scale + shift`` with per-channel vectors broadcast along axis 1."""
    if x.ndim not in (2, 4):
        raise ValueError(f"channel_affine expects rank 2 or 4, got {x.shape}")
    C = x.shape[1]
    view = (1, C) if x.ndim == 2 else (1, C, 1, 1)
    red = (0,) if x.ndim == 2 else (0, 2, 3)
    for p in (scale, shift):
        if p is not None and p.shape != (C,):
            raise ValueError(f"per-channel parameter shape {p.shape} != ({C},)")
    xd = x.data
    out = xd
    if scale is not None:
        out = out * scale.data.reshape(view)
    if shift is not None:
        out = out + shift.data.reshape(view)
    inputs = tuple(t for t in (x, scale, shift) if t is not None)

    def backward(g):
        grads = [g * scale.data.reshape(view) if scale is not None else g]
        if scale is not None:
            grads.append((g * xd).sum(axis=red))
        if shift is not None:
            grads.append(g.sum(axis=red))
        return grads

    return _result(out, inputs, backward, "channel_affine")


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial axes: (N,C,H,W) -> (N,C)."""
    if x.ndim != 4:
        raise ValueError(f"global_avg_pool expects rank 4, got {x.shape}")
    shape = x.shape
    hw = shape[2] * shape[3]
    return _result(x.data.mean(axis=(2, 3)), (x,),
                   lambda g: (np.broadcast_to(g[:, :, None, None] / hw, shape).copy(),),
                   "global_avg_pool")


# -- normalization ----------------------------------------------------------

def moments(data: np.ndarray, axes: tuple[int, ...]) -> tuple[np.ndarray, np.ndarray]:
    """Two-pass mean and biased variance over ``axes``, keeping dims."""
    if any(data.shape[a] == 0 for a in axes) or data.size == 0:
        raise ValueError("cannot compute moments of an empty tensor")
    with np.errstate(over="ignore", invalid="ignore"):
        mu = data.mean(axis=axes, keepdims=True)
        var = ((data - mu) ** 2).mean(axis=axes, keepdims=True)
    _check_finite(var, "moments")
    return mu, var


def standardize(x: Tensor, axes: tuple[int, ...], eps: float,
                mean: np.ndarray | None = None, var: np.ndarray | None = None) -> Tensor:
    """``(x - mean) / sqrt(var + eps)`` over ``axes``.

    Without ``mean``/``var`` the moments of ``x`` itself are used and the
    gradient flows through them. Supplied statistics are treated as constants;
    they must be broadcastable with keepdims layout.
    """
    if eps < 0:
        raise ValueError("eps must be non-negative")
    xd = x.data
    through_stats = mean is None
    if through_stats:
        mean, var = moments(xd, axes)
    elif var is None:
        raise ValueError("var must accompany mean")
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean) * inv

    def backward(g):
        if not through_stats:
            return (g * inv,)
        gm = g.mean(axis=axes, keepdims=True)
        gxm = (g * xhat).mean(axis=axes, keepdims=True)
        return (inv * (g - gm - xhat * gxm),)

    return _result(xhat, (x,), backward, "standardize")


# -- output layers ----------------------------------------------------------

def _softmax_np(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _log_softmax_np(z: np.ndarray) -> np.ndarray:
    s = z - z.max(axis=1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=1, keepdims=True))


def softmax(z: Tensor) -> Tensor:
    if z.ndim != 2:
        raise ValueError(f"softmax expects (N, K), got {z.shape}")
    p = _softmax_np(z.data)

    def backward(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _result(p, (z,), backward, "softmax")


def log_softmax(z: Tensor) -> Tensor:
    if z.ndim != 2:
        raise ValueError(f"log_softmax expects (N, K), got {z.shape}")
    out = _log_softmax_np(z.data)
    p = np.exp(out)
    return _result(out, (z,), lambda g: (g - p * g.sum(axis=1, keepdims=True),), "log_softmax")


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} != ({n},)")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ValueError(f"labels must lie in [0, {k})")
    logp = _log_softmax_np(logits.data)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def backward(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return (grad * (float(g) / n),)

    return _result(np.asarray(loss), (logits,), backward, "cross_entropy")
