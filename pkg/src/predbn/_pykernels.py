"""Numpy fallback for the compiled kernels in ``_ckernels.pyx``.

Loops run over the reduction indices and vectorize over everything else, so each
output element sees exactly the same sequence of IEEE additions as the compiled
version. ``np.cumsum`` is used where a long sequential reduction is needed,
because ``np.sum`` reduces pairwise.
"""
from __future__ import annotations

import numpy as np

BACKEND = "python"


def _valid_range(off: int, stride: int, size: int, n_out: int) -> tuple[int, int]:
    lo = 0 if off >= 0 else (-off + stride - 1) // stride
    if size - 1 - off < 0:
        return lo, lo
    hi = min((size - 1 - off) // stride + 1, n_out)
    return lo, max(hi, lo)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    m, k = a.shape
    if b.shape[0] != k:
        raise ValueError(f"matmul inner extents differ: {k} vs {b.shape[0]}")
    out = np.zeros((m, b.shape[1]), dtype=np.float64)
    for p in range(k):
        out += a[:, p, None] * b[None, p, :]
    return out


def conv2d(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> np.ndarray:
    N, C, H, W = x.shape
    F, _, kh, kw = w.shape
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    out = np.zeros((N, F, Ho, Wo), dtype=np.float64)
    for c in range(C):
        for u in range(kh):
            i0, i1 = _valid_range(u - padding, stride, H, Ho)
            if i0 >= i1:
                continue
            ys = slice(i0 * stride + u - padding, (i1 - 1) * stride + u - padding + 1, stride)
            for v in range(kw):
                j0, j1 = _valid_range(v - padding, stride, W, Wo)
                if j0 >= j1:
                    continue
                xs = slice(j0 * stride + v - padding, (j1 - 1) * stride + v - padding + 1, stride)
                patch = x[:, c, ys, xs][:, None, :, :]
                out[:, :, i0:i1, j0:j1] += patch * w[None, :, c, u, v, None, None]
    return out


def conv2d_grad_input(g: np.ndarray, w: np.ndarray, x_shape: tuple, stride: int,
                      padding: int) -> np.ndarray:
    N, C, H, W = x_shape
    F, _, kh, kw = w.shape
    Ho, Wo = g.shape[2], g.shape[3]
    out = np.zeros((N, C, H, W), dtype=np.float64)
    for f in range(F):
        for u in range(kh):
            i0, i1 = _valid_range(u - padding, stride, H, Ho)
            if i0 >= i1:
                continue
            ys = slice(i0 * stride + u - padding, (i1 - 1) * stride + u - padding + 1, stride)
            for v in range(kw):
                j0, j1 = _valid_range(v - padding, stride, W, Wo)
                if j0 >= j1:
                    continue
                xs = slice(j0 * stride + v - padding, (j1 - 1) * stride + v - padding + 1, stride)
                out[:, :, ys, xs] += g[:, f, None, i0:i1, j0:j1] * w[None, f, :, u, v, None, None]
    return out


def conv2d_grad_weight(g: np.ndarray, x: np.ndarray, w_shape: tuple, stride: int,
                       padding: int) -> np.ndarray:
    N, C, H, W = x.shape
    F, _, kh, kw = w_shape
    Ho, Wo = g.shape[2], g.shape[3]
    out = np.zeros((F, C, kh, kw), dtype=np.float64)
    for n in range(N):
        for u in range(kh):
            i0, i1 = _valid_range(u - padding, stride, H, Ho)
            if i0 >= i1:
                continue
            ys = slice(i0 * stride + u - padding, (i1 - 1) * stride + u - padding + 1, stride)
            for v in range(kw):
                j0, j1 = _valid_range(v - padding, stride, W, Wo)
                if j0 >= j1:
                    continue
                xs = slice(j0 * stride + v - padding, (j1 - 1) * stride + v - padding + 1, stride)
                prod = g[n, :, None, i0:i1, j0:j1] * x[n, None, :, ys, xs]
                acc = np.cumsum(prod.reshape(F, C, -1), axis=-1)[:, :, -1]
                out[:, :, u, v] += acc
    return out
