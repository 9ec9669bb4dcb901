# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled dense kernels.

Every output element is accumulated in the same fixed order as the naive loop
reference (and as ``_pykernels``), starting from 0.0, so results are
bit-identical across backends.

Unit-stride convolutions run on a zero-padded copy flattened to rows of width
``Wp``. Inner loops then span ``Ho * Wp`` contiguous elements, and the extra
columns are cropped afterwards. Terms against padding add a signed zero, which
never changes an accumulator that starts at +0.0, so the summation sequence is
the same as in the bounds-checked loops.
"""
import numpy as np

BACKEND = "cython"


cdef inline Py_ssize_t _lo(Py_ssize_t off, Py_ssize_t stride) nogil:
    # smallest i >= 0 with i*stride + off >= 0
    if off >= 0:
        return 0
    return (-off + stride - 1) // stride


cdef inline Py_ssize_t _hi(Py_ssize_t off, Py_ssize_t stride, Py_ssize_t size,
                           Py_ssize_t n_out) nogil:
    # one past the largest i < n_out with i*stride + off < size
    cdef Py_ssize_t last
    if size - 1 - off < 0:
        return 0
    last = (size - 1 - off) // stride + 1
    return last if last < n_out else n_out


def matmul(const double[:, ::1] a, const double[:, ::1] b):
    cdef Py_ssize_t m = a.shape[0], k = a.shape[1], n = b.shape[1]
    cdef Py_ssize_t i, p, j
    cdef double aip
    if b.shape[0] != k:
        raise ValueError(f"matmul inner extents differ: {k} vs {b.shape[0]}")
    out = np.zeros((m, n), dtype=np.float64)
    cdef double[:, ::1] o = out
    with nogil:
        for i in range(m):
            for p in range(k):
                aip = a[i, p]
                for j in range(n):
                    o[i, j] += aip * b[p, j]
    return out


def _pad_flat(x, Py_ssize_t padding, Py_ssize_t tail):
    N, C, H, W = x.shape
    Hp, Wp = H + 2 * padding, W + 2 * padding
    buf = np.zeros((N, C, Hp * Wp + tail), dtype=np.float64)
    view = buf[:, :, :Hp * Wp].reshape(N, C, Hp, Wp)
    view[:, :, padding:padding + H, padding:padding + W] = x
    return buf


def _conv2d_unit(x, const double[:, :, :, ::1] w, Py_ssize_t padding):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t F = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t Wp = W + 2 * padding
    cdef Py_ssize_t Ho = H + 2 * padding - kh + 1, Wo = Wp - kw + 1
    cdef Py_ssize_t L = Ho * Wp
    cdef Py_ssize_t n, f, c, u, v, t
    cdef double wv
    cdef double* po
    cdef const double* px
    cdef const double[:, :, ::1] xp = _pad_flat(x, padding, kw)
    wide = np.zeros((N, F, L), dtype=np.float64)
    cdef double[:, :, ::1] o = wide
    with nogil:
        for n in range(N):
            for f in range(F):
                po = &o[n, f, 0]
                for c in range(C):
                    for u in range(kh):
                        for v in range(kw):
                            wv = w[f, c, u, v]
                            px = &xp[n, c, u * Wp + v]
                            for t in range(L):
                                po[t] += px[t] * wv
    return np.ascontiguousarray(wide.reshape(N, F, Ho, Wp)[:, :, :, :Wo])


def _conv2d_grad_input_unit(g, const double[:, :, :, ::1] w, tuple x_shape,
                            Py_ssize_t padding):
    cdef Py_ssize_t N = x_shape[0], C = x_shape[1], H = x_shape[2], W = x_shape[3]
    cdef Py_ssize_t F = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t Wp = W + 2 * padding, Hp = H + 2 * padding
    cdef Py_ssize_t Ho = g.shape[2], Wo = g.shape[3]
    cdef Py_ssize_t L = Ho * Wp
    cdef Py_ssize_t n, f, c, u, v, t
    cdef double wv
    cdef double* pgx
    cdef const double* pg
    gwide = np.zeros((N, F, Ho, Wp), dtype=np.float64)
    gwide[:, :, :, :Wo] = g
    cdef const double[:, :, ::1] gp = gwide.reshape(N, F, L)
    padded = np.zeros((N, C, Hp * Wp + kw), dtype=np.float64)
    cdef double[:, :, ::1] gx = padded
    with nogil:
        for n in range(N):
            for f in range(F):
                pg = &gp[n, f, 0]
                for c in range(C):
                    for u in range(kh):
                        for v in range(kw):
                            wv = w[f, c, u, v]
                            pgx = &gx[n, c, u * Wp + v]
                            for t in range(L):
                                pgx[t] += pg[t] * wv
    full = padded[:, :, :Hp * Wp].reshape(N, C, Hp, Wp)
    return np.ascontiguousarray(full[:, :, padding:padding + H, padding:padding + W])


def _conv2d_grad_weight_unit(g, x, tuple w_shape, Py_ssize_t padding):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], W = x.shape[3]
    cdef Py_ssize_t F = w_shape[0], kh = w_shape[2], kw = w_shape[3]
    cdef Py_ssize_t Wp = W + 2 * padding
    cdef Py_ssize_t Ho = g.shape[2], Wo = g.shape[3]
    cdef Py_ssize_t L = Ho * Wp
    cdef Py_ssize_t n, f, c, u, v, t
    cdef double xv
    cdef const double* px
    cdef const double* pg
    cdef const double[:, :, ::1] xp = _pad_flat(x, padding, kw)
    # (N, L, F): filters innermost so the F running sums update together
    gwide = np.zeros((N, Ho, Wp, F), dtype=np.float64)
    gwide[:, :, :Wo, :] = np.transpose(g, (0, 2, 3, 1))
    cdef const double[:, :, ::1] gt = gwide.reshape(N, L, F)
    acc_arr = np.zeros(F, dtype=np.float64)
    cdef double[::1] acc = acc_arr
    out = np.zeros((F, C, kh, kw), dtype=np.float64)
    cdef double[:, :, :, ::1] gw = out
    with nogil:
        for n in range(N):
            for c in range(C):
                for u in range(kh):
                    for v in range(kw):
                        for f in range(F):
                            acc[f] = 0.0
                        px = &xp[n, c, u * Wp + v]
                        for t in range(L):
                            xv = px[t]
                            pg = &gt[n, t, 0]
                            for f in range(F):
                                acc[f] += pg[f] * xv
                        for f in range(F):
                            gw[f, c, u, v] += acc[f]
    return out


def conv2d(const double[:, :, :, ::1] x, const double[:, :, :, ::1] w,
           Py_ssize_t stride, Py_ssize_t padding):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t F = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t Ho = (H + 2 * padding - kh) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * padding - kw) // stride + 1
    cdef Py_ssize_t n, f, c, u, v, i, j, i0, i1, j0, j1, y, xo
    cdef double wv
    cdef double* po
    cdef const double* px
    out = np.zeros((N, F, Ho, Wo), dtype=np.float64)
    cdef double[:, :, :, ::1] o = out
    if stride == 1:
        return _conv2d_unit(np.asarray(x), w, padding)
    with nogil:
        for n in range(N):
            for f in range(F):
                for c in range(C):
                    for u in range(kh):
                        i0 = _lo(u - padding, stride)
                        i1 = _hi(u - padding, stride, H, Ho)
                        for v in range(kw):
                            j0 = _lo(v - padding, stride)
                            j1 = _hi(v - padding, stride, W, Wo)
                            wv = w[f, c, u, v]
                            xo = v - padding
                            for i in range(i0, i1):
                                y = i * stride + u - padding
                                po = &o[n, f, i, 0]
                                px = &x[n, c, y, 0]
                                if stride == 1:
                                    # unit stride keeps the loop vectorizable
                                    for j in range(j0, j1):
                                        po[j] += px[j + xo] * wv
                                else:
                                    for j in range(j0, j1):
                                        po[j] += px[j * stride + xo] * wv
    return out


def conv2d_grad_input(const double[:, :, :, ::1] g, const double[:, :, :, ::1] w,
                      tuple x_shape, Py_ssize_t stride, Py_ssize_t padding):
    cdef Py_ssize_t N = x_shape[0], C = x_shape[1], H = x_shape[2], W = x_shape[3]
    cdef Py_ssize_t F = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef Py_ssize_t Ho = g.shape[2], Wo = g.shape[3]
    cdef Py_ssize_t n, f, c, u, v, i, j, i0, i1, j0, j1, y, xo
    cdef double wv
    cdef double* pgx
    cdef const double* pg
    out = np.zeros((N, C, H, W), dtype=np.float64)
    cdef double[:, :, :, ::1] gx = out
    if stride == 1:
        return _conv2d_grad_input_unit(np.asarray(g), w, x_shape, padding)
    with nogil:
        for n in range(N):
            for f in range(F):
                for c in range(C):
                    for u in range(kh):
                        i0 = _lo(u - padding, stride)
                        i1 = _hi(u - padding, stride, H, Ho)
                        for v in range(kw):
                            j0 = _lo(v - padding, stride)
                            j1 = _hi(v - padding, stride, W, Wo)
                            wv = w[f, c, u, v]
                            xo = v - padding
                            for i in range(i0, i1):
                                y = i * stride + u - padding
                                pgx = &gx[n, c, y, 0]
                                pg = &g[n, f, i, 0]
                                if stride == 1:
                                    for j in range(j0, j1):
                                        pgx[j + xo] += pg[j] * wv
                                else:
                                    for j in range(j0, j1):
                                        pgx[j * stride + xo] += pg[j] * wv
    return out


def conv2d_grad_weight(const double[:, :, :, ::1] g, const double[:, :, :, ::1] x,
                       tuple w_shape, Py_ssize_t stride, Py_ssize_t padding):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t F = w_shape[0], kh = w_shape[2], kw = w_shape[3]
    cdef Py_ssize_t Ho = g.shape[2], Wo = g.shape[3]
    cdef Py_ssize_t n, f, c, u, v, i, j, i0, i1, j0, j1, y, xo
    cdef double acc
    cdef const double* pg
    cdef const double* px
    out = np.zeros((F, C, kh, kw), dtype=np.float64)
    cdef double[:, :, :, ::1] gw = out
    if stride == 1:
        return _conv2d_grad_weight_unit(np.asarray(g), np.asarray(x), w_shape, padding)
    with nogil:
        for n in range(N):
            for f in range(F):
                for c in range(C):
                    for u in range(kh):
                        i0 = _lo(u - padding, stride)
                        i1 = _hi(u - padding, stride, H, Ho)
                        for v in range(kw):
                            j0 = _lo(v - padding, stride)
                            j1 = _hi(v - padding, stride, W, Wo)
                            xo = v - padding
                            acc = 0.0
                            for i in range(i0, i1):
                                y = i * stride + u - padding
                                pg = &g[n, f, i, 0]
                                px = &x[n, c, y, 0]
                                for j in range(j0, j1):
                                    acc += pg[j] * px[j * stride + xo]
                            gw[f, c, u, v] += acc
    return out
