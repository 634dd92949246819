# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled counterparts of ``_kernels_py``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport cos, sin, sqrt, fabs, M_PI
from libc.string cimport memcpy, memset

cnp.import_array()

ctypedef fused real:
    float
    double

cdef double J0_SERIES_LIMIT = 12.0
cdef int SERIES_TERMS = 48
cdef int ASYMPTOTIC_TERMS = 20
cdef double ASYM[20]

cdef void _init_asym():
    cdef int k
    ASYM[0] = 1.0
    for k in range(1, ASYMPTOTIC_TERMS):
        ASYM[k] = ASYM[k - 1] * -((2.0 * k - 1.0) ** 2) / (8.0 * k)

_init_asym()


cdef inline double _j0_scalar(double x) nogil:
    cdef double q, term, total, inv, power, p, s, c, chi
    cdef int k
    x = fabs(x)
    if x <= J0_SERIES_LIMIT:
        q = -0.25 * x * x
        term = 1.0
        total = 1.0
        for k in range(1, SERIES_TERMS):
            term = term * q / (k * k)
            total += term
        return total
    inv = 1.0 / x
    p = 0.0
    s = 0.0
    power = 1.0
    for k in range(ASYMPTOTIC_TERMS):
        c = ASYM[k] * power
        if k % 2 == 0:
            if (k // 2) % 2 == 0:
                p += c
            else:
                p -= c
        else:
            if ((k - 1) // 2) % 2 == 0:
                s += c
            else:
                s -= c
        power = power * inv
    chi = x - 0.25 * M_PI
    return sqrt(2.0 / (M_PI * x)) * (p * cos(chi) - s * sin(chi))


def j0(x):
    cdef cnp.ndarray[double, ndim=1] flat = np.ascontiguousarray(x, dtype=np.float64).ravel()
    cdef cnp.ndarray[double, ndim=1] out = np.empty_like(flat)
    cdef double[::1] fv = flat
    cdef double[::1] ov = out
    cdef Py_ssize_t i, n = flat.shape[0]
    with nogil:
        for i in range(n):
            ov[i] = _j0_scalar(fv[i])
    return out.reshape(np.shape(x))


def _im2col(real[:, :, :, ::1] x, real[:, ::1] cols):
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1], w = x.shape[2], c = x.shape[3]
    cdef Py_ssize_t b, i, j, ky, kx, yy, xx, row
    cdef size_t nbytes = c * sizeof(real)
    cdef real *dst
    with nogil:
        for b in range(n):
            for i in range(h):
                for j in range(w):
                    row = (b * h + i) * w + j
                    dst = &cols[row, 0]
                    for ky in range(3):
                        yy = i + ky - 1
                        for kx in range(3):
                            xx = j + kx - 1
                            if yy < 0 or yy >= h or xx < 0 or xx >= w:
                                memset(dst, 0, nbytes)
                            else:
                                memcpy(dst, &x[b, yy, xx, 0], nbytes)
                            dst += c


def im2col3x3(x):
    x = np.ascontiguousarray(x)
    n, h, w, c = x.shape
    cols = np.empty((n * h * w, 9 * c), dtype=x.dtype)
    _im2col(x, cols)
    return cols


def _col2im(real[:, ::1] dcols, real[:, :, :, ::1] dx):
    cdef Py_ssize_t n = dx.shape[0], h = dx.shape[1], w = dx.shape[2], c = dx.shape[3]
    cdef Py_ssize_t b, i, j, ky, kx, yy, xx, ch, row
    cdef real *src
    cdef real *dst
    with nogil:
        for b in range(n):
            for i in range(h):
                for j in range(w):
                    row = (b * h + i) * w + j
                    src = &dcols[row, 0]
                    for ky in range(3):
                        yy = i + ky - 1
                        for kx in range(3):
                            xx = j + kx - 1
                            if yy >= 0 and yy < h and xx >= 0 and xx < w:
                                dst = &dx[b, yy, xx, 0]
                                for ch in range(c):
                                    dst[ch] += src[ch]
                            src += c


def col2im3x3(dcols, shape):
    dcols = np.ascontiguousarray(dcols)
    dx = np.zeros(shape, dtype=dcols.dtype)
    _col2im(dcols, dx)
    return dx


def _pool_fwd(real[:, :, :, ::1] x, real[:, :, :, ::1] y, cnp.int8_t[:, :, :, ::1] idx):
    cdef Py_ssize_t n = y.shape[0], ho = y.shape[1], wo = y.shape[2], c = y.shape[3]
    cdef Py_ssize_t b, i, j, ch, k
    cdef real best, v
    cdef cnp.int8_t arg
    with nogil:
        for b in range(n):
            for i in range(ho):
                for j in range(wo):
                    for ch in range(c):
                        best = x[b, 2 * i, 2 * j, ch]
                        arg = 0
                        v = x[b, 2 * i, 2 * j + 1, ch]
                        if v > best:
                            best = v
                            arg = 1
                        v = x[b, 2 * i + 1, 2 * j, ch]
                        if v > best:
                            best = v
                            arg = 2
                        v = x[b, 2 * i + 1, 2 * j + 1, ch]
                        if v > best:
                            best = v
                            arg = 3
                        y[b, i, j, ch] = best
                        idx[b, i, j, ch] = arg


def maxpool2x2_forward(x):
    x = np.ascontiguousarray(x)
    n, h, w, c = x.shape
    y = np.empty((n, h // 2, w // 2, c), dtype=x.dtype)
    idx = np.empty((n, h // 2, w // 2, c), dtype=np.int8)
    _pool_fwd(x, y, idx)
    return y, idx


def _pool_bwd(real[:, :, :, ::1] dy, cnp.int8_t[:, :, :, ::1] idx, real[:, :, :, ::1] dx):
    cdef Py_ssize_t n = dy.shape[0], ho = dy.shape[1], wo = dy.shape[2], c = dy.shape[3]
    cdef Py_ssize_t b, i, j, ch
    cdef int a
    with nogil:
        for b in range(n):
            for i in range(ho):
                for j in range(wo):
                    for ch in range(c):
                        a = idx[b, i, j, ch]
                        dx[b, 2 * i + a // 2, 2 * j + a % 2, ch] = dy[b, i, j, ch]


def maxpool2x2_backward(dy, idx, shape):
    dy = np.ascontiguousarray(dy)
    dx = np.zeros(shape, dtype=dy.dtype)
    _pool_bwd(dy, np.ascontiguousarray(idx, dtype=np.int8), dx)
    return dx



def _channel_moments(real[:, ::1] x, double[::1] mean, double[::1] var):
    cdef Py_ssize_t m = x.shape[0], c = x.shape[1], i, k
    cdef double v, d
    with nogil:
        for k in range(c):
            mean[k] = 0.0
            var[k] = 0.0
        for i in range(m):
            for k in range(c):
                mean[k] += x[i, k]
        for k in range(c):
            mean[k] /= m
        for i in range(m):
            for k in range(c):
                d = x[i, k] - mean[k]
                var[k] += d * d
        for k in range(c):
            var[k] /= m


def channel_moments(x):
    """Per-channel mean and (biased) variance of an ``(..., C)`` array, in float64."""
    x2 = np.ascontiguousarray(x).reshape(-1, x.shape[x.ndim - 1])
    mean = np.empty(x.shape[x.ndim - 1])
    var = np.empty(x.shape[x.ndim - 1])
    _channel_moments(x2, mean, var)
    return mean, var


def _bn_train_forward(real[:, ::1] x, real[::1] mean, real[::1] inv_std, real[::1] gamma,
                      real[::1] beta, real[:, ::1] xhat, real[:, ::1] y):
    cdef Py_ssize_t m = x.shape[0], c = x.shape[1], i, k
    cdef real h
    with nogil:
        for i in range(m):
            for k in range(c):
                h = (x[i, k] - mean[k]) * inv_std[k]
                xhat[i, k] = h
                y[i, k] = h * gamma[k] + beta[k]


def bn_train_forward(x, mean, inv_std, gamma, beta):
    """Return ``(xhat, y)`` with ``xhat = (x - mean) * inv_std`` and ``y = gamma * xhat + beta``."""
    shape = x.shape
    x2 = np.ascontiguousarray(x).reshape(-1, shape[len(shape) - 1])
    dt = x2.dtype
    xhat = np.empty_like(x2)
    y = np.empty_like(x2)
    _bn_train_forward(x2, np.asarray(mean, dt), np.asarray(inv_std, dt), np.asarray(gamma, dt),
                      np.asarray(beta, dt), xhat, y)
    return xhat.reshape(shape), y.reshape(shape)


def _bn_backward(real[:, ::1] dy, real[:, ::1] xhat, real[::1] gamma, real[::1] inv_std,
                 double[::1] dgamma, double[::1] dbeta, real[:, ::1] dx):
    cdef Py_ssize_t m = dy.shape[0], c = dy.shape[1], i, k
    with nogil:
        for k in range(c):
            dgamma[k] = 0.0
            dbeta[k] = 0.0
        for i in range(m):
            for k in range(c):
                dbeta[k] += dy[i, k]
                dgamma[k] += dy[i, k] * xhat[i, k]
        # dx = inv_std * gamma * (dy - dbeta/m - xhat * dgamma/m)
        for i in range(m):
            for k in range(c):
                dx[i, k] = <real>((gamma[k] * inv_std[k]) * (dy[i, k] - dbeta[k] / m - xhat[i, k] * (dgamma[k] / m)))


def bn_backward(dy, xhat, gamma, inv_std):
    """Batch-norm input gradient plus ``(dgamma, dbeta)`` for ``(..., C)`` arrays."""
    shape = dy.shape
    dy2 = np.ascontiguousarray(dy).reshape(-1, shape[len(shape) - 1])
    dt = dy2.dtype
    xhat2 = np.ascontiguousarray(xhat, dtype=dt).reshape(-1, shape[len(shape) - 1])
    dgamma = np.empty(shape[len(shape) - 1])
    dbeta = np.empty(shape[len(shape) - 1])
    dx = np.empty_like(dy2)
    _bn_backward(dy2, xhat2, np.asarray(gamma, dt), np.asarray(inv_std, dt), dgamma, dbeta, dx)
    return dx.reshape(shape), dgamma.astype(dt), dbeta.astype(dt)
