# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Fused C implementations of the hot numeric kernels.

Mirrors levelwise.kernels.reference function-for-function; every kernel is
tested for numerical agreement with the reference backend. The win over
NumPy comes from fusing the multi-pass elementwise/row reductions into a
single pass over memory.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, log, log1p, sqrt

cnp.import_array()

cdef double GELU_C = 0.7978845608028654
cdef double GELU_A = 0.044715


def sigmoid_fwd(cnp.ndarray x):
    cdef cnp.ndarray out = np.empty_like(x)
    cdef double[::1] xv = x.ravel()
    cdef double[::1] ov = out.ravel()
    cdef Py_ssize_t i, n = xv.shape[0]
    cdef double e
    for i in range(n):
        if xv[i] >= 0.0:
            ov[i] = 1.0 / (1.0 + exp(-xv[i]))
        else:
            e = exp(xv[i])
            ov[i] = e / (1.0 + e)
    return out


def sigmoid_bwd(cnp.ndarray y, cnp.ndarray dy):
    cdef cnp.ndarray dx = np.empty_like(y)
    cdef double[::1] yv = y.ravel()
    cdef double[::1] gv = dy.ravel()
    cdef double[::1] dv = dx.ravel()
    cdef Py_ssize_t i, n = yv.shape[0]
    for i in range(n):
        dv[i] = gv[i] * yv[i] * (1.0 - yv[i])
    return dx


def gelu_fwd(cnp.ndarray x):
    # np.tanh is SIMD-vectorized and beats a scalar libm loop; fuse only
    # the polynomial and the combination around it.
    cdef cnp.ndarray out = np.empty_like(x)
    cdef cnp.ndarray u = np.empty_like(x)
    cdef double[::1] xv = x.ravel()
    cdef double[::1] uv = u.ravel()
    cdef double[::1] ov = out.ravel()
    cdef Py_ssize_t i, n = xv.shape[0]
    for i in range(n):
        uv[i] = GELU_C * (xv[i] + GELU_A * xv[i] * xv[i] * xv[i])
    cdef cnp.ndarray t = np.tanh(u)
    cdef double[::1] tv = t.ravel()
    for i in range(n):
        ov[i] = 0.5 * xv[i] * (1.0 + tv[i])
    return out


def gelu_bwd(cnp.ndarray x, cnp.ndarray dy):
    cdef cnp.ndarray dx = np.empty_like(x)
    cdef cnp.ndarray u = np.empty_like(x)
    cdef double[::1] xv = x.ravel()
    cdef double[::1] uv = u.ravel()
    cdef double[::1] gv = dy.ravel()
    cdef double[::1] dv = dx.ravel()
    cdef Py_ssize_t i, n = xv.shape[0]
    cdef double du
    for i in range(n):
        uv[i] = GELU_C * (xv[i] + GELU_A * xv[i] * xv[i] * xv[i])
    cdef cnp.ndarray t = np.tanh(u)
    cdef double[::1] tv = t.ravel()
    for i in range(n):
        du = GELU_C * (1.0 + 3.0 * GELU_A * xv[i] * xv[i])
        dv[i] = gv[i] * (0.5 * (1.0 + tv[i])
                         + 0.5 * xv[i] * (1.0 - tv[i] * tv[i]) * du)
    return dx


def softmax_fwd(cnp.ndarray x):
    cdef cnp.ndarray out = np.empty_like(x)
    cdef double[:, ::1] xv = x
    cdef double[:, ::1] ov = out
    cdef Py_ssize_t i, j, n = xv.shape[0], k = xv.shape[1]
    cdef double m, s
    for i in range(n):
        m = xv[i, 0]
        for j in range(1, k):
            if xv[i, j] > m:
                m = xv[i, j]
        s = 0.0
        for j in range(k):
            ov[i, j] = exp(xv[i, j] - m)
            s += ov[i, j]
        for j in range(k):
            ov[i, j] /= s
    return out


def softmax_bwd(cnp.ndarray y, cnp.ndarray dy):
    cdef cnp.ndarray dx = np.empty_like(y)
    cdef double[:, ::1] yv = y
    cdef double[:, ::1] gv = dy
    cdef double[:, ::1] dv = dx
    cdef Py_ssize_t i, j, n = yv.shape[0], k = yv.shape[1]
    cdef double inner
    for i in range(n):
        inner = 0.0
        for j in range(k):
            inner += gv[i, j] * yv[i, j]
        for j in range(k):
            dv[i, j] = yv[i, j] * (gv[i, j] - inner)
    return dx


def layernorm_fwd(cnp.ndarray x, cnp.ndarray gain, cnp.ndarray bias, double eps):
    cdef cnp.ndarray out = np.empty_like(x)
    cdef cnp.ndarray xhat = np.empty_like(x)
    cdef Py_ssize_t n = x.shape[0], k = x.shape[1]
    cdef cnp.ndarray inv_std = np.empty(n, dtype=np.float64)
    cdef double[:, ::1] xv = x
    cdef double[:, ::1] ov = out
    cdef double[:, ::1] hv = xhat
    cdef double[::1] sv = inv_std
    cdef double[::1] gv = gain
    cdef double[::1] bv = bias
    cdef Py_ssize_t i, j
    cdef double mu, var, d, istd
    for i in range(n):
        mu = 0.0
        for j in range(k):
            mu += xv[i, j]
        mu /= k
        var = 0.0
        for j in range(k):
            d = xv[i, j] - mu
            var += d * d
        var /= k
        istd = 1.0 / sqrt(var + eps)
        sv[i] = istd
        for j in range(k):
            hv[i, j] = (xv[i, j] - mu) * istd
            ov[i, j] = hv[i, j] * gv[j] + bv[j]
    return out, xhat, inv_std


def layernorm_bwd(cnp.ndarray xhat, cnp.ndarray inv_std, cnp.ndarray gain,
                  cnp.ndarray dy):
    cdef Py_ssize_t n = xhat.shape[0], k = xhat.shape[1]
    cdef cnp.ndarray dx = np.empty_like(xhat)
    cdef cnp.ndarray dgain = np.zeros(k, dtype=np.float64)
    cdef cnp.ndarray dbias = np.zeros(k, dtype=np.float64)
    cdef double[:, ::1] hv = xhat
    cdef double[::1] sv = inv_std
    cdef double[::1] gv = gain
    cdef double[:, ::1] yv = dy
    cdef double[:, ::1] dv = dx
    cdef double[::1] dgv = dgain
    cdef double[::1] dbv = dbias
    cdef Py_ssize_t i, j
    cdef double m1, m2, dxh
    for i in range(n):
        m1 = 0.0
        m2 = 0.0
        for j in range(k):
            dxh = yv[i, j] * gv[j]
            m1 += dxh
            m2 += dxh * hv[i, j]
            dgv[j] += yv[i, j] * hv[i, j]
            dbv[j] += yv[i, j]
        m1 /= k
        m2 /= k
        for j in range(k):
            dv[i, j] = sv[i] * (yv[i, j] * gv[j] - m1 - hv[i, j] * m2)
    return dx, dgain, dbias


def bce_fwd(cnp.ndarray p, cnp.ndarray t, double eps):
    cdef double[::1] pv = p.ravel()
    cdef double[::1] tv = t.ravel()
    cdef Py_ssize_t i, n = pv.shape[0]
    cdef double acc = 0.0, pc
    for i in range(n):
        pc = pv[i]
        if pc < eps:
            pc = eps
        elif pc > 1.0 - eps:
            pc = 1.0 - eps
        acc += -(tv[i] * log(pc) + (1.0 - tv[i]) * log1p(-pc))
    return acc / n


def bce_bwd(cnp.ndarray p, cnp.ndarray t, double eps, double scale):
    cdef cnp.ndarray dp = np.empty_like(p)
    cdef double[::1] pv = p.ravel()
    cdef double[::1] tv = t.ravel()
    cdef double[::1] dv = dp.ravel()
    cdef Py_ssize_t i, n = pv.shape[0]
    for i in range(n):
        if eps <= pv[i] <= 1.0 - eps:
            dv[i] = scale * (pv[i] - tv[i]) / (pv[i] * (1.0 - pv[i]))
        else:
            dv[i] = 0.0
    return dp


def adam_step(cnp.ndarray value, cnp.ndarray grad, cnp.ndarray m, cnp.ndarray v,
              double lr, double beta1, double beta2, double eps,
              double c1, double c2):
    cdef double[::1] pv = value.ravel()
    cdef double[::1] gv = grad.ravel()
    cdef double[::1] mv = m.ravel()
    cdef double[::1] vv = v.ravel()
    cdef Py_ssize_t i, n = pv.shape[0]
    for i in range(n):
        mv[i] = beta1 * mv[i] + (1.0 - beta1) * gv[i]
        vv[i] = beta2 * vv[i] + (1.0 - beta2) * gv[i] * gv[i]
        pv[i] -= lr * (mv[i] / c1) / (sqrt(vv[i] / c2) + eps)
