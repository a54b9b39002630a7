# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled hot kernels: single-pass C loops over contiguous buffers.

Signatures mirror ``reference.py`` exactly; the dispatcher in
``__init__.py`` picks whichever backend imported.
"""

cimport cython
from libc.math cimport erf, exp, fabs, sqrt

ctypedef fused real:
    float
    double

cdef double INV_SQRT2 = 0.7071067811865476
cdef double INV_SQRT_2PI = 0.3989422804014327


def gelu_fwd(real[::1] x, real[::1] out):
    cdef Py_ssize_t i, n = x.shape[0]
    for i in range(n):
        out[i] = <real>(0.5 * x[i] * (1.0 + erf(x[i] * INV_SQRT2)))


def gelu_bwd(real[::1] x, real[::1] gy, real[::1] gx):
    cdef Py_ssize_t i, n = x.shape[0]
    cdef double xi
    for i in range(n):
        xi = x[i]
        gx[i] = <real>(gy[i] * (0.5 * (1.0 + erf(xi * INV_SQRT2))
                                + xi * INV_SQRT_2PI * exp(-0.5 * xi * xi)))


def sigmoid_fwd(real[::1] x, real[::1] out):
    cdef Py_ssize_t i, n = x.shape[0]
    cdef double e
    for i in range(n):
        e = exp(-fabs(x[i]))
        out[i] = <real>((1.0 if x[i] >= 0 else e) / (1.0 + e))


def sigmoid_bwd(real[::1] y, real[::1] gy, real[::1] gx):
    cdef Py_ssize_t i, n = y.shape[0]
    for i in range(n):
        gx[i] = <real>(gy[i] * y[i] * (1.0 - y[i]))


def softmax_fwd(real[:, ::1] x, real[:, ::1] out):
    cdef Py_ssize_t i, j, rows = x.shape[0], cols = x.shape[1]
    cdef double mx, s
    for i in range(rows):
        mx = x[i, 0]
        for j in range(1, cols):
            if x[i, j] > mx:
                mx = x[i, j]
        s = 0.0
        for j in range(cols):
            out[i, j] = <real>exp(x[i, j] - mx)
            s += out[i, j]
        for j in range(cols):
            out[i, j] = <real>(out[i, j] / s)


def softmax_bwd(real[:, ::1] y, real[:, ::1] gy, real[:, ::1] gx):
    cdef Py_ssize_t i, j, rows = y.shape[0], cols = y.shape[1]
    cdef double dot
    for i in range(rows):
        dot = 0.0
        for j in range(cols):
            dot += y[i, j] * gy[i, j]
        for j in range(cols):
            gx[i, j] = <real>(y[i, j] * (gy[i, j] - dot))


def layernorm_fwd(real[:, ::1] x, real[::1] gain, real[::1] bias, double eps,
                  real[:, ::1] out, real[::1] mean, real[::1] rstd):
    cdef Py_ssize_t i, j, rows = x.shape[0], cols = x.shape[1]
    cdef double mu, var, d, r
    for i in range(rows):
        mu = 0.0
        for j in range(cols):
            mu += x[i, j]
        mu /= cols
        var = 0.0
        for j in range(cols):
            d = x[i, j] - mu
            var += d * d
        var /= cols
        r = 1.0 / sqrt(var + eps)
        mean[i] = <real>mu
        rstd[i] = <real>r
        for j in range(cols):
            out[i, j] = <real>((x[i, j] - mu) * r * gain[j] + bias[j])


def layernorm_bwd(real[:, ::1] x, real[::1] gain, real[::1] mean,
                  real[::1] rstd, real[:, ::1] gy, real[:, ::1] gx,
                  real[::1] ggain, real[::1] gbias):
    cdef Py_ssize_t i, j, rows = x.shape[0], cols = x.shape[1]
    cdef double m1, m2, xhat, gxh
    for j in range(cols):
        ggain[j] = 0
        gbias[j] = 0
    for i in range(rows):
        m1 = 0.0
        m2 = 0.0
        for j in range(cols):
            xhat = (x[i, j] - mean[i]) * rstd[i]
            gxh = gy[i, j] * gain[j]
            ggain[j] += <real>(gy[i, j] * xhat)
            gbias[j] += gy[i, j]
            m1 += gxh
            m2 += gxh * xhat
        m1 /= cols
        m2 /= cols
        for j in range(cols):
            xhat = (x[i, j] - mean[i]) * rstd[i]
            gxh = gy[i, j] * gain[j]
            gx[i, j] = <real>(rstd[i] * (gxh - m1 - xhat * m2))


def adamw_update(real[::1] p, real[::1] g, real[::1] m, real[::1] v,
                 double lr, double beta1, double beta2, double eps,
                 double wd, double bc1, double bc2):
    cdef Py_ssize_t i, n = p.shape[0]
    cdef double mi, vi
    for i in range(n):
        mi = beta1 * m[i] + (1.0 - beta1) * g[i]
        vi = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i]
        m[i] = <real>mi
        v[i] = <real>vi
        if wd != 0.0:
            p[i] -= <real>(lr * wd * p[i])
        p[i] -= <real>(lr * (mi / bc1) / (sqrt(vi / bc2) + eps))
