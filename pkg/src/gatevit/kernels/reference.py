"""Pure numpy implementations of the hot kernels.

Every function here has a compiled twin in ``_core.pyx`` with the same
signature and fill-the-output convention: callers allocate the output
arrays and pass 2-d (rows, cols) contiguous views where noted.
"""

import numpy as np
from scipy.special import erf

INV_SQRT2 = 0.7071067811865476
INV_SQRT_2PI = 0.3989422804014327


def gelu_fwd(x, out):
    np.multiply(0.5 * x, 1.0 + erf(x * x.dtype.type(INV_SQRT2)), out=out)


def gelu_bwd(x, gy, gx):
    t = x.dtype.type
    phi = t(INV_SQRT_2PI) * np.exp(t(-0.5) * x * x)
    np.multiply(gy, t(0.5) * (1.0 + erf(x * t(INV_SQRT2))) + x * phi, out=gx)


def sigmoid_fwd(x, out):
    # exp formulated on the negative half to avoid overflow on large |x|
    np.negative(np.abs(x), out=out)
    np.exp(out, out=out)
    pos = x >= 0
    np.divide(np.where(pos, 1.0, out), 1.0 + out, out=out)


def sigmoid_bwd(y, gy, gx):
    np.multiply(gy, y * (1.0 - y), out=gx)


def softmax_fwd(x, out):
    """Row-wise stabilized softmax of a 2-d array."""
    np.subtract(x, x.max(axis=1, keepdims=True), out=out)
    np.exp(out, out=out)
    out /= out.sum(axis=1, keepdims=True)


def softmax_bwd(y, gy, gx):
    dot = np.sum(y * gy, axis=1, keepdims=True)
    np.multiply(y, gy - dot, out=gx)


def layernorm_fwd(x, gain, bias, eps, out, mean, rstd):
    """Normalize rows of 2-d ``x`` to zero mean / unit variance, then affine.

    ``mean`` and ``rstd`` are per-row caches consumed by the backward pass.
    """
    np.mean(x, axis=1, out=mean)
    centered = x - mean[:, None]
    var = np.mean(centered * centered, axis=1)
    np.reciprocal(np.sqrt(var + eps), out=rstd)
    np.multiply(centered * rstd[:, None], gain, out=out)
    out += bias


def layernorm_bwd(x, gain, mean, rstd, gy, gx, ggain, gbias):
    xhat = (x - mean[:, None]) * rstd[:, None]
    np.sum(gy * xhat, axis=0, out=ggain)
    np.sum(gy, axis=0, out=gbias)
    gxhat = gy * gain
    m1 = np.mean(gxhat, axis=1, keepdims=True)
    m2 = np.mean(gxhat * xhat, axis=1, keepdims=True)
    np.multiply(rstd[:, None], gxhat - m1 - xhat * m2, out=gx)


def adamw_update(p, g, m, v, lr, beta1, beta2, eps, wd, bc1, bc2):
    """One decoupled-weight-decay adaptive-moments step on flat 1-d views.

    ``bc1``/``bc2`` are the bias-correction factors 1 - beta^t.
    """
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    if wd != 0.0:
        p -= lr * wd * p
    p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
