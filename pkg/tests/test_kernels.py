"""Compiled kernels against the numpy reference, both precisions."""

import numpy as np
import pytest

from gatevit import kernels
from gatevit.kernels import reference

pytestmark = pytest.mark.skipif(
    kernels.BACKEND != "cython",
    reason="compiled backend not built; nothing to compare")

DTYPES = (np.float32, np.float64)


def tol(dtype):
    return 1e-5 if dtype == np.float32 else 1e-12


@pytest.mark.parametrize("dtype", DTYPES)
def test_elementwise_kernels(dtype, rng):
    x = rng.normal(size=257).astype(dtype) * 3
    gy = rng.normal(size=257).astype(dtype)
    for fwd, bwd, bwd_takes_y in (
            (kernels.gelu_fwd, kernels.gelu_bwd, False),
            (kernels.sigmoid_fwd, kernels.sigmoid_bwd, True)):
        ref_fwd = getattr(reference, fwd.__name__)
        ref_bwd = getattr(reference, bwd.__name__)
        a, b = np.empty_like(x), np.empty_like(x)
        fwd(x, a)
        ref_fwd(x, b)
        np.testing.assert_allclose(a, b, rtol=tol(dtype), atol=tol(dtype))
        first = a if bwd_takes_y else x
        ga, gb = np.empty_like(x), np.empty_like(x)
        bwd(first, gy, ga)
        ref_bwd(first, gy, gb)
        np.testing.assert_allclose(ga, gb, rtol=tol(dtype), atol=tol(dtype))


@pytest.mark.parametrize("dtype", DTYPES)
def test_softmax_kernels(dtype, rng):
    x = np.ascontiguousarray(rng.normal(size=(19, 23)).astype(dtype) * 5)
    gy = np.ascontiguousarray(rng.normal(size=(19, 23)).astype(dtype))
    y1, y2 = np.empty_like(x), np.empty_like(x)
    kernels.softmax_fwd(x, y1)
    reference.softmax_fwd(x, y2)
    np.testing.assert_allclose(y1, y2, rtol=tol(dtype), atol=tol(dtype))
    g1, g2 = np.empty_like(x), np.empty_like(x)
    kernels.softmax_bwd(y1, gy, g1)
    reference.softmax_bwd(y1, gy, g2)
    np.testing.assert_allclose(g1, g2, rtol=tol(dtype), atol=tol(dtype))


@pytest.mark.parametrize("dtype", DTYPES)
def test_layernorm_kernels(dtype, rng):
    rows, cols = 17, 31
    x = np.ascontiguousarray(rng.normal(size=(rows, cols)).astype(dtype))
    gain = (rng.normal(size=cols) * 0.1 + 1).astype(dtype)
    bias = rng.normal(size=cols).astype(dtype)
    gy = np.ascontiguousarray(rng.normal(size=(rows, cols)).astype(dtype))

    def run(mod):
        out = np.empty_like(x)
        mean = np.empty(rows, dtype=dtype)
        rstd = np.empty(rows, dtype=dtype)
        mod.layernorm_fwd(x, gain, bias, 1e-6, out, mean, rstd)
        gx = np.empty_like(x)
        ggain = np.empty(cols, dtype=dtype)
        gbias = np.empty(cols, dtype=dtype)
        mod.layernorm_bwd(x, gain, mean, rstd, gy, gx, ggain, gbias)
        return out, gx, ggain, gbias

    for a, b in zip(run(kernels), run(reference)):
        np.testing.assert_allclose(a, b, rtol=10 * tol(dtype),
                                   atol=10 * tol(dtype))


@pytest.mark.parametrize("dtype", DTYPES)
def test_adamw_kernels(dtype, rng):
    p0 = rng.normal(size=101).astype(dtype)
    g = rng.normal(size=101).astype(dtype)

    def run(mod):
        p = p0.copy()
        m = np.zeros_like(p)
        v = np.zeros_like(p)
        for t in range(1, 4):
            mod.adamw_update(p, g, m, v, 1e-3, 0.9, 0.999, 1e-8, 0.05,
                             1 - 0.9 ** t, 1 - 0.999 ** t)
        return p, m, v

    for a, b in zip(run(kernels), run(reference)):
        np.testing.assert_allclose(a, b, rtol=10 * tol(dtype),
                                   atol=10 * tol(dtype))
