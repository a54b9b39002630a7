"""Shared helpers: finite-difference oracles and error metrics."""

import numpy as np
import pytest

from gatevit import tensor as T


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-30)
    return np.linalg.norm(a - b) / denom


def analytic_grads(build, arrays, dtype):
    """Run ``build`` on tensors made from ``arrays`` and return their grads."""
    tensors = [T.Tensor(a, requires_grad=True, dtype=dtype) for a in arrays]
    with T.Tape() as tape:
        loss = build(*tensors)
        tape.backward(loss)
    return [t.grad for t in tensors], float(loss.data)


def numeric_grads(build, arrays, eps=1e-6):
    """Central finite differences of ``build`` at float64, per input array."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]

    def value():
        tensors = [T.Tensor(a, dtype=np.float64) for a in arrays]
        return float(build(*tensors).data)

    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat, gf = a.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = value()
            flat[i] = orig - eps
            fm = value()
            flat[i] = orig
            gf[i] = (fp - fm) / (2 * eps)
        grads.append(g)
    return grads


def check_grads(build, arrays, tol64=1e-6, tol32=1e-4, check32=True):
    """Analytic vs central-difference gradients at both precisions.

    The oracle is always evaluated at float64; the float32 check compares
    the float32 analytic gradients against that same reference.
    """
    fd = numeric_grads(build, arrays)
    g64, _ = analytic_grads(build, arrays, np.float64)
    for g, f in zip(g64, fd):
        assert g is not None, "missing gradient at float64"
        assert rel_err(g, f) < tol64
    if check32:
        g32, _ = analytic_grads(build, arrays, np.float32)
        for g, f in zip(g32, fd):
            assert g is not None, "missing gradient at float32"
            assert rel_err(g, f) < tol32


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
