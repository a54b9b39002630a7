"""Benchmark: compiled kernels vs the numpy fallback.

Times each hot kernel on training-shaped buffers, then a full forward +
backward of one transformer block through the tensor engine under each
backend. Run the comparison like so:

    python benchmarks/bench_kernels.py            # whichever backend imports
    GATEVIT_NO_EXT=1 python benchmarks/bench_kernels.py   # force numpy

or let the script fork itself for both (default when the extension exists).
"""

import os
import subprocess
import sys
import time

import numpy as np


def timeit(fn, *args, repeat=200):
    fn(*args)  # warm
    t0 = time.perf_counter()
    for _ in range(repeat):
        fn(*args)
    return (time.perf_counter() - t0) / repeat


def bench_kernels():
    from gatevit import kernels

    rng = np.random.default_rng(0)
    rows, cols = 64 * 10, 128   # batch x tokens rows, feature cols
    x2 = np.ascontiguousarray(rng.normal(size=(rows, cols)).astype(np.float32))
    g2 = np.ascontiguousarray(rng.normal(size=(rows, cols)).astype(np.float32))
    y2 = np.empty_like(x2)
    gx2 = np.empty_like(x2)
    gain = np.ones(cols, dtype=np.float32)
    bias = np.zeros(cols, dtype=np.float32)
    mean = np.empty(rows, dtype=np.float32)
    rstd = np.empty(rows, dtype=np.float32)
    ggain = np.empty(cols, dtype=np.float32)
    gbias = np.empty(cols, dtype=np.float32)
    flat = x2.reshape(-1)
    gflat = g2.reshape(-1)
    yflat = y2.reshape(-1)
    gxflat = gx2.reshape(-1)

    results = {}
    results["gelu_fwd"] = timeit(kernels.gelu_fwd, flat, yflat)
    results["gelu_bwd"] = timeit(kernels.gelu_bwd, flat, gflat, gxflat)
    results["sigmoid_fwd"] = timeit(kernels.sigmoid_fwd, flat, yflat)
    results["softmax_fwd"] = timeit(kernels.softmax_fwd, x2, y2)
    kernels.softmax_fwd(x2, y2)
    results["softmax_bwd"] = timeit(kernels.softmax_bwd, y2, g2, gx2)
    results["layernorm_fwd"] = timeit(
        kernels.layernorm_fwd, x2, gain, bias, 1e-6, y2, mean, rstd)
    results["layernorm_bwd"] = timeit(
        kernels.layernorm_bwd, x2, gain, mean, rstd, g2, gx2, ggain, gbias)
    p = rng.normal(size=200_000).astype(np.float32)
    g1 = rng.normal(size=200_000).astype(np.float32)
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    results["adamw_update"] = timeit(
        kernels.adamw_update, p, g1, m, v, 1e-3, 0.9, 0.999, 1e-8, 0.05,
        0.1, 0.001)
    return results


def bench_block():
    """Forward+backward of one pre-norm block, batch 64, 10 tokens, D=32."""
    from gatevit import backbone as bb
    from gatevit import tensor as T

    cfg = bb.ModelConfig(image_size=12, patch_size=4, channels=1,
                         embed_dim=32, num_heads=4, num_blocks=1,
                         num_classes=4)
    params = bb.BackboneParams.init(cfg, np.random.default_rng(0))
    z0 = np.random.default_rng(1).normal(size=(64, 10, 32)).astype(np.float32)

    def step():
        z = T.Tensor(z0, requires_grad=True)
        with T.Tape() as tape:
            out = bb.block_forward(z, params, 0)
            loss = T.tsum(T.mul(out, out))
            tape.backward(loss)

    return timeit(step, repeat=50)


def run_current_backend():
    from gatevit import kernels
    print(f"backend: {kernels.BACKEND}", flush=True)
    for name, dt in bench_kernels().items():
        print(f"  {name:>14}: {dt * 1e6:9.1f} us", flush=True)
    print(f"  {'block fwd+bwd':>14}: {bench_block() * 1e3:9.2f} ms", flush=True)


def main():
    if os.environ.get("GATEVIT_BENCH_CHILD"):
        run_current_backend()
        return
    from gatevit import kernels
    run_current_backend()
    if kernels.BACKEND == "cython":
        print(flush=True)
        env = dict(os.environ, GATEVIT_NO_EXT="1", GATEVIT_BENCH_CHILD="1")
        subprocess.run([sys.executable, __file__], env=env, check=False)


if __name__ == "__main__":
    main()
