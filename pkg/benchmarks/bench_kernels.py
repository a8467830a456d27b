#!/usr/bin/env python3
"""Benchmark the compiled convolution kernels against the NumPy fallback.

Times the three hot kernels on crafting-sized batches, then an end-to-end
input-gradient pass (one TLM minibatch step worth of work) under each
backend. Run from the repository root:

    python benchmarks/bench_kernels.py
"""

import time

import numpy as np

from uapforge._kernels import _numpy

try:
    from uapforge._kernels import _native
except ImportError:
    _native = None


def timeit(fn, *args, repeats=200):
    fn(*args)  # warm up
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn(*args)
    return (time.perf_counter() - t0) / repeats


def bench_kernels():
    rng = np.random.default_rng(0)
    sizes = [
        ("craft batch", 32, 8, 64, 8, 17),
        ("full set", 300, 8, 64, 8, 17),
        ("wide", 32, 22, 256, 8, 25),
    ]
    print(f"{'case':12s} {'kernel':18s} {'numpy':>10s} {'native':>10s} {'speedup':>8s}")
    for name, n, c, t, k, l in sizes:
        x = rng.normal(0, 1, (n, c, t))
        w = rng.normal(0, 0.5, (k, l))
        b = rng.normal(0, 0.1, k)
        du = rng.normal(0, 1, (n, k, c, t - l + 1))
        jobs = [
            ("forward", lambda m: m.temporal_conv_forward(x, w, b)),
            ("backward_input", lambda m: m.temporal_conv_backward_input(w, du, t)),
            ("backward_weights", lambda m: m.temporal_conv_backward_weights(x, du)),
        ]
        for kernel, job in jobs:
            tn = timeit(job, _numpy, repeats=50)
            if _native is None:
                print(f"{name:12s} {kernel:18s} {tn * 1e3:9.3f}ms {'n/a':>10s}")
                continue
            tc = timeit(job, _native, repeats=50)
            print(f"{name:12s} {kernel:18s} {tn * 1e3:9.3f}ms {tc * 1e3:9.3f}ms {tn / tc:7.1f}x")


def bench_end_to_end():
    import os
    import subprocess
    import sys

    code = (
        "import time, numpy as np\n"
        "import uapforge as uf\n"
        "from uapforge.models import grad_input_batch, GRAD_LOG_PROB\n"
        "spec = uf.ModelSpec.small_cnn(8, 64, 2, temporal_filters=8, temporal_kernel_len=17)\n"
        "params = uf.init_params(spec, 0)\n"
        "rng = np.random.default_rng(0)\n"
        "x = rng.normal(0, 1, (32, 8, 64))\n"
        "y = rng.integers(0, 2, 32)\n"
        "grad_input_batch(params, x, GRAD_LOG_PROB, y)\n"
        "t0 = time.perf_counter()\n"
        "for _ in range(100): grad_input_batch(params, x, GRAD_LOG_PROB, y)\n"
        "dt = (time.perf_counter() - t0) / 100\n"
        "import uapforge._kernels as k\n"
        "print(f'{k.BACKEND}: {dt * 1e3:.3f} ms per minibatch input-gradient')\n"
    )
    for backend in ("native", "numpy"):
        env = dict(os.environ, UAPFORGE_BACKEND=backend)
        subprocess.run([sys.executable, "-c", code], env=env, check=True)


if __name__ == "__main__":
    print("== kernel microbenchmarks ==")
    bench_kernels()
    print("\n== end-to-end minibatch gradient (per backend) ==")
    bench_end_to_end()
