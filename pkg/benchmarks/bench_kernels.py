"""Compare the compiled kernels with the NumPy fallback.

Usage: python3 benchmarks/bench_kernels.py [--repeat 5]

Prints one line per kernel with the best-of-N wall time of each backend,
the speedup, and whether the outputs agree bit for bit.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from diffreg import _pykernels, kernels
from diffreg.geometry import random_rotation


def _best(fn, repeat):
    best = np.inf
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def cases(rng):
    n, h, k = 2500, 128, 15
    node = rng.normal(size=(n, h))
    nbr = rng.normal(size=(n, h))
    idx = rng.integers(0, n, size=(n, k))
    yield "edge_max n=2500 h=128 k=15", lambda m: m.edge_max(node, nbr, idx, 0.2)

    R = np.stack([random_rotation(rng) for _ in range(4096)])
    t = rng.normal(size=(4096, 3))
    src = rng.normal(size=(4000, 3)) * 10
    dst = src + rng.normal(scale=0.5, size=src.shape)
    yield "count_inliers 4096 hyps x 4000 pairs", lambda m: m.count_inliers(R, t, src, dst, 0.6)

    z = rng.normal(size=(3600, 128))
    zidx = rng.integers(0, 3600, size=(3600, 16))
    yield "neighbor_attention n=3600 d=128 k=16", lambda m: m.neighbor_attention(z, zidx)

    S = rng.normal(size=(61, 61))
    mu = np.zeros(61)
    yield "log_sinkhorn 61x61 x 100 iters", lambda m: m.log_sinkhorn(S, mu, mu, 100)


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if not kernels.compiled_available():
        print("compiled extension not built; run `pip install -e . --no-build-isolation` first")
        return 1
    from diffreg import _ckernels

    rng = np.random.default_rng(0)
    print(f"{'kernel':40s} {'cython ms':>10s} {'python ms':>10s} {'speedup':>8s}  identical")
    for name, call in cases(rng):
        tc, oc = _best(lambda: call(_ckernels), args.repeat)
        tp, op = _best(lambda: call(_pykernels), args.repeat)
        same = np.array_equal(np.asarray(oc), np.asarray(op))
        close = same or np.allclose(oc, op, rtol=1e-12, atol=1e-12)
        print(f"{name:40s} {1e3 * tc:10.2f} {1e3 * tp:10.2f} {tp / tc:8.1f}x  {'yes' if same else ('~1e-12' if close else 'NO')}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
