#!/usr/bin/env python3
"""Benchmark the jitted GeM pooling kernel against the pure-numpy fallback.

The workload mirrors the pipeline's hot path: pooling many candidate-sized
grid boxes out of backbone-scale feature maps.  Run from the repo root:

    python3 benchmarks/bench_kernels.py

Set MAPSIEVE_NO_NUMBA=1 to confirm the package runs entirely on the
fallback path (this script always times both implementations directly).
"""

import time

import numpy as np

from mapsieve import _kernels


def make_workload(seed=0, height=48, width=64, channels=256, n_boxes=2000):
    rng = np.random.default_rng(seed)
    values = rng.normal(0.4, 0.3, size=(height, width, channels)).astype(np.float32)
    boxes = np.empty((n_boxes, 4), dtype=np.int64)
    for i in range(n_boxes):
        x0 = rng.integers(0, width - 1)
        y0 = rng.integers(0, height - 1)
        boxes[i] = (
            x0,
            y0,
            rng.integers(x0 + 1, min(x0 + 14, width) + 1),
            rng.integers(y0 + 1, min(y0 + 10, height) + 1),
        )
    return values, boxes


def bench(fn, values, boxes, p, eps, repeats=5):
    fn(values, boxes, p, eps)  # warm-up (includes JIT compile for numba)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(values, boxes, p, eps)
        times.append(time.perf_counter() - t0)
    return min(times)


def main():
    values, boxes = make_workload()
    p, eps = 3.0, 1e-6
    print(f"workload: {values.shape} feature map, {boxes.shape[0]} boxes, p={p}")

    t_np = bench(_kernels.gem_pool_regions_np, values, boxes, p, eps)
    print(f"numpy fallback : {t_np * 1e3:8.2f} ms")

    if _kernels.NUMBA_ACTIVE:
        t_nb = bench(_kernels._gem_pool_regions_jit, values, boxes, p, eps)
        print(f"numba kernel   : {t_nb * 1e3:8.2f} ms   ({t_np / t_nb:.1f}x speedup)")
        a = _kernels._gem_pool_regions_jit(values, boxes, p, eps)
        b = _kernels.gem_pool_regions_np(values, boxes, p, eps)
        diff = float(np.max(np.abs(a - b) / np.maximum(np.abs(b), 1e-12)))
        print(f"max relative difference between paths: {diff:.2e}")
        assert diff < 1e-9, "kernel paths disagree"
    else:
        print("numba inactive (MAPSIEVE_NO_NUMBA set or import failed); fallback only")


if __name__ == "__main__":
    main()
