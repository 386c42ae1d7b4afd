"""Hot numeric kernels: numba-jitted with a pure-numpy fallback.

The jitted path is used whenever numba imports cleanly; set
``MAPSIEVE_NO_NUMBA=1`` to force the numpy fallback (useful for debugging
or on platforms without a working JIT).  ``benchmarks/bench_kernels.py``
compares the two paths on a realistic workload.
"""

from __future__ import annotations

import os

import numpy as np

__all__ = ["NUMBA_ACTIVE", "gem_pool_regions", "gem_pool_regions_np"]


def _flag_set(name: str) -> bool:
    return os.environ.get(name, "").strip().lower() not in ("", "0", "false")


def gem_pool_regions_np(values: np.ndarray, boxes: np.ndarray, p: float, eps: float) -> np.ndarray:
    """GeM-pool N half-open grid boxes (x0,y0,x1,y1) of a (H, W, C) array.

    Returns an (N, C) float64 matrix; accumulation is double precision
    regardless of the input dtype.
    """
    n = boxes.shape[0]
    c = values.shape[2]
    out = np.empty((n, c), dtype=np.float64)
    inv_p = 1.0 / p
    for i in range(n):
        x0, y0, x1, y1 = boxes[i]
        region = values[y0:y1, x0:x1, :].astype(np.float64)
        np.maximum(region, eps, out=region)
        out[i] = np.mean(region**p, axis=(0, 1)) ** inv_p
    return out


NUMBA_ACTIVE = False
if not _flag_set("MAPSIEVE_NO_NUMBA"):
    try:
        from numba import njit
    except ImportError:  # pragma: no cover - numba is a declared dependency
        njit = None

    if njit is not None:

        @njit(cache=True)
        def _gem_pool_regions_jit(values, boxes, p, eps):  # pragma: no cover - compiled
            n = boxes.shape[0]
            c = values.shape[2]
            out = np.empty((n, c), dtype=np.float64)
            acc = np.empty(c, dtype=np.float64)
            inv_p = 1.0 / p
            for i in range(n):
                x0 = boxes[i, 0]
                y0 = boxes[i, 1]
                x1 = boxes[i, 2]
                y1 = boxes[i, 3]
                cells = float((x1 - x0) * (y1 - y0))
                for ch in range(c):
                    acc[ch] = 0.0
                # channel-contiguous inner loops; small integer powers avoid
                # the scalar pow() call that dominates otherwise
                if p == 1.0:
                    for y in range(y0, y1):
                        for x in range(x0, x1):
                            for ch in range(c):
                                v = float(values[y, x, ch])
                                if v < eps:
                                    v = eps
                                acc[ch] += v
                elif p == 2.0:
                    for y in range(y0, y1):
                        for x in range(x0, x1):
                            for ch in range(c):
                                v = float(values[y, x, ch])
                                if v < eps:
                                    v = eps
                                acc[ch] += v * v
                elif p == 3.0:
                    for y in range(y0, y1):
                        for x in range(x0, x1):
                            for ch in range(c):
                                v = float(values[y, x, ch])
                                if v < eps:
                                    v = eps
                                acc[ch] += v * v * v
                else:
                    for y in range(y0, y1):
                        for x in range(x0, x1):
                            for ch in range(c):
                                v = float(values[y, x, ch])
                                if v < eps:
                                    v = eps
                                acc[ch] += v**p
                if p == 1.0:
                    for ch in range(c):
                        out[i, ch] = acc[ch] / cells
                else:
                    for ch in range(c):
                        out[i, ch] = (acc[ch] / cells) ** inv_p
            return out

        NUMBA_ACTIVE = True


def gem_pool_regions(values: np.ndarray, boxes: np.ndarray, p: float, eps: float) -> np.ndarray:
    """Dispatch batch GeM pooling to the jitted kernel or the numpy fallback."""
    boxes = np.ascontiguousarray(boxes, dtype=np.int64)
    if NUMBA_ACTIVE:
        return _gem_pool_regions_jit(np.ascontiguousarray(values), boxes, float(p), float(eps))
    return gem_pool_regions_np(values, boxes, float(p), float(eps))
