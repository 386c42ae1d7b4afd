"""From raw detector output to labeled, encodable region pairs: candidate
filtering, pixel-to-grid rescaling, region extraction, and the classifier
input encodings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dataset_io import Detection
from .tensors import DEFAULT_GEM_P, GEM_EPS, FeatureMap, FeatureRegion, GridBox, gem_pool, gem_pool_boxes

DEFAULT_SCORE_FLOOR = 0.1
DEFAULT_MIN_AREA_FRACTION = 0.0008  # 0.08% of the image pixel area

ENCODING_MODES = ("concat", "disparity", "query_only")


@dataclass
class CandidateDetection:
    """One surviving detection candidate, tracked through the pipeline."""

    index: int  # position in the frame's raw detection list
    box: tuple[float, float, float, float]
    detector_score: float
    grid_box: GridBox | None = None
    label: int | None = None


def filter_candidates(
    detections: list[Detection],
    image_dims: tuple[int, int],
    score_floor: float = DEFAULT_SCORE_FLOOR,
    min_area_fraction: float = DEFAULT_MIN_AREA_FRACTION,
) -> list[CandidateDetection]:
    """Keep detections with score >= floor and pixel area >= fraction of the
    image area; order preserved, original indices retained."""
    w, h = image_dims
    min_area = min_area_fraction * w * h
    out = []
    for i, det in enumerate(detections):
        x0, y0, x1, y1 = det.box
        if det.detector_score >= score_floor and (x1 - x0) * (y1 - y0) >= min_area:
            out.append(CandidateDetection(index=i, box=det.box, detector_score=det.detector_score))
    return out


def rescale_box(
    box: tuple[float, float, float, float],
    image_dims: tuple[int, int],
    feature_dims: tuple[int, int],
) -> GridBox:
    """Map a pixel box onto the (smaller) feature grid with outward rounding,
    so every intersected cell stays covered.  Clamped to the grid; a box that
    degenerates under clamping is widened one cell toward the interior."""
    w_px, h_px = image_dims
    w_f, h_f = feature_dims
    x0 = math.floor(box[0] * w_f / w_px)
    y0 = math.floor(box[1] * h_f / h_px)
    x1 = math.ceil(box[2] * w_f / w_px)
    y1 = math.ceil(box[3] * h_f / h_px)
    x0, y0 = max(x0, 0), max(y0, 0)
    x1, y1 = min(x1, w_f), min(y1, h_f)
    if x0 >= x1:
        x0, x1 = (x1 - 1, x1) if x1 >= 1 else (0, 1)
    if y0 >= y1:
        y0, y1 = (y1 - 1, y1) if y1 >= 1 else (0, 1)
    return GridBox(x0, y0, x1, y1)


def extract_region_pair(
    f_q: FeatureMap, f_m: FeatureMap, grid_box: GridBox
) -> tuple[FeatureRegion, FeatureRegion]:
    """Query and map regions at the identical grid box (same-pixel-location
    assumption for a repeated-route, similar-viewpoint traverse)."""
    if f_q.grid_dims != f_m.grid_dims or f_q.channels != f_m.channels:
        raise ValueError(
            f"query/map feature dims differ: {f_q.values.shape} vs {f_m.values.shape}"
        )
    return FeatureRegion(f_q, grid_box), FeatureRegion(f_m, grid_box)


def encoding_dim(mode: str, channels: int) -> int:
    if mode not in ENCODING_MODES:
        raise ValueError(f"unknown encoding mode {mode!r}")
    return 2 * channels if mode == "concat" else channels


def build_encoding(
    r_q: FeatureRegion,
    r_m: FeatureRegion,
    mode: str = "concat",
    p: float = DEFAULT_GEM_P,
    eps: float = GEM_EPS,
) -> np.ndarray:
    """Classifier input from a pooled region pair.

    concat: [gem(r_q) || gem(r_m)] (query first, length 2C);
    disparity: gem(r_q) - gem(r_m); query_only: gem(r_q).
    """
    if mode not in ENCODING_MODES:
        raise ValueError(f"unknown encoding mode {mode!r}")
    if r_q.channels != r_m.channels:
        raise ValueError(f"region channel mismatch: {r_q.channels} vs {r_m.channels}")
    v_q = gem_pool(r_q, p, eps)
    if mode == "query_only":
        return v_q
    v_m = gem_pool(r_m, p, eps)
    if mode == "concat":
        return np.concatenate([v_q, v_m])
    return v_q - v_m


def build_encodings(
    f_q: FeatureMap,
    f_m: FeatureMap | None,
    grid_boxes: np.ndarray,
    mode: str = "concat",
    p: float = DEFAULT_GEM_P,
    eps: float = GEM_EPS,
) -> np.ndarray:
    """Batched encodings for all of a frame's candidates at once (hot path).

    ``f_m`` may be None only in query_only mode.
    """
    if mode not in ENCODING_MODES:
        raise ValueError(f"unknown encoding mode {mode!r}")
    v_q = gem_pool_boxes(f_q, grid_boxes, p, eps)
    if mode == "query_only":
        return v_q
    if f_m is None:
        raise ValueError(f"mode {mode!r} needs map features")
    if f_q.grid_dims != f_m.grid_dims or f_q.channels != f_m.channels:
        raise ValueError(
            f"query/map feature dims differ: {f_q.values.shape} vs {f_m.values.shape}"
        )
    v_m = gem_pool_boxes(f_m, grid_boxes, p, eps)
    return np.concatenate([v_q, v_m], axis=1) if mode == "concat" else v_q - v_m


def derive_encodings(concat_encodings: np.ndarray, mode: str) -> np.ndarray:
    """Project (N, 2C) concat encodings onto another mode.

    concat stores [gem(r_q) || gem(r_m)], so disparity and query_only are
    exact linear views of it; ablation runs reuse one pooling pass.
    """
    enc = np.asarray(concat_encodings, dtype=np.float64)
    if enc.ndim != 2 or enc.shape[1] % 2 != 0:
        raise ValueError(f"expected (N, 2C) concat encodings, got {enc.shape}")
    if mode == "concat":
        return enc
    c = enc.shape[1] // 2
    if mode == "query_only":
        return enc[:, :c].copy()
    if mode == "disparity":
        return enc[:, :c] - enc[:, c:]
    raise ValueError(f"unknown encoding mode {mode!r}")


def box_contains(box: tuple[float, float, float, float], x: float, y: float) -> bool:
    """Inclusive-boundary containment, matching the pixel-flag annotations."""
    return box[0] <= x <= box[2] and box[1] <= y <= box[3]


def label_candidates(
    candidates: list[CandidateDetection], centroids: np.ndarray
) -> list[CandidateDetection]:
    """Training labels: y=1 iff the pixel box contains at least one annotated
    centroid.  Labels are independent per candidate (overlapping boxes around
    one centroid are all positive); one-to-one matching is evaluation-side.
    """
    pts = np.asarray(centroids, dtype=np.float64).reshape(-1, 2)
    for cand in candidates:
        cand.label = int(any(box_contains(cand.box, x, y) for x, y in pts))
    return candidates
