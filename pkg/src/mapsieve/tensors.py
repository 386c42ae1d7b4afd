"""Dense feature tensors, grid regions, GeM pooling, and small vector ops.

Everything here is immutable after construction and safe to share across
workers; the operations are pure functions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels

DEFAULT_GEM_P = 3.0
GEM_EPS = 1e-6


@dataclass(frozen=True)
class GridBox:
    """Half-open box (x0, y0, x1, y1) in feature-grid cell coordinates."""

    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        if self.x0 < 0 or self.y0 < 0:
            raise ValueError(f"grid box has negative origin: {self.tuple()}")
        if self.x0 >= self.x1 or self.y0 >= self.y1:
            raise ValueError(f"degenerate grid box (needs at least one cell): {self.tuple()}")

    def tuple(self) -> tuple[int, int, int, int]:
        return (self.x0, self.y0, self.x1, self.y1)

    @property
    def cells(self) -> int:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def as_array(self) -> np.ndarray:
        return np.array([self.x0, self.y0, self.x1, self.y1], dtype=np.int64)


class FeatureMap:
    """Dense (H, W, C) channel-last feature tensor for one image.

    Values are held as read-only float32 (the on-disk precision); pooling
    promotes to float64 internally.  ``source_image_dims`` is the pixel size
    (width, height) of the image the features were computed from.
    """

    __slots__ = ("values", "source_image_dims")

    def __init__(self, values, source_image_dims: tuple[int, int]):
        arr = np.asarray(values)
        if arr.ndim != 3:
            raise ValueError(f"feature map must be 3-D (H, W, C), got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ValueError(f"feature map dims must all be >= 1, got shape {arr.shape}")
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        if not np.isfinite(arr).all():
            raise ValueError("feature map contains non-finite values")
        w, h = int(source_image_dims[0]), int(source_image_dims[1])
        if w <= 0 or h <= 0:
            raise ValueError(f"source image dims must be strictly positive, got {(w, h)}")
        arr.setflags(write=False)
        self.values = arr
        self.source_image_dims = (w, h)

    @property
    def height_f(self) -> int:
        return self.values.shape[0]

    @property
    def width_f(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    @property
    def grid_dims(self) -> tuple[int, int]:
        """(width_f, height_f), mirroring the (width, height) image convention."""
        return (self.width_f, self.height_f)

    def full_box(self) -> GridBox:
        return GridBox(0, 0, self.width_f, self.height_f)

    def region(self, box: GridBox) -> "FeatureRegion":
        return FeatureRegion(self, box)


class FeatureRegion:
    """View into a FeatureMap selected by a GridBox (at least one cell)."""

    __slots__ = ("map", "box")

    def __init__(self, fmap: FeatureMap, box: GridBox):
        if box.x1 > fmap.width_f or box.y1 > fmap.height_f:
            raise ValueError(
                f"grid box {box.tuple()} exceeds grid {fmap.width_f}x{fmap.height_f}"
            )
        self.map = fmap
        self.box = box

    @property
    def values(self) -> np.ndarray:
        b = self.box
        return self.map.values[b.y0 : b.y1, b.x0 : b.x1, :]

    @property
    def channels(self) -> int:
        return self.map.channels


def _check_gem_params(p: float, eps: float) -> None:
    if not np.isfinite(p) or p <= 0:
        raise ValueError(f"GeM exponent must be finite and > 0, got {p}")
    if not (0.0 < eps <= 1e-3):
        raise ValueError(f"GeM eps must lie in (0, 1e-3], got {eps}")


def gem_pool(region: FeatureRegion, p: float = DEFAULT_GEM_P, eps: float = GEM_EPS) -> np.ndarray:
    """Generalized-mean pool a region into one float64 value per channel.

    Per channel: (mean over cells of max(value, eps)**p) ** (1/p).  Values
    are clamped at eps before exponentiation so fractional powers stay real
    when features contain negatives.
    """
    _check_gem_params(p, eps)
    out = _kernels.gem_pool_regions(region.map.values, region.box.as_array()[None, :], p, eps)[0]
    if not np.isfinite(out).all():
        raise ValueError("non-finite GeM pooling output")
    return out


def gem_pool_boxes(
    fmap: FeatureMap, boxes: np.ndarray, p: float = DEFAULT_GEM_P, eps: float = GEM_EPS
) -> np.ndarray:
    """Batch-pool many grid boxes of one map; returns (N, C) float64.

    This is the hot path when scoring a frame's worth of candidates.
    """
    _check_gem_params(p, eps)
    boxes = np.asarray(boxes, dtype=np.int64)
    if boxes.ndim != 2 or boxes.shape[1] != 4:
        raise ValueError(f"boxes must be (N, 4), got {boxes.shape}")
    if boxes.size:
        if (boxes[:, 0] >= boxes[:, 2]).any() or (boxes[:, 1] >= boxes[:, 3]).any():
            raise ValueError("degenerate grid box in batch")
        if (
            boxes[:, 0].min() < 0
            or boxes[:, 1].min() < 0
            or boxes[:, 2].max() > fmap.width_f
            or boxes[:, 3].max() > fmap.height_f
        ):
            raise ValueError("grid box in batch exceeds the grid")
    out = _kernels.gem_pool_regions(fmap.values, boxes, p, eps)
    if not np.isfinite(out).all():
        raise ValueError("non-finite GeM pooling output")
    return out


def l2_distance(a, b) -> float:
    """Euclidean distance between two equal-length vectors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    return float(np.linalg.norm(a - b))


def cosine_similarity(a, b) -> float:
    """Cosine similarity clamped to [-1, 1]; undefined for zero vectors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("undefined similarity for a zero vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def l2_normalize(v) -> np.ndarray:
    """Scale a vector to unit L2 norm."""
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if n == 0.0:
        raise ValueError("cannot normalize a zero vector")
    return v / n
