"""Reference-map retrieval: cosine top-1 over global descriptors, optionally
restricted to the query's submap.

Descriptors shipped with the manifest take precedence (real VPR descriptors
can be dropped in); otherwise a GeM global descriptor is computed from the
frame's feature map.  The scan is exhaustive - submaps are small and
correctness beats speed here.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import dataset_io
from .tensors import DEFAULT_GEM_P, GEM_EPS, FeatureMap, gem_pool, l2_normalize


class RetrievalResult(NamedTuple):
    frame_id: str
    similarity: float


def compute_global_descriptor(
    fmap: FeatureMap, p: float = DEFAULT_GEM_P, eps: float = GEM_EPS
) -> np.ndarray:
    """GeM-pool the whole map and L2-normalize; unit-norm float64 vector."""
    return l2_normalize(gem_pool(fmap.region(fmap.full_box()), p, eps))


@dataclass
class RetrievalIndex:
    """Immutable store of L2-normalized reference descriptors."""

    descriptors: np.ndarray  # (N, D), rows unit norm
    frame_ids: list[str]
    submap_ids: list[str]

    def __post_init__(self):
        if self.descriptors.ndim != 2 or self.descriptors.shape[0] == 0:
            raise ValueError("retrieval index needs a non-empty (N, D) descriptor matrix")
        if len(self.frame_ids) != self.descriptors.shape[0] or len(self.submap_ids) != len(
            self.frame_ids
        ):
            raise ValueError("frame_ids/submap_ids do not match the descriptor count")
        self.descriptors.setflags(write=False)


def build_index(
    manifest: dataset_io.TraverseManifest, p: float = DEFAULT_GEM_P, eps: float = GEM_EPS
) -> RetrievalIndex:
    """Index every reference frame of a manifest."""
    rows = []
    frame_ids = []
    submap_ids = []
    for ref in manifest.reference_frames:
        if ref.descriptor_path is not None:
            vec = dataset_io.load_descriptor(ref.descriptor_path)
        else:
            vec = compute_global_descriptor(dataset_io.load_feature_map(ref.feature_path), p, eps)
        rows.append(l2_normalize(vec))
        frame_ids.append(ref.frame_id)
        submap_ids.append(ref.submap_id)
    lengths = {r.shape[0] for r in rows}
    if len(lengths) != 1:
        raise ValueError(f"reference descriptors disagree in length: {sorted(lengths)}")
    return RetrievalIndex(np.stack(rows), frame_ids, submap_ids)


def retrieve(index: RetrievalIndex, query: np.ndarray, submap: str | None = None) -> RetrievalResult:
    """Best reference by cosine similarity; exact ties break to the
    lexicographically smallest frame_id, independent of insertion order."""
    q = l2_normalize(np.asarray(query, dtype=np.float64).reshape(-1))
    if q.shape[0] != index.descriptors.shape[1]:
        raise ValueError(
            f"query descriptor length {q.shape[0]} does not match index "
            f"{index.descriptors.shape[1]}"
        )
    if submap is None:
        eligible = np.arange(len(index.frame_ids))
    else:
        eligible = np.array(
            [i for i, s in enumerate(index.submap_ids) if s == submap], dtype=np.intp
        )
        if eligible.size == 0:
            raise ValueError(f"no reference in submap {submap!r}")
    sims = index.descriptors[eligible] @ q
    best = float(sims.max())
    tied = [index.frame_ids[eligible[i]] for i in np.flatnonzero(sims == best)]
    return RetrievalResult(frame_id=min(tied), similarity=min(best, 1.0))
