"""Seeded synthetic traverse generator: the desk-scale stand-in for a
repeated route with appearance change and a noisy high-recall detector.

Reference frames are smooth random fields; the paired query frame is the
same field under a per-frame appearance change (global gain, per-channel
gain jitter, additive noise) with localized "vehicle" signatures added at
ground-truth boxes.  Candidate detections are all ground-truth boxes plus
distractor boxes over map-consistent regions; a configurable fraction of
distractors sits on vehicle-like static structure baked into both map and
query (the parked-car analogue), which is what separates map-aware scoring
from query-only scoring.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import dataset_io
from .dataset_io import QueryFrame, ReferenceFrame, TraverseManifest
from .regions import rescale_box
from .retrieval import compute_global_descriptor
from .tensors import FeatureMap, GridBox, l2_normalize

SPLITS = ("train", "val", "test")

# Per-frame per-channel content scale; wide spread keeps reference
# descriptors distinguishable inside a submap.
_CHANNEL_SCALE_RANGE = (0.3, 1.0)
_COARSE_STRIDE = 4  # smooth-field coarse grid stride, in feature cells
_BOX_REL_RANGE = (0.09, 0.28)  # box width/height relative to image dims
_PLACE_TRIES = 60
# Per-object signature direction = base direction blended with this much
# random spread; objects sharing one exact direction would make the
# difference encoding trivially separable by projection.
_SIGNATURE_JITTER = 0.3


@dataclass
class SynthConfig:
    """Knobs for dataset difficulty; defaults match the acceptance harness."""

    grid_height: int = 15
    grid_width: int = 20
    channels: int = 16
    image_width: int = 640
    image_height: int = 480
    train_frames: int = 1000
    val_frames: int = 100
    test_frames: int = 100
    vehicles_min: int = 1
    vehicles_max: int = 4
    distractors_min: int = 2
    distractors_max: int = 6
    static_distractor_fraction: float = 0.5
    appearance_sigma: float = 0.12
    signature_strength: float = 0.9
    tp_score_mean: float = 0.7
    fp_score_mean: float = 0.35
    score_concentration: float = 12.0
    min_tp_score: float = 0.1
    static_flicker: float = 1.0
    retrieval_noise: float = 0.0
    submap_size: int = 25
    gem_p: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if min(self.grid_height, self.grid_width, self.channels) < 1:
            raise ValueError("grid dims and channels must be >= 1")
        if min(self.image_width, self.image_height) < 8:
            raise ValueError("image dims must be >= 8 px")
        if min(self.train_frames, self.val_frames, self.test_frames) < 0:
            raise ValueError("frame counts must be >= 0")
        if self.vehicles_min < 0 or self.vehicles_max < self.vehicles_min:
            raise ValueError("bad vehicles-per-frame range")
        if self.distractors_min < 0 or self.distractors_max < self.distractors_min:
            raise ValueError("bad distractors-per-frame range")
        if self.appearance_sigma < 0 or self.signature_strength < 0:
            raise ValueError("appearance_sigma and signature_strength must be >= 0")
        for name in ("tp_score_mean", "fp_score_mean"):
            v = getattr(self, name)
            if not (0.0 < v < 1.0):
                raise ValueError(f"{name} must lie in (0, 1)")
        if self.retrieval_noise < 0:
            raise ValueError("retrieval_noise must be >= 0")
        if self.static_flicker < 0:
            raise ValueError("static_flicker must be >= 0")
        if self.submap_size < 1:
            raise ValueError("submap_size must be >= 1")

    @property
    def image_dims(self) -> tuple[int, int]:
        return (self.image_width, self.image_height)

    @property
    def grid_dims(self) -> tuple[int, int]:
        return (self.grid_width, self.grid_height)

    def as_dict(self) -> dict:
        return asdict(self)


def _bilinear_upsample(coarse: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Upsample an (h, w, C) grid to (out_h, out_w, C) with bilinear weights."""
    h, w = coarse.shape[:2]
    ys = np.linspace(0.0, h - 1.0, out_h)
    xs = np.linspace(0.0, w - 1.0, out_w)
    y0 = np.minimum(np.floor(ys).astype(np.intp), h - 2)
    x0 = np.minimum(np.floor(xs).astype(np.intp), w - 2)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    a = coarse[y0][:, x0]
    b = coarse[y0][:, x0 + 1]
    c = coarse[y0 + 1][:, x0]
    d = coarse[y0 + 1][:, x0 + 1]
    return a * (1 - fy) * (1 - fx) + b * (1 - fy) * fx + c * fy * (1 - fx) + d * fy * fx


def _smooth_field(rng: np.random.Generator, cfg: SynthConfig) -> np.ndarray:
    """Spatially coherent positive random field, (H, W, C) float64."""
    h_c = max(2, cfg.grid_height // _COARSE_STRIDE + 1)
    w_c = max(2, cfg.grid_width // _COARSE_STRIDE + 1)
    coarse = rng.uniform(0.1, 1.0, size=(h_c, w_c, cfg.channels))
    scale = rng.uniform(*_CHANNEL_SCALE_RANGE, size=cfg.channels)
    return _bilinear_upsample(coarse * scale, cfg.grid_height, cfg.grid_width)


def _overlaps(a: GridBox, b: GridBox) -> bool:
    return not (a.x1 <= b.x0 or b.x1 <= a.x0 or a.y1 <= b.y0 or b.y1 <= a.y0)


def _sample_box(rng: np.random.Generator, cfg: SynthConfig) -> tuple[float, float, float, float]:
    w = rng.uniform(*_BOX_REL_RANGE) * cfg.image_width
    h = rng.uniform(*_BOX_REL_RANGE) * cfg.image_height
    cx = rng.uniform(w / 2, cfg.image_width - w / 2)
    cy = rng.uniform(h / 2, cfg.image_height - h / 2)
    return (cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


def _place_boxes(
    rng: np.random.Generator, n: int, cfg: SynthConfig, occupied: list[GridBox]
) -> list[tuple[tuple[float, float, float, float], GridBox]]:
    """Sample up to n boxes whose grid footprints avoid everything placed so
    far; keeps ground-truth and distractor regions cleanly separated."""
    placed = []
    for _ in range(n):
        for _ in range(_PLACE_TRIES):
            box = _sample_box(rng, cfg)
            gbox = rescale_box(box, cfg.image_dims, cfg.grid_dims)
            if all(not _overlaps(gbox, other) for other in occupied):
                occupied.append(gbox)
                placed.append((box, gbox))
                break
    return placed


def _object_direction(rng: np.random.Generator, base: np.ndarray) -> np.ndarray:
    spread = np.abs(rng.standard_normal(base.shape[0]))
    spread /= np.linalg.norm(spread)
    mixed = (1.0 - _SIGNATURE_JITTER) * base + _SIGNATURE_JITTER * spread
    return mixed / np.linalg.norm(mixed)


def _add_signature(
    field: np.ndarray, gbox: GridBox, direction: np.ndarray, strength: float
) -> None:
    field[gbox.y0 : gbox.y1, gbox.x0 : gbox.x1, :] += strength * direction


def _beta_params(mean: float, concentration: float) -> tuple[float, float]:
    return mean * concentration, (1.0 - mean) * concentration


def _tp_score(rng: np.random.Generator, cfg: SynthConfig) -> float:
    # Candidate recall is 100% by construction, so TP confidences stay at or
    # above the pipeline's score floor.
    a, b = _beta_params(cfg.tp_score_mean, cfg.score_concentration)
    for _ in range(1000):
        s = float(rng.beta(a, b))
        if s >= cfg.min_tp_score:
            return s
    return cfg.min_tp_score


def generate_traverse(cfg: SynthConfig, out_dir) -> dict[str, Path]:
    """Write train/val/test splits under out_dir; returns manifest paths.

    Each split gets its own manifest (plus a ``manifest_pinned.json`` twin
    whose queries are pinned to their true reference, the ground-truth
    localization mode).  Fully reproducible from (cfg, seed).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    direction = np.abs(rng.standard_normal(cfg.channels))
    direction = direction / np.linalg.norm(direction)

    with open(out_dir / "synth_config.json", "w", encoding="utf-8") as f:
        json.dump(cfg.as_dict(), f, indent=2, sort_keys=True)
        f.write("\n")

    sigma = cfg.appearance_sigma
    noise_std = sigma / np.sqrt(cfg.channels)
    manifests: dict[str, Path] = {}
    for split, n_frames in zip(SPLITS, (cfg.train_frames, cfg.val_frames, cfg.test_frames)):
        split_dir = out_dir / split
        (split_dir / "features").mkdir(parents=True, exist_ok=True)
        (split_dir / "descriptors").mkdir(parents=True, exist_ok=True)

        refs: list[ReferenceFrame] = []
        queries: list[QueryFrame] = []
        det_frames: dict[str, list] = {}
        ann_frames: dict[str, np.ndarray] = {}
        for i in range(n_frames):
            rid = f"r_{i:04d}"
            qid = f"q_{i:04d}"
            submap = f"sm_{i // cfg.submap_size:03d}"

            n_vehicles = int(rng.integers(cfg.vehicles_min, cfg.vehicles_max + 1))
            n_distractors = int(rng.integers(cfg.distractors_min, cfg.distractors_max + 1))
            n_static = int(round(n_distractors * cfg.static_distractor_fraction))
            n_plain = n_distractors - n_static

            occupied: list[GridBox] = []
            statics = _place_boxes(rng, n_static, cfg, occupied)
            vehicles = _place_boxes(rng, n_vehicles, cfg, occupied)

            ref_field = _smooth_field(rng, cfg)
            static_sigs = []
            for _, gbox in statics:
                dir_i = _object_direction(rng, direction)
                strength_i = cfg.signature_strength * rng.uniform(0.7, 1.3)
                _add_signature(ref_field, gbox, dir_i, strength_i)
                static_sigs.append((gbox, dir_i, strength_i))

            dyn_field = ref_field.copy()
            # Static structure is present in both images, but its intensity
            # flickers between capture times; only the map side reveals that
            # the signature existed before.
            for gbox, dir_i, strength_i in static_sigs:
                flicker = cfg.static_flicker * rng.uniform(-1.0, 1.0)
                _add_signature(dyn_field, gbox, dir_i, strength_i * flicker)
            for _, gbox in vehicles:
                _add_signature(
                    dyn_field,
                    gbox,
                    _object_direction(rng, direction),
                    cfg.signature_strength * rng.uniform(0.7, 1.3),
                )

            global_gain = 1.0 + 2.0 * sigma * rng.uniform(-1.0, 1.0)
            channel_gain = 1.0 + sigma * rng.uniform(-1.0, 1.0, size=cfg.channels)
            noise = rng.normal(0.0, 1.0, size=dyn_field.shape) * noise_std
            query_field = dyn_field * (global_gain * channel_gain) + noise

            plains = _place_boxes(rng, n_plain, cfg, occupied)

            candidates = [(box, _tp_score(rng, cfg)) for box, _ in vehicles]
            a_fp, b_fp = _beta_params(cfg.fp_score_mean, cfg.score_concentration)
            candidates += [
                (box, float(rng.beta(a_fp, b_fp))) for box, _ in statics + plains
            ]
            order = rng.permutation(len(candidates))
            det_frames[qid] = [
                {"box": list(candidates[j][0]), "detector_score": candidates[j][1]}
                for j in order
            ]
            ann_frames[qid] = np.array(
                [[(b[0] + b[2]) / 2.0, (b[1] + b[3]) / 2.0] for b, _ in vehicles],
                dtype=np.float64,
            ).reshape(-1, 2)

            ref_map = FeatureMap(ref_field, cfg.image_dims)
            query_map = FeatureMap(query_field, cfg.image_dims)
            dataset_io.save_feature_map(ref_map, split_dir / "features" / f"{rid}.fmap")
            dataset_io.save_feature_map(query_map, split_dir / "features" / f"{qid}.fmap")

            ref_desc = compute_global_descriptor(ref_map, cfg.gem_p)
            q_desc = compute_global_descriptor(query_map, cfg.gem_p)
            perturb = rng.standard_normal(cfg.channels)
            if cfg.retrieval_noise > 0:
                q_desc = l2_normalize(q_desc + cfg.retrieval_noise * perturb)
            dataset_io.save_descriptor(
                ref_desc, split_dir / "descriptors" / f"{rid}.desc", cfg.image_dims
            )
            dataset_io.save_descriptor(
                q_desc, split_dir / "descriptors" / f"{qid}.desc", cfg.image_dims
            )

            refs.append(
                ReferenceFrame(
                    frame_id=rid,
                    feature_path=split_dir / "features" / f"{rid}.fmap",
                    descriptor_path=split_dir / "descriptors" / f"{rid}.desc",
                    submap_id=submap,
                )
            )
            queries.append(
                QueryFrame(
                    frame_id=qid,
                    feature_path=split_dir / "features" / f"{qid}.fmap",
                    descriptor_path=split_dir / "descriptors" / f"{qid}.desc",
                    submap_id=submap,
                    detections_path=split_dir / "detections.json",
                    annotations_path=split_dir / "annotations.json",
                )
            )

        dataset_io.save_detections(det_frames, split_dir / "detections.json")
        dataset_io.save_annotations(ann_frames, split_dir / "annotations.json")
        metadata = {
            "condition": "synthetic",
            "split": split,
            "generator_seed": str(cfg.seed),
        }
        manifest = TraverseManifest(
            image_dims=cfg.image_dims,
            reference_frames=refs,
            query_frames=queries,
            metadata=metadata,
        )
        manifest_path = split_dir / "manifest.json"
        dataset_io.save_manifest(manifest, manifest_path)

        pinned = TraverseManifest(
            image_dims=cfg.image_dims,
            reference_frames=refs,
            query_frames=[
                QueryFrame(
                    frame_id=q.frame_id,
                    feature_path=q.feature_path,
                    descriptor_path=q.descriptor_path,
                    submap_id=q.submap_id,
                    detections_path=q.detections_path,
                    annotations_path=q.annotations_path,
                    pinned_reference_id=q.frame_id.replace("q_", "r_"),
                )
                for q in queries
            ],
            metadata=metadata,
        )
        dataset_io.save_manifest(pinned, split_dir / "manifest_pinned.json")
        manifests[split] = manifest_path
    return manifests


def corrupt_retrieval(
    manifest: TraverseManifest, fraction: float, seed: int
) -> TraverseManifest:
    """Pin a deterministic fraction of queries to wrong reference frames
    drawn from other submaps (the failed-localization scenario)."""
    if not (0.0 <= fraction <= 1.0):
        raise ValueError("fraction must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    n = len(manifest.query_frames)
    k = int(round(fraction * n))
    chosen = set(rng.permutation(n)[:k].tolist())
    new_queries = []
    for i, q in enumerate(manifest.query_frames):
        if i in chosen:
            eligible = [r for r in manifest.reference_frames if r.submap_id != q.submap_id]
            if not eligible:
                raise ValueError(
                    f"cannot corrupt query {q.frame_id}: no reference outside submap "
                    f"{q.submap_id!r}"
                )
            wrong = eligible[int(rng.integers(len(eligible)))]
            q = QueryFrame(
                frame_id=q.frame_id,
                feature_path=q.feature_path,
                descriptor_path=q.descriptor_path,
                submap_id=q.submap_id,
                detections_path=q.detections_path,
                annotations_path=q.annotations_path,
                pinned_reference_id=wrong.frame_id,
            )
        new_queries.append(q)
    return TraverseManifest(
        image_dims=manifest.image_dims,
        reference_frames=list(manifest.reference_frames),
        query_frames=new_queries,
        metadata=dict(manifest.metadata),
        path=manifest.path,
    )
