"""Score fusion, ground-truth matching, PR metrics, and whole-system
evaluation, including the ablation scorers.

Matching is greedy one-to-one by descending score (duplicates count as
false positives); PR curves reuse the flags computed once on the full
candidate set, so threshold sweeps only truncate the ranked list.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import dataset_io, retrieval
from .classifier import ClassifierModel
from .regions import (
    DEFAULT_MIN_AREA_FRACTION,
    DEFAULT_SCORE_FLOOR,
    CandidateDetection,
    box_contains,
    build_encodings,
    filter_candidates,
    label_candidates,
    rescale_box,
)
from .tensors import DEFAULT_GEM_P, GEM_EPS, gem_pool_boxes

EVAL_MODES = ("ours", "yolop_only", "l2", "disparity", "query_only")
_MODE_ENCODINGS = {"ours": "concat", "disparity": "disparity", "query_only": "query_only"}


@dataclass
class EvalConfig:
    operating_threshold: float = 0.25
    target_recall: float = 0.95

    def __post_init__(self):
        if not (0.0 < self.operating_threshold < 1.0):
            raise ValueError("operating_threshold must lie in (0, 1)")
        if not (0.0 < self.target_recall <= 1.0):
            raise ValueError("target_recall must lie in (0, 1]")


def fuse(s_c: float, s_d: float) -> float:
    """Final score: the average of classifier and detector confidence."""
    if not (0.0 <= s_c <= 1.0 and 0.0 <= s_d <= 1.0):
        raise ValueError(f"scores must lie in [0, 1], got ({s_c}, {s_d})")
    return 0.5 * (s_c + s_d)


def fuse_scores(s_c: np.ndarray, s_d: np.ndarray) -> np.ndarray:
    s_c = np.asarray(s_c, dtype=np.float64)
    s_d = np.asarray(s_d, dtype=np.float64)
    if s_c.shape != s_d.shape:
        raise ValueError("score arrays differ in shape")
    if s_c.size and (min(s_c.min(), s_d.min()) < 0.0 or max(s_c.max(), s_d.max()) > 1.0):
        raise ValueError("scores must lie in [0, 1]")
    return 0.5 * (s_c + s_d)


def match_detections(
    boxes: list[tuple[float, float, float, float]],
    scores: np.ndarray,
    centroids: np.ndarray,
) -> tuple[np.ndarray, int]:
    """Greedy one-to-one matching of a frame's detections to GT centroids.

    Walks detections by descending score (ties by detection index); each
    claims the nearest-to-box-center unclaimed centroid it contains and
    becomes a TP, otherwise it is an FP.  Returns per-detection TP flags in
    the input order plus the count of unclaimed centroids (FN).
    """
    scores = np.asarray(scores, dtype=np.float64)
    pts = np.asarray(centroids, dtype=np.float64).reshape(-1, 2)
    if len(boxes) != scores.shape[0]:
        raise ValueError("boxes and scores differ in length")
    if scores.size and not np.isfinite(scores).all():
        raise ValueError("non-finite detection scores")
    flags = np.zeros(len(boxes), dtype=bool)
    claimed = np.zeros(pts.shape[0], dtype=bool)
    order = sorted(range(len(boxes)), key=lambda i: (-scores[i], i))
    for i in order:
        box = boxes[i]
        cx, cy = 0.5 * (box[0] + box[2]), 0.5 * (box[1] + box[3])
        best_j = -1
        best_d = np.inf
        for j in range(pts.shape[0]):
            if claimed[j] or not box_contains(box, pts[j, 0], pts[j, 1]):
                continue
            d = (pts[j, 0] - cx) ** 2 + (pts[j, 1] - cy) ** 2
            if d < best_d:
                best_d = d
                best_j = j
        if best_j >= 0:
            claimed[best_j] = True
            flags[i] = True
    return flags, int((~claimed).sum())


@dataclass
class PRCurve:
    """Cumulative precision/recall at every distinct score threshold."""

    thresholds: np.ndarray  # distinct scores, descending
    precision: np.ndarray
    recall: np.ndarray
    tp: np.ndarray  # cumulative counts at each threshold
    fp: np.ndarray
    total_gt: int

    def points(self) -> list[list[float]]:
        return [
            [float(t), float(p), float(r)]
            for t, p, r in zip(self.thresholds, self.precision, self.recall)
        ]


@dataclass
class ScoredRecord:
    """One flagged detection in the global ranking."""

    score: float
    is_tp: bool
    frame_id: str
    det_index: int


def pr_curve(records: list[ScoredRecord], total_gt: int) -> PRCurve:
    """Assemble the global PR curve from per-frame matched detections.

    Deterministic ordered reduction: sort by score descending, ties by
    frame_id then detection index; one curve point per distinct score.
    """
    if total_gt < 1:
        raise ValueError("total_gt must be >= 1")
    ordered = sorted(records, key=lambda r: (-r.score, r.frame_id, r.det_index))
    thresholds, tps, fps = [], [], []
    tp = fp = 0
    for i, rec in enumerate(ordered):
        if rec.is_tp:
            tp += 1
        else:
            fp += 1
        last_of_tie = i + 1 == len(ordered) or ordered[i + 1].score != rec.score
        if last_of_tie:
            thresholds.append(rec.score)
            tps.append(tp)
            fps.append(fp)
    tps_arr = np.array(tps, dtype=np.int64)
    fps_arr = np.array(fps, dtype=np.int64)
    kept = tps_arr + fps_arr
    with np.errstate(invalid="ignore"):
        precision = np.where(kept > 0, tps_arr / np.maximum(kept, 1), 0.0)
    recall = tps_arr / total_gt
    return PRCurve(
        thresholds=np.array(thresholds, dtype=np.float64),
        precision=precision,
        recall=recall,
        tp=tps_arr,
        fp=fps_arr,
        total_gt=total_gt,
    )


def _f1(tp: int, fp: int, total_gt: int) -> float:
    # 2TP / (2TP + FP + FN); robust when nothing is kept
    fn = total_gt - tp
    denom = 2 * tp + fp + fn
    return 2.0 * tp / denom if denom > 0 else 0.0


def metrics(curve: PRCurve, cfg: EvalConfig) -> dict:
    """The four summary statistics of a PR curve.

    f1_at_tau keeps detections with score >= tau; auc is the trapezoid over
    the achieved (recall, precision) points anchored at (0, precision of the
    top-ranked point); p_at_target_recall reads the first (highest-threshold)
    point with recall >= target, falling back to the first point achieving
    the curve's maximum recall (flagged unreached).
    """
    n_points = curve.thresholds.shape[0]
    if n_points == 0:
        return {
            "f1_at_tau": 0.0,
            "auc": 0.0,
            "max_f1": 0.0,
            "p_at_target_recall": 0.0,
            "target_recall_reached": False,
        }
    tau = cfg.operating_threshold
    kept = np.flatnonzero(curve.thresholds >= tau)
    if kept.size:
        k = int(kept[-1])
        f1_at_tau = _f1(int(curve.tp[k]), int(curve.fp[k]), curve.total_gt)
    else:
        f1_at_tau = _f1(0, 0, curve.total_gt)

    max_f1 = max(
        _f1(int(t), int(f), curve.total_gt) for t, f in zip(curve.tp, curve.fp)
    )

    rec = np.concatenate([[0.0], curve.recall])
    prec = np.concatenate([[curve.precision[0]], curve.precision])
    auc = float(np.trapezoid(prec, rec))

    max_recall = float(curve.recall[-1])
    reached = max_recall >= cfg.target_recall
    target = cfg.target_recall if reached else max_recall
    idx = int(np.flatnonzero(curve.recall >= target)[0])
    return {
        "f1_at_tau": float(f1_at_tau),
        "auc": auc,
        "max_f1": float(max_f1),
        "p_at_target_recall": float(curve.precision[idx]),
        "target_recall_reached": bool(reached),
    }


def l2_ablation_score(r_q, r_m, p: float = DEFAULT_GEM_P, eps: float = GEM_EPS) -> float:
    """Distance-based ablation score: pool both regions, then d / (1 + d).

    Larger map difference means a higher detection score; the transform is
    strictly increasing, so PR ranking is unchanged versus raw distance.
    """
    from .tensors import gem_pool

    d = float(np.linalg.norm(gem_pool(r_q, p, eps) - gem_pool(r_m, p, eps)))
    return d / (1.0 + d)


# ---------------------------------------------------------------------------
# Frame assembly shared by evaluation, training-set construction, and the
# in-training validation scorer.


@dataclass
class FrameData:
    """Everything needed to score and match one query frame."""

    frame_id: str
    candidates: list[CandidateDetection]
    detector_scores: np.ndarray
    centroids: np.ndarray
    encodings: np.ndarray | None = None  # (N, D) for the requested encoding mode
    l2_scores: np.ndarray | None = None  # d/(1+d) per candidate, l2 mode only
    reference_id: str | None = None


def collect_frames(
    manifest: dataset_io.TraverseManifest,
    encoding_mode: str | None,
    *,
    gem_p: float = DEFAULT_GEM_P,
    eps: float = GEM_EPS,
    score_floor: float = DEFAULT_SCORE_FLOOR,
    min_area_fraction: float = DEFAULT_MIN_AREA_FRACTION,
    with_l2: bool = False,
    frame_ids: list[str] | None = None,
) -> list[FrameData]:
    """Run retrieval (or pinning) plus the region pipeline over a manifest.

    ``encoding_mode`` of None skips feature loading entirely (detector-only
    paths).  Reference feature maps are cached across queries.
    """
    need_features = encoding_mode is not None or with_l2
    refs = manifest.reference_by_id()
    index = None
    ref_cache: dict[str, object] = {}
    # detections/annotations files are commonly shared across a traverse's
    # frames; parse each file once
    det_cache: dict = {}
    ann_cache: dict = {}
    wanted = set(frame_ids) if frame_ids is not None else None

    out: list[FrameData] = []
    for q in manifest.query_frames:
        if wanted is not None and q.frame_id not in wanted:
            continue
        if q.detections_path not in det_cache:
            det_cache[q.detections_path] = dataset_io.load_detections(
                q.detections_path, manifest.image_dims
            )
        detections = det_cache[q.detections_path]
        if q.frame_id not in detections:
            raise dataset_io.ValidationError(
                f"detections file {q.detections_path} has no entry for frame {q.frame_id}"
            )
        if q.annotations_path not in ann_cache:
            ann_cache[q.annotations_path] = dataset_io.load_annotations(
                q.annotations_path, manifest.image_dims
            )
        annotations = ann_cache[q.annotations_path]
        if q.frame_id not in annotations:
            raise dataset_io.ValidationError(
                f"annotations file {q.annotations_path} has no entry for frame {q.frame_id}"
            )
        centroids = annotations[q.frame_id]
        candidates = filter_candidates(
            detections[q.frame_id], manifest.image_dims, score_floor, min_area_fraction
        )
        label_candidates(candidates, centroids)
        data = FrameData(
            frame_id=q.frame_id,
            candidates=candidates,
            detector_scores=np.array([c.detector_score for c in candidates], dtype=np.float64),
            centroids=centroids,
        )

        if need_features:
            f_q = dataset_io.load_feature_map(q.feature_path)
            grid = np.zeros((len(candidates), 4), dtype=np.int64)
            for row, cand in enumerate(candidates):
                cand.grid_box = rescale_box(cand.box, manifest.image_dims, f_q.grid_dims)
                grid[row] = cand.grid_box.as_array()

            if q.pinned_reference_id is not None:
                ref_id = q.pinned_reference_id
            else:
                if index is None:
                    index = retrieval.build_index(manifest, gem_p, eps)
                if q.descriptor_path is not None:
                    qdesc = dataset_io.load_descriptor(q.descriptor_path)
                else:
                    qdesc = retrieval.compute_global_descriptor(f_q, gem_p, eps)
                ref_id = retrieval.retrieve(index, qdesc, q.submap_id).frame_id
            if ref_id not in refs:
                raise dataset_io.ValidationError(
                    f"query {q.frame_id} resolved to unknown reference {ref_id!r}"
                )
            data.reference_id = ref_id
            needs_map = with_l2 or (encoding_mode is not None and encoding_mode != "query_only")
            f_m = None
            if needs_map:
                f_m = ref_cache.get(ref_id)
                if f_m is None:
                    f_m = dataset_io.load_feature_map(refs[ref_id].feature_path)
                    ref_cache[ref_id] = f_m

            if encoding_mode is not None:
                data.encodings = build_encodings(f_q, f_m, grid, encoding_mode, gem_p, eps)
            if with_l2:
                v_q = gem_pool_boxes(f_q, grid, gem_p, eps)
                v_m = gem_pool_boxes(f_m, grid, gem_p, eps)
                d = np.linalg.norm(v_q - v_m, axis=1)
                data.l2_scores = d / (1.0 + d)
        out.append(data)
    return out


def build_training_set(frames: list[FrameData]) -> tuple[np.ndarray, np.ndarray]:
    """Stack every frame's labeled encodings into one (N, D), (N,) pair."""
    mats = [f.encodings for f in frames if f.encodings is not None and len(f.candidates)]
    if not mats:
        raise ValueError("no labeled candidates; cannot build a training set")
    encodings = np.concatenate(mats, axis=0)
    labels = np.concatenate(
        [np.array([c.label for c in f.candidates], dtype=np.float64) for f in frames if len(f.candidates)]
    )
    return encodings, labels


def _frame_records(
    frames: list[FrameData], scores_per_frame: list[np.ndarray]
) -> tuple[list[ScoredRecord], int]:
    records: list[ScoredRecord] = []
    total_gt = 0
    for frame, scores in zip(frames, scores_per_frame):
        total_gt += frame.centroids.shape[0]
        flags, _ = match_detections([c.box for c in frame.candidates], scores, frame.centroids)
        records.extend(
            ScoredRecord(
                score=float(s), is_tp=bool(f), frame_id=frame.frame_id, det_index=c.index
            )
            for s, f, c in zip(scores, flags, frame.candidates)
        )
    return records, total_gt


def score_frames(
    frames: list[FrameData], model: ClassifierModel | None, score_source: str
) -> list[np.ndarray]:
    """Per-frame decision scores.

    score_source: 'detector' (raw S_d), 'classifier' (raw S_c), 'fused'
    (Eq.-style average), 'l2_raw', or 'l2_fused'.
    """
    out = []
    for frame in frames:
        if score_source == "detector":
            out.append(frame.detector_scores)
            continue
        if score_source in ("l2_raw", "l2_fused"):
            if frame.l2_scores is None:
                raise ValueError("frame data was collected without l2 scores")
            out.append(
                frame.l2_scores
                if score_source == "l2_raw"
                else fuse_scores(frame.l2_scores, frame.detector_scores)
            )
            continue
        if model is None:
            raise ValueError(f"score source {score_source!r} needs a model")
        if frame.encodings is None:
            raise ValueError("frame data was collected without encodings")
        s_c = (
            model.predict(frame.encodings)
            if frame.encodings.shape[0]
            else np.zeros(0, dtype=np.float64)
        )
        if score_source == "classifier":
            out.append(np.asarray(s_c, dtype=np.float64))
        elif score_source == "fused":
            out.append(fuse_scores(s_c, frame.detector_scores))
        else:
            raise ValueError(f"unknown score source {score_source!r}")
    return out


def curve_and_metrics(
    frames: list[FrameData],
    scores_per_frame: list[np.ndarray],
    cfg: EvalConfig,
) -> tuple[PRCurve, dict]:
    records, total_gt = _frame_records(frames, scores_per_frame)
    curve = pr_curve(records, total_gt)
    return curve, metrics(curve, cfg)


def make_validation_scorer(
    frames: list[FrameData], operating_threshold: float, score_source: str = "fused"
):
    """Closure handed to the training loop: model -> validation F1 at tau."""
    if not frames:
        raise ValueError("empty validation set")
    cfg = EvalConfig(operating_threshold=operating_threshold)
    source = "fused" if score_source == "fused" else "classifier"

    def scorer(model: ClassifierModel) -> float:
        scores = score_frames(frames, model, source)
        _, summary = curve_and_metrics(frames, scores, cfg)
        return summary["f1_at_tau"]

    return scorer


def evaluate_system(
    manifest: dataset_io.TraverseManifest,
    model: ClassifierModel | None,
    mode: str,
    cfg: EvalConfig | None = None,
    *,
    gem_p: float | None = None,
    eps: float = GEM_EPS,
    score_floor: float = DEFAULT_SCORE_FLOOR,
    min_area_fraction: float = DEFAULT_MIN_AREA_FRACTION,
) -> dict:
    """Full evaluation of one traverse under the chosen scoring mode.

    Learned modes fuse classifier and detector scores; 'l2' reports both the
    fused and the raw-distance variant; 'yolop_only' is the detector
    baseline.  Deterministic for fixed inputs.
    """
    if mode not in EVAL_MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {EVAL_MODES}")
    cfg = cfg or EvalConfig()

    encoding_mode = _MODE_ENCODINGS.get(mode)
    if encoding_mode is not None:
        if model is None:
            raise ValueError(f"mode {mode!r} needs a trained model")
        if model.encoding_mode != encoding_mode:
            raise ValueError(
                f"mode {mode!r} needs a {encoding_mode!r} model, got {model.encoding_mode!r}"
            )
        if gem_p is None:
            gem_p = model.gem_p
    else:
        if model is not None:
            raise ValueError(f"mode {mode!r} takes no model")
        if gem_p is None:
            gem_p = DEFAULT_GEM_P

    frames = collect_frames(
        manifest,
        encoding_mode,
        gem_p=gem_p,
        eps=eps,
        score_floor=score_floor,
        min_area_fraction=min_area_fraction,
        with_l2=(mode == "l2"),
    )
    report = {
        "mode": mode,
        "operating_threshold": cfg.operating_threshold,
        "target_recall": cfg.target_recall,
        "gem_p": float(gem_p),
        "score_floor": score_floor,
        "min_area_fraction": min_area_fraction,
        "n_query_frames": len(frames),
        "n_candidates": int(sum(len(f.candidates) for f in frames)),
        "total_gt": int(sum(f.centroids.shape[0] for f in frames)),
        "metadata": dict(manifest.metadata),
    }
    if mode == "yolop_only":
        scores = score_frames(frames, None, "detector")
        curve, summary = curve_and_metrics(frames, scores, cfg)
        report["metrics"] = summary
        report["pr_points"] = curve.points()
    elif mode == "l2":
        fused = score_frames(frames, None, "l2_fused")
        curve, summary = curve_and_metrics(frames, fused, cfg)
        report["metrics"] = summary
        report["pr_points"] = curve.points()
        raw = score_frames(frames, None, "l2_raw")
        curve_raw, summary_raw = curve_and_metrics(frames, raw, cfg)
        report["metrics_raw"] = summary_raw
        report["pr_points_raw"] = curve_raw.points()
    else:
        scores = score_frames(frames, model, "fused")
        curve, summary = curve_and_metrics(frames, scores, cfg)
        report["metrics"] = summary
        report["pr_points"] = curve.points()
    return report
