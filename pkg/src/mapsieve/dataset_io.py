"""Interchange file formats: feature tensors, detections, annotations,
traverse manifests, and model checkpoints.

Binary layouts are little-endian with a fixed magic and a version byte so
exporters in any language can produce them.  The JSON formats are plain
object models meant to be hand-editable in test fixtures.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .classifier import ClassifierModel
from .tensors import FeatureMap

FEATURE_MAGIC = b"MSFT"
CHECKPOINT_MAGIC = b"MSCK"
FORMAT_VERSION = 1

# Header after magic+version: height_f, width_f, channels, src_width, src_height.
_HEADER = struct.Struct("<5I")


class TensorFormatError(ValueError):
    """Malformed binary container; ``code`` distinguishes the failure."""

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


class ValidationError(ValueError):
    """Invalid dataset contents (manifest, detections, annotations)."""

    def __init__(self, issues):
        if isinstance(issues, str):
            issues = [issues]
        self.issues = list(issues)
        super().__init__("; ".join(self.issues))


# ---------------------------------------------------------------------------
# Binary feature tensor container (also used for descriptors with h=w=1)


def save_feature_map(fmap: FeatureMap, path) -> None:
    path = Path(path)
    w, h = fmap.source_image_dims
    payload = np.ascontiguousarray(fmap.values, dtype="<f4").tobytes()
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(bytes([FORMAT_VERSION]))
        f.write(_HEADER.pack(fmap.height_f, fmap.width_f, fmap.channels, w, h))
        f.write(payload)


def load_feature_map(path) -> FeatureMap:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < len(FEATURE_MAGIC) + 1 + _HEADER.size:
        raise TensorFormatError("truncated-payload", f"{path} is shorter than the header")
    if blob[: len(FEATURE_MAGIC)] != FEATURE_MAGIC:
        raise TensorFormatError("bad-magic", f"{path} does not start with {FEATURE_MAGIC!r}")
    version = blob[len(FEATURE_MAGIC)]
    if version != FORMAT_VERSION:
        raise TensorFormatError("bad-version", f"{path} has unsupported version {version}")
    off = len(FEATURE_MAGIC) + 1
    height, width, channels, src_w, src_h = _HEADER.unpack_from(blob, off)
    if min(height, width, channels) < 1 or min(src_w, src_h) < 1:
        raise TensorFormatError(
            "invalid-dims", f"{path} declares dims {(height, width, channels, src_w, src_h)}"
        )
    off += _HEADER.size
    expected = height * width * channels * 4
    if len(blob) - off != expected:
        raise TensorFormatError(
            "truncated-payload",
            f"{path} payload is {len(blob) - off} bytes, expected {expected}",
        )
    values = np.frombuffer(blob, dtype="<f4", count=height * width * channels, offset=off)
    values = values.reshape(height, width, channels)
    if not np.isfinite(values).all():
        raise TensorFormatError("nan-payload", f"{path} contains non-finite values")
    return FeatureMap(values, (src_w, src_h))


def save_descriptor(values, path, source_image_dims: tuple[int, int] = (1, 1)) -> None:
    """Store a descriptor vector as a 1x1xC feature tensor."""
    vec = np.asarray(values, dtype=np.float64).reshape(1, 1, -1)
    save_feature_map(FeatureMap(vec, source_image_dims), path)


def load_descriptor(path) -> np.ndarray:
    fmap = load_feature_map(path)
    if fmap.height_f != 1 or fmap.width_f != 1:
        raise TensorFormatError(
            "invalid-dims", f"{path} is {fmap.height_f}x{fmap.width_f}, descriptors must be 1x1"
        )
    return fmap.values.reshape(-1).astype(np.float64)


# ---------------------------------------------------------------------------
# Detections and annotations (JSON, keyed by frame id)


@dataclass
class Detection:
    """Pixel-space box with the raw detector confidence."""

    box: tuple[float, float, float, float]  # x_min, y_min, x_max, y_max
    detector_score: float
    clamped: bool = False


def _load_json(path, kind: str) -> dict:
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except FileNotFoundError:
        raise ValidationError(f"{kind} file missing: {path}")
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{kind} file {path} is not valid JSON: {exc}")
    if not isinstance(data, dict) or "frames" not in data or not isinstance(data["frames"], dict):
        raise ValidationError(f"{kind} file {path} must be an object with a 'frames' map")
    return data


def _write_json(path, data: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write("\n")


def _clamp_box(raw_box, image_dims, where: str) -> tuple[tuple[float, float, float, float], bool]:
    if len(raw_box) != 4:
        raise ValidationError(f"{where}: box must have 4 coordinates, got {raw_box}")
    x0, y0, x1, y1 = (float(v) for v in raw_box)
    if not all(np.isfinite([x0, y0, x1, y1])):
        raise ValidationError(f"{where}: non-finite box coordinates {raw_box}")
    if x0 >= x1 or y0 >= y1:
        raise ValidationError(f"{where}: box has no area: {raw_box}")
    w, h = image_dims
    cx0, cy0 = max(x0, 0.0), max(y0, 0.0)
    cx1, cy1 = min(x1, float(w)), min(y1, float(h))
    if cx0 >= cx1 or cy0 >= cy1:
        raise ValidationError(f"{where}: box {raw_box} lies fully outside the {w}x{h} image")
    clamped = (cx0, cy0, cx1, cy1) != (x0, y0, x1, y1)
    return (cx0, cy0, cx1, cy1), clamped


def load_detections(path, image_dims: tuple[int, int]) -> dict[str, list[Detection]]:
    """Load a detections file; partially-out-of-bounds boxes are clamped and
    flagged, fully-outside or degenerate boxes are rejected."""
    data = _load_json(path, "detections")
    frames: dict[str, list[Detection]] = {}
    for frame_id, entries in data["frames"].items():
        dets = []
        for i, entry in enumerate(entries):
            where = f"detections {path} frame {frame_id} entry {i}"
            box, clamped = _clamp_box(entry["box"], image_dims, where)
            score = float(entry["detector_score"])
            if not (0.0 <= score <= 1.0):
                raise ValidationError(f"{where}: detector_score {score} outside [0, 1]")
            dets.append(Detection(box=box, detector_score=score, clamped=clamped))
        frames[frame_id] = dets
    return frames


def save_detections(frames: dict[str, list], path) -> None:
    """Write detections; entries may be Detection objects or dicts carrying
    extra fields (e.g. refined scores), which round-trip untouched."""
    out = {}
    for frame_id, entries in frames.items():
        rows = []
        for entry in entries:
            if isinstance(entry, Detection):
                rows.append({"box": list(entry.box), "detector_score": entry.detector_score})
            else:
                row = dict(entry)
                row["box"] = list(row["box"])
                rows.append(row)
        out[frame_id] = rows
    _write_json(path, {"format": "mapsieve-detections", "version": 1, "frames": out})


def load_annotations(path, image_dims: tuple[int, int]) -> dict[str, np.ndarray]:
    """Load per-frame vehicle-centroid annotations as (N, 2) float arrays."""
    data = _load_json(path, "annotations")
    w, h = image_dims
    frames: dict[str, np.ndarray] = {}
    for frame_id, entries in data["frames"].items():
        pts = []
        for i, entry in enumerate(entries):
            x, y = float(entry["x_px"]), float(entry["y_px"])
            if not (0.0 <= x <= w and 0.0 <= y <= h):
                raise ValidationError(
                    f"annotations {path} frame {frame_id} point {i}: ({x}, {y}) "
                    f"outside the {w}x{h} image"
                )
            pts.append((x, y))
        frames[frame_id] = np.array(pts, dtype=np.float64).reshape(-1, 2)
    return frames


def save_annotations(frames: dict[str, np.ndarray], path) -> None:
    out = {
        frame_id: [{"x_px": float(x), "y_px": float(y)} for x, y in np.asarray(pts).reshape(-1, 2)]
        for frame_id, pts in frames.items()
    }
    _write_json(path, {"format": "mapsieve-annotations", "version": 1, "frames": out})


# ---------------------------------------------------------------------------
# Traverse manifest


@dataclass
class ReferenceFrame:
    frame_id: str
    feature_path: Path
    submap_id: str
    descriptor_path: Path | None = None


@dataclass
class QueryFrame:
    frame_id: str
    feature_path: Path
    submap_id: str
    detections_path: Path
    annotations_path: Path
    descriptor_path: Path | None = None
    pinned_reference_id: str | None = None


@dataclass
class TraverseManifest:
    """Pairing of a query traverse with its reference map database."""

    image_dims: tuple[int, int]
    reference_frames: list[ReferenceFrame]
    query_frames: list[QueryFrame]
    metadata: dict[str, str] = field(default_factory=dict)
    path: Path | None = None

    def reference_by_id(self) -> dict[str, ReferenceFrame]:
        return {r.frame_id: r for r in self.reference_frames}


def _manifest_path(base: Path, rel: str) -> Path:
    p = Path(rel)
    return p if p.is_absolute() else base / p


def load_manifest(path) -> TraverseManifest:
    """Parse a manifest without cross-checking referenced files."""
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except FileNotFoundError:
        raise ValidationError(f"manifest missing: {path}")
    except json.JSONDecodeError as exc:
        raise ValidationError(f"manifest {path} is not valid JSON: {exc}")
    base = path.parent
    try:
        dims = data["image_dims"]
        image_dims = (int(dims[0]), int(dims[1]))
        refs = [
            ReferenceFrame(
                frame_id=str(r["frame_id"]),
                feature_path=_manifest_path(base, r["feature_path"]),
                descriptor_path=(
                    _manifest_path(base, r["descriptor_path"]) if r.get("descriptor_path") else None
                ),
                submap_id=str(r["submap_id"]),
            )
            for r in data["reference_frames"]
        ]
        queries = [
            QueryFrame(
                frame_id=str(q["frame_id"]),
                feature_path=_manifest_path(base, q["feature_path"]),
                descriptor_path=(
                    _manifest_path(base, q["descriptor_path"]) if q.get("descriptor_path") else None
                ),
                submap_id=str(q["submap_id"]),
                detections_path=_manifest_path(base, q["detections_path"]),
                annotations_path=_manifest_path(base, q["annotations_path"]),
                pinned_reference_id=(
                    str(q["pinned_reference_id"]) if q.get("pinned_reference_id") else None
                ),
            )
            for q in data["query_frames"]
        ]
    except (KeyError, TypeError, IndexError) as exc:
        raise ValidationError(f"manifest {path} is missing required fields: {exc!r}")
    metadata = {str(k): str(v) for k, v in data.get("metadata", {}).items()}
    if image_dims[0] <= 0 or image_dims[1] <= 0:
        raise ValidationError(f"manifest {path}: image_dims must be positive, got {image_dims}")
    return TraverseManifest(
        image_dims=image_dims,
        reference_frames=refs,
        query_frames=queries,
        metadata=metadata,
        path=path,
    )


def save_manifest(manifest: TraverseManifest, path) -> None:
    """Write a manifest with paths stored relative to its directory when possible."""
    path = Path(path)
    base = path.parent

    def rel(p: Path | None):
        if p is None:
            return None
        p = Path(p)
        try:
            return p.relative_to(base).as_posix()
        except ValueError:
            return str(p)

    data = {
        "format": "mapsieve-manifest",
        "version": 1,
        "image_dims": list(manifest.image_dims),
        "metadata": dict(sorted(manifest.metadata.items())),
        "reference_frames": [
            {
                "frame_id": r.frame_id,
                "feature_path": rel(r.feature_path),
                "descriptor_path": rel(r.descriptor_path),
                "submap_id": r.submap_id,
            }
            for r in manifest.reference_frames
        ],
        "query_frames": [
            {
                "frame_id": q.frame_id,
                "feature_path": rel(q.feature_path),
                "descriptor_path": rel(q.descriptor_path),
                "submap_id": q.submap_id,
                "detections_path": rel(q.detections_path),
                "annotations_path": rel(q.annotations_path),
                "pinned_reference_id": q.pinned_reference_id,
            }
            for q in manifest.query_frames
        ],
    }
    _write_json(path, data)


def validate_manifest(path) -> TraverseManifest:
    """Full validation: structure, uniqueness, submap coverage, and a parse
    of every referenced file.  Raises ValidationError listing every issue."""
    manifest = load_manifest(path)
    issues: list[str] = []

    ref_ids = [r.frame_id for r in manifest.reference_frames]
    for fid in sorted({f for f in ref_ids if ref_ids.count(f) > 1}):
        issues.append(f"duplicate reference frame_id: {fid}")
    query_ids = [q.frame_id for q in manifest.query_frames]
    for fid in sorted({f for f in query_ids if query_ids.count(f) > 1}):
        issues.append(f"duplicate query frame_id: {fid}")
    if not manifest.reference_frames:
        issues.append("manifest has no reference frames")
    if not manifest.query_frames:
        issues.append("manifest has no query frames")

    ref_submaps = {r.submap_id for r in manifest.reference_frames}
    known_refs = set(ref_ids)

    def check_tensor(p: Path, what: str, descriptor: bool):
        try:
            if descriptor:
                load_descriptor(p)
            else:
                load_feature_map(p)
        except (TensorFormatError, OSError) as exc:
            issues.append(f"{what}: {exc}")

    for r in manifest.reference_frames:
        if not r.feature_path.exists():
            issues.append(f"reference {r.frame_id}: missing feature file {r.feature_path}")
        else:
            check_tensor(r.feature_path, f"reference {r.frame_id} features", descriptor=False)
        if r.descriptor_path is not None:
            if not r.descriptor_path.exists():
                issues.append(f"reference {r.frame_id}: missing descriptor file {r.descriptor_path}")
            else:
                check_tensor(r.descriptor_path, f"reference {r.frame_id} descriptor", descriptor=True)

    # shared detections/annotations files are parsed once, not per query
    det_cache: dict = {}
    ann_cache: dict = {}
    for q in manifest.query_frames:
        if q.submap_id not in ref_submaps:
            issues.append(
                f"query {q.frame_id}: submap_id {q.submap_id!r} has no reference frames"
            )
        if q.pinned_reference_id is not None and q.pinned_reference_id not in known_refs:
            issues.append(
                f"query {q.frame_id}: pinned_reference_id {q.pinned_reference_id!r} is unknown"
            )
        if not q.feature_path.exists():
            issues.append(f"query {q.frame_id}: missing feature file {q.feature_path}")
        else:
            check_tensor(q.feature_path, f"query {q.frame_id} features", descriptor=False)
        if q.descriptor_path is not None:
            if not q.descriptor_path.exists():
                issues.append(f"query {q.frame_id}: missing descriptor file {q.descriptor_path}")
            else:
                check_tensor(q.descriptor_path, f"query {q.frame_id} descriptor", descriptor=True)
        if q.detections_path not in det_cache:
            try:
                det_cache[q.detections_path] = load_detections(
                    q.detections_path, manifest.image_dims
                )
            except ValidationError as exc:
                det_cache[q.detections_path] = exc
        dets = det_cache[q.detections_path]
        if isinstance(dets, ValidationError):
            issues.extend(f"query {q.frame_id}: {msg}" for msg in dets.issues)
        elif q.frame_id not in dets:
            issues.append(
                f"query {q.frame_id}: detections file {q.detections_path} has no entry "
                f"for this frame"
            )
        if q.annotations_path not in ann_cache:
            try:
                ann_cache[q.annotations_path] = load_annotations(
                    q.annotations_path, manifest.image_dims
                )
            except ValidationError as exc:
                ann_cache[q.annotations_path] = exc
        anns = ann_cache[q.annotations_path]
        if isinstance(anns, ValidationError):
            issues.extend(f"query {q.frame_id}: {msg}" for msg in anns.issues)
        elif q.frame_id not in anns:
            issues.append(
                f"query {q.frame_id}: annotations file {q.annotations_path} has no entry "
                f"for this frame"
            )

    if issues:
        raise ValidationError(issues)
    return manifest


# ---------------------------------------------------------------------------
# Model checkpoints


@dataclass
class Checkpoint:
    """Trained model plus the config echo and its best validation score."""

    model: ClassifierModel
    train_config: dict
    best_validation_f1: float
    best_epoch: int = 0


_PARAM_ORDER = ("w1", "b1", "w2", "b2", "w3", "b3")


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    model = ckpt.model
    header = {
        "dims": model.dims,
        "encoding_mode": model.encoding_mode,
        "gem_p": model.gem_p,
        "dropout_rate": model.dropout_rate,
        "train_config": ckpt.train_config,
        "best_validation_f1": ckpt.best_validation_f1,
        "best_epoch": ckpt.best_epoch,
        "params": [
            {"name": name, "shape": list(getattr(model, name).shape)} for name in _PARAM_ORDER
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(bytes([FORMAT_VERSION]))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for name in _PARAM_ORDER:
            # float64 so a load/save round trip reproduces forward outputs bit-exactly
            f.write(np.ascontiguousarray(getattr(model, name), dtype="<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < len(CHECKPOINT_MAGIC) + 5:
        raise TensorFormatError("truncated-payload", f"{path} is shorter than the header")
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise TensorFormatError("bad-magic", f"{path} does not start with {CHECKPOINT_MAGIC!r}")
    version = blob[len(CHECKPOINT_MAGIC)]
    if version != FORMAT_VERSION:
        raise TensorFormatError("bad-version", f"{path} has unsupported version {version}")
    off = len(CHECKPOINT_MAGIC) + 1
    (hlen,) = struct.unpack_from("<I", blob, off)
    off += 4
    if len(blob) < off + hlen:
        raise TensorFormatError("truncated-payload", f"{path} header is cut short")
    header = json.loads(blob[off : off + hlen].decode("utf-8"))
    off += hlen
    params = {}
    for spec in header["params"]:
        shape = tuple(int(s) for s in spec["shape"])
        count = int(np.prod(shape))
        end = off + count * 8
        if len(blob) < end:
            raise TensorFormatError("truncated-payload", f"{path} parameter payload is cut short")
        params[spec["name"]] = (
            np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(shape).copy()
        )
        off = end
    if off != len(blob):
        raise TensorFormatError("truncated-payload", f"{path} has {len(blob) - off} trailing bytes")
    if set(params) != set(_PARAM_ORDER):
        raise TensorFormatError("invalid-dims", f"{path} does not store the expected parameters")
    try:
        model = ClassifierModel(
            **params,
            encoding_mode=header["encoding_mode"],
            gem_p=float(header["gem_p"]),
            dropout_rate=float(header["dropout_rate"]),
        )
    except ValueError as exc:
        raise TensorFormatError("dim-chain-mismatch", f"{path}: {exc}")
    if model.dims != list(header["dims"]):
        raise TensorFormatError(
            "dim-chain-mismatch",
            f"{path}: declared dims {header['dims']} do not match stored weights {model.dims}",
        )
    return Checkpoint(
        model=model,
        train_config=header["train_config"],
        best_validation_f1=float(header["best_validation_f1"]),
        best_epoch=int(header.get("best_epoch", 0)),
    )
