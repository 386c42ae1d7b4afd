import json

import numpy as np
import pytest

from mapsieve import dataset_io
from mapsieve.classifier import TrainConfig, init_model, train
from mapsieve.dataset_io import (
    Checkpoint,
    TensorFormatError,
    ValidationError,
    load_annotations,
    load_checkpoint,
    load_descriptor,
    load_detections,
    load_feature_map,
    save_annotations,
    save_checkpoint,
    save_descriptor,
    save_detections,
    save_feature_map,
    validate_manifest,
)
from mapsieve.tensors import FeatureMap


def random_map(seed=0, shape=(24, 32, 64), dims=(640, 480)):
    rng = np.random.default_rng(seed)
    return FeatureMap(rng.normal(size=shape).astype(np.float32), dims)


class TestFeatureTensorFile:
    def test_round_trip_identical(self, tmp_path):
        fmap = random_map()
        path = tmp_path / "m.fmap"
        save_feature_map(fmap, path)
        loaded = load_feature_map(path)
        np.testing.assert_array_equal(loaded.values, fmap.values)
        assert loaded.source_image_dims == fmap.source_image_dims
        # byte-exact on re-save
        save_feature_map(loaded, tmp_path / "m2.fmap")
        assert (tmp_path / "m.fmap").read_bytes() == (tmp_path / "m2.fmap").read_bytes()

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "m.fmap"
        save_feature_map(random_map(shape=(4, 4, 2)), path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-5])
        with pytest.raises(TensorFormatError) as err:
            load_feature_map(path)
        assert err.value.code == "truncated-payload"

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.fmap"
        save_feature_map(random_map(shape=(4, 4, 2)), path)
        blob = bytearray(path.read_bytes())
        blob[:4] = b"XXXX"
        path.write_bytes(bytes(blob))
        with pytest.raises(TensorFormatError) as err:
            load_feature_map(path)
        assert err.value.code == "bad-magic"

    def test_zero_channels_header(self, tmp_path):
        path = tmp_path / "m.fmap"
        save_feature_map(random_map(shape=(4, 4, 2)), path)
        blob = bytearray(path.read_bytes())
        # channels field sits after magic(4) + version(1) + height(4) + width(4)
        blob[13:17] = (0).to_bytes(4, "little")
        path.write_bytes(bytes(blob))
        with pytest.raises(TensorFormatError) as err:
            load_feature_map(path)
        assert err.value.code == "invalid-dims"

    def test_nan_payload(self, tmp_path):
        path = tmp_path / "m.fmap"
        save_feature_map(random_map(shape=(2, 2, 1)), path)
        blob = bytearray(path.read_bytes())
        blob[-4:] = np.array([np.nan], dtype="<f4").tobytes()
        path.write_bytes(bytes(blob))
        with pytest.raises(TensorFormatError) as err:
            load_feature_map(path)
        assert err.value.code == "nan-payload"

    def test_bad_version(self, tmp_path):
        path = tmp_path / "m.fmap"
        save_feature_map(random_map(shape=(2, 2, 1)), path)
        blob = bytearray(path.read_bytes())
        blob[4] = 99
        path.write_bytes(bytes(blob))
        with pytest.raises(TensorFormatError) as err:
            load_feature_map(path)
        assert err.value.code == "bad-version"

    def test_descriptor_round_trip(self, tmp_path):
        vec = np.linspace(-1, 1, 32)
        save_descriptor(vec, tmp_path / "d.desc", (640, 480))
        out = load_descriptor(tmp_path / "d.desc")
        np.testing.assert_allclose(out, vec.astype(np.float32))

    def test_descriptor_rejects_spatial_maps(self, tmp_path):
        save_feature_map(random_map(shape=(2, 2, 4)), tmp_path / "d.desc")
        with pytest.raises(TensorFormatError) as err:
            load_descriptor(tmp_path / "d.desc")
        assert err.value.code == "invalid-dims"


class TestDetectionsFile:
    def test_round_trip(self, tmp_path):
        frames = {
            "f0": [
                {"box": [10.0, 20.0, 50.0, 60.0], "detector_score": 0.7},
                {"box": [0.0, 0.0, 30.0, 30.0], "detector_score": 0.2},
            ]
        }
        save_detections(frames, tmp_path / "d.json")
        loaded = load_detections(tmp_path / "d.json", (640, 480))
        assert len(loaded["f0"]) == 2
        assert loaded["f0"][0].box == (10.0, 20.0, 50.0, 60.0)
        assert loaded["f0"][0].detector_score == 0.7
        assert not loaded["f0"][0].clamped

    def test_partial_overflow_clamped_and_flagged(self, tmp_path):
        save_detections(
            {"f0": [{"box": [-10.0, 5.0, 30.0, 500.0], "detector_score": 0.5}]},
            tmp_path / "d.json",
        )
        loaded = load_detections(tmp_path / "d.json", (640, 480))
        det = loaded["f0"][0]
        assert det.box == (0.0, 5.0, 30.0, 480.0)
        assert det.clamped

    def test_fully_outside_rejected(self, tmp_path):
        save_detections(
            {"f0": [{"box": [700.0, 10.0, 800.0, 90.0], "detector_score": 0.5}]},
            tmp_path / "d.json",
        )
        with pytest.raises(ValidationError, match="outside"):
            load_detections(tmp_path / "d.json", (640, 480))

    def test_bad_score_rejected(self, tmp_path):
        save_detections(
            {"f0": [{"box": [0.0, 0.0, 10.0, 10.0], "detector_score": 1.5}]}, tmp_path / "d.json"
        )
        with pytest.raises(ValidationError, match="detector_score"):
            load_detections(tmp_path / "d.json", (640, 480))

    def test_extra_fields_survive(self, tmp_path):
        save_detections(
            {
                "f0": [
                    {
                        "box": [0.0, 0.0, 10.0, 10.0],
                        "detector_score": 0.5,
                        "fused_score": 0.6,
                        "kept": True,
                    }
                ]
            },
            tmp_path / "d.json",
        )
        raw = json.loads((tmp_path / "d.json").read_text())
        assert raw["frames"]["f0"][0]["fused_score"] == 0.6
        loaded = load_detections(tmp_path / "d.json", (640, 480))
        assert loaded["f0"][0].detector_score == 0.5


class TestAnnotationsFile:
    def test_round_trip(self, tmp_path):
        frames = {"f0": np.array([[10.5, 20.5], [100.0, 200.0]]), "f1": np.zeros((0, 2))}
        save_annotations(frames, tmp_path / "a.json")
        loaded = load_annotations(tmp_path / "a.json", (640, 480))
        np.testing.assert_allclose(loaded["f0"], frames["f0"])
        assert loaded["f1"].shape == (0, 2)

    def test_out_of_bounds_rejected(self, tmp_path):
        save_annotations({"f0": np.array([[700.0, 10.0]])}, tmp_path / "a.json")
        with pytest.raises(ValidationError, match="outside"):
            load_annotations(tmp_path / "a.json", (640, 480))


class TestLosslessJsonRoundTrips:
    def test_detections_stable_under_reload(self, tmp_path):
        rng = np.random.default_rng(3)
        frames = {
            f"f{i}": [
                {
                    "box": [float(x), float(y), float(x + w), float(y + h)],
                    "detector_score": float(s),
                }
                for x, y, w, h, s in zip(
                    rng.uniform(0, 300, 5),
                    rng.uniform(0, 200, 5),
                    rng.uniform(5, 100, 5),
                    rng.uniform(5, 100, 5),
                    rng.random(5),
                )
            ]
            for i in range(3)
        }
        save_detections(frames, tmp_path / "a.json")
        loaded = load_detections(tmp_path / "a.json", (640, 480))
        save_detections(loaded, tmp_path / "b.json")
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

    def test_annotations_stable_under_reload(self, tmp_path):
        rng = np.random.default_rng(4)
        frames = {f"f{i}": rng.uniform(0, 400, size=(4, 2)) for i in range(3)}
        save_annotations(frames, tmp_path / "a.json")
        loaded = load_annotations(tmp_path / "a.json", (640, 480))
        save_annotations(loaded, tmp_path / "b.json")
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def write_minimal_dataset(tmp_path, *, break_submap=False, dup_ref=False, drop_file=False):
    """One reference and one query frame with all referenced files present."""
    fdir = tmp_path / "features"
    fdir.mkdir()
    save_feature_map(random_map(1, shape=(6, 8, 4)), fdir / "r0.fmap")
    save_feature_map(random_map(2, shape=(6, 8, 4)), fdir / "q0.fmap")
    save_detections(
        {"q0": [{"box": [10.0, 10.0, 200.0, 200.0], "detector_score": 0.9}]},
        tmp_path / "det.json",
    )
    save_annotations({"q0": np.array([[100.0, 100.0]])}, tmp_path / "ann.json")
    refs = [{"frame_id": "r0", "feature_path": "features/r0.fmap", "submap_id": "s0"}]
    if dup_ref:
        refs.append(dict(refs[0]))
    manifest = {
        "image_dims": [640, 480],
        "metadata": {"condition": "fixture"},
        "reference_frames": refs,
        "query_frames": [
            {
                "frame_id": "q0",
                "feature_path": "features/q0.fmap",
                "submap_id": "s9" if break_submap else "s0",
                "detections_path": "det.json",
                "annotations_path": "ann.json",
            }
        ],
    }
    if drop_file:
        (fdir / "q0.fmap").unlink()
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps(manifest))
    return path


class TestManifest:
    def test_well_formed_is_valid(self, tmp_path):
        manifest = validate_manifest(write_minimal_dataset(tmp_path))
        assert manifest.image_dims == (640, 480)
        assert manifest.query_frames[0].pinned_reference_id is None

    def test_unknown_submap_reported(self, tmp_path):
        with pytest.raises(ValidationError) as err:
            validate_manifest(write_minimal_dataset(tmp_path, break_submap=True))
        assert any("s9" in issue for issue in err.value.issues)

    def test_duplicate_reference_reported(self, tmp_path):
        with pytest.raises(ValidationError) as err:
            validate_manifest(write_minimal_dataset(tmp_path, dup_ref=True))
        assert any("duplicate reference" in issue for issue in err.value.issues)

    def test_missing_file_reported(self, tmp_path):
        with pytest.raises(ValidationError) as err:
            validate_manifest(write_minimal_dataset(tmp_path, drop_file=True))
        assert any("missing feature file" in issue for issue in err.value.issues)

    def test_validation_is_idempotent(self, tmp_path):
        path = write_minimal_dataset(tmp_path)
        before = path.read_bytes()
        validate_manifest(path)
        validate_manifest(path)
        assert path.read_bytes() == before


class TestCheckpoint:
    def test_round_trip_bit_identical_forward(self, tmp_path):
        model = init_model(8, 16, 4, seed=3, encoding_mode="disparity", gem_p=2.5)
        ckpt = Checkpoint(model=model, train_config={"seed": 3}, best_validation_f1=0.91)
        save_checkpoint(ckpt, tmp_path / "m.ckpt")
        loaded = load_checkpoint(tmp_path / "m.ckpt")
        assert loaded.model.encoding_mode == "disparity"
        assert loaded.model.gem_p == 2.5
        assert loaded.best_validation_f1 == 0.91
        rng = np.random.default_rng(0)
        probes = rng.normal(size=(10, 8))
        np.testing.assert_array_equal(loaded.model.predict(probes), model.predict(probes))

    def test_mismatched_bias_rejected(self, tmp_path):
        model = init_model(8, 16, 4, seed=3)
        save_checkpoint(Checkpoint(model, {}, 0.0), tmp_path / "m.ckpt")
        blob = bytearray((tmp_path / "m.ckpt").read_bytes())
        # shrink the declared b3 shape in the JSON header
        idx = blob.find(b'"name": "b3", "shape": [1]')
        assert idx > 0
        blob[idx : idx + len(b'"name": "b3", "shape": [1]')] = b'"name": "b3", "shape": [2]'
        (tmp_path / "bad.ckpt").write_bytes(bytes(blob))
        with pytest.raises(TensorFormatError):
            load_checkpoint(tmp_path / "bad.ckpt")

    def test_resume_training_deterministic(self, tmp_path):
        rng = np.random.default_rng(12)
        x = rng.normal(size=(64, 6))
        y = rng.integers(0, 2, size=64).astype(float)
        cfg = TrainConfig(max_epochs=3, patience_epochs=3, seed=5, batch_size=16, hidden1=8, hidden2=4)

        def validate(model):
            return float(np.mean((model.predict(x) >= 0.5) == (y == 1)))

        first = train((x, y), cfg, validate)
        save_checkpoint(Checkpoint(first.model, cfg.as_dict(), first.best_val_f1), tmp_path / "c.ckpt")

        def resume():
            loaded = load_checkpoint(tmp_path / "c.ckpt")
            cfg2 = TrainConfig(max_epochs=1, patience_epochs=1, seed=99, batch_size=16)
            return train((x, y), cfg2, validate, initial_model=loaded.model)

        a, b = resume(), resume()
        assert a.history[0].train_loss == b.history[0].train_loss
        for k in a.model.parameters():
            np.testing.assert_array_equal(a.model.parameters()[k], b.model.parameters()[k])
