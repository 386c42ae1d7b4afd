import math

import numpy as np
import pytest

from mapsieve.dataset_io import Detection
from mapsieve.regions import (
    CandidateDetection,
    build_encoding,
    build_encodings,
    encoding_dim,
    extract_region_pair,
    filter_candidates,
    label_candidates,
    rescale_box,
)
from mapsieve.tensors import FeatureMap, GridBox


def det(box, score):
    return Detection(box=tuple(float(v) for v in box), detector_score=score)


def make_map(values, dims=(640, 480)):
    return FeatureMap(np.asarray(values, dtype=np.float32), dims)


class TestFilterCandidates:
    def test_area_threshold_arithmetic(self):
        # 1280x960 image: 0.08% of 1228800 px = 983.04 px^2
        dets = [det((0, 0, 30, 30), 0.9), det((0, 0, 32, 32), 0.9)]
        kept = filter_candidates(dets, (1280, 960), 0.1, 0.0008)
        assert [k.index for k in kept] == [1]

    def test_score_floor(self):
        dets = [det((0, 0, 100, 100), 0.05), det((0, 0, 100, 100), 0.1)]
        kept = filter_candidates(dets, (640, 480), 0.1, 0.0008)
        assert [k.index for k in kept] == [1]

    def test_empty_input(self):
        assert filter_candidates([], (640, 480)) == []

    def test_order_preserved_and_idempotent(self):
        dets = [det((0, 0, 100, 100), s) for s in (0.9, 0.2, 0.5, 0.05)]
        kept = filter_candidates(dets, (640, 480))
        assert [k.index for k in kept] == [0, 1, 2]
        again = filter_candidates(
            [det(k.box, k.detector_score) for k in kept], (640, 480)
        )
        assert [k.detector_score for k in again] == [k.detector_score for k in kept]


class TestRescaleBox:
    def test_exact_sixteenth_scale(self):
        assert rescale_box((160, 96, 320, 192), (640, 480), (40, 30)).tuple() == (10, 6, 20, 12)

    def test_one_pixel_wide_box(self):
        gbox = rescale_box((100.0, 50.0, 101.0, 120.0), (640, 480), (40, 30))
        assert gbox.x1 - gbox.x0 == 1
        assert gbox.x0 == math.floor(100.0 * 40 / 640)

    def test_boundary_box_stays_on_grid(self):
        gbox = rescale_box((639.0, 479.0, 640.0, 480.0), (640, 480), (40, 30))
        assert gbox.tuple() == (39, 29, 40, 30)

    def test_covers_every_intersected_cell(self):
        rng = np.random.default_rng(77)
        w_px, h_px, w_f, h_f = 613, 481, 37, 23  # awkward, non-divisible scales

        def cell_of(px, py):
            return (min(int(px * w_f / w_px), w_f - 1), min(int(py * h_f / h_px), h_f - 1))

        for _ in range(200):
            x0, y0 = rng.uniform(0, w_px - 2), rng.uniform(0, h_px - 2)
            x1 = rng.uniform(x0 + 0.5, min(x0 + 60, w_px))
            y1 = rng.uniform(y0 + 0.5, min(y0 + 60, h_px))
            gbox = rescale_box((x0, y0, x1, y1), (w_px, h_px), (w_f, h_f))
            # oracle: every integer pixel inside the box maps to a covered cell
            probes = [(x0, y0), (x1 - 1e-9, y1 - 1e-9)]
            probes += [
                (px, py)
                for px in range(math.ceil(x0), math.ceil(x1))
                for py in range(math.ceil(y0), math.ceil(y1))
            ]
            for px, py in probes:
                cell_x, cell_y = cell_of(px, py)
                assert gbox.x0 <= cell_x < gbox.x1
                assert gbox.y0 <= cell_y < gbox.y1


class TestExtractRegionPair:
    def test_identical_maps_give_identical_regions(self):
        rng = np.random.default_rng(1)
        vals = rng.normal(size=(6, 8, 4)).astype(np.float32)
        f_q, f_m = make_map(vals), make_map(vals.copy())
        r_q, r_m = extract_region_pair(f_q, f_m, GridBox(1, 2, 5, 6))
        np.testing.assert_array_equal(r_q.values, r_m.values)

    def test_full_grid_box(self):
        f_q = make_map(np.ones((6, 8, 4)))
        f_m = make_map(np.ones((6, 8, 4)) * 2)
        r_q, r_m = extract_region_pair(f_q, f_m, GridBox(0, 0, 8, 6))
        assert r_q.values.shape == (6, 8, 4)
        assert r_m.values.shape == (6, 8, 4)

    def test_channel_mismatch_rejected(self):
        f_q = make_map(np.ones((6, 8, 4)))
        f_m = make_map(np.ones((6, 8, 5)))
        with pytest.raises(ValueError, match="differ"):
            extract_region_pair(f_q, f_m, GridBox(0, 0, 2, 2))


class TestBuildEncoding:
    def setup_method(self):
        rng = np.random.default_rng(5)
        self.f_q = make_map(rng.uniform(0.1, 2.0, size=(8, 10, 6)))
        self.f_m = make_map(rng.uniform(0.1, 2.0, size=(8, 10, 6)))
        self.box = GridBox(2, 1, 7, 6)
        self.r_q, self.r_m = extract_region_pair(self.f_q, self.f_m, self.box)

    def test_disparity_of_identical_regions_is_zero(self):
        r_q, r_m = extract_region_pair(self.f_q, self.f_q, self.box)
        np.testing.assert_allclose(build_encoding(r_q, r_m, "disparity"), 0.0, atol=1e-12)

    def test_lengths_per_mode(self):
        assert build_encoding(self.r_q, self.r_m, "concat").shape == (12,)
        assert build_encoding(self.r_q, self.r_m, "disparity").shape == (6,)
        assert build_encoding(self.r_q, self.r_m, "query_only").shape == (6,)
        assert encoding_dim("concat", 6) == 12
        assert encoding_dim("query_only", 6) == 6

    def test_concat_of_constant_regions(self):
        f_a = make_map(np.full((4, 4, 3), 2.0))
        f_b = make_map(np.full((4, 4, 3), 5.0))
        enc = build_encoding(*extract_region_pair(f_a, f_b, GridBox(0, 0, 4, 4)), "concat")
        np.testing.assert_allclose(enc[:3], 2.0, rtol=1e-9)
        np.testing.assert_allclose(enc[3:], 5.0, rtol=1e-9)

    def test_query_only_ignores_map(self):
        enc1 = build_encoding(self.r_q, self.r_m, "query_only")
        rng = np.random.default_rng(99)
        noise_map = make_map(rng.uniform(0.1, 5.0, size=(8, 10, 6)))
        _, r_noise = extract_region_pair(self.f_q, noise_map, self.box)
        enc2 = build_encoding(self.r_q, r_noise, "query_only")
        np.testing.assert_array_equal(enc1, enc2)

    def test_swap_negates_disparity_and_swaps_concat(self):
        disp = build_encoding(self.r_q, self.r_m, "disparity")
        disp_swapped = build_encoding(self.r_m, self.r_q, "disparity")
        np.testing.assert_allclose(disp_swapped, -disp, atol=1e-12)
        cat = build_encoding(self.r_q, self.r_m, "concat")
        cat_swapped = build_encoding(self.r_m, self.r_q, "concat")
        np.testing.assert_array_equal(cat_swapped, np.concatenate([cat[6:], cat[:6]]))

    def test_batch_matches_single(self):
        boxes = np.array([[0, 0, 10, 8], [2, 1, 7, 6], [9, 7, 10, 8]])
        for mode in ("concat", "disparity", "query_only"):
            batch = build_encodings(self.f_q, self.f_m, boxes, mode)
            for row, (x0, y0, x1, y1) in zip(batch, boxes):
                r_q, r_m = extract_region_pair(self.f_q, self.f_m, GridBox(x0, y0, x1, y1))
                np.testing.assert_array_equal(row, build_encoding(r_q, r_m, mode))

    def test_unknown_mode_rejected(self):
        with pytest.raises(ValueError, match="mode"):
            build_encoding(self.r_q, self.r_m, "mean")


class TestLabelCandidates:
    def test_containment_rules(self):
        cands = [
            CandidateDetection(0, (10.0, 10.0, 50.0, 50.0), 0.9),
            CandidateDetection(1, (100.0, 100.0, 150.0, 150.0), 0.8),
        ]
        labeled = label_candidates(cands, np.array([[30.0, 30.0]]))
        assert [c.label for c in labeled] == [1, 0]

    def test_boundary_inclusive(self):
        cands = [CandidateDetection(0, (10.0, 10.0, 50.0, 50.0), 0.9)]
        labeled = label_candidates(cands, np.array([[50.0, 10.0]]))
        assert labeled[0].label == 1

    def test_overlapping_boxes_labeled_independently(self):
        cands = [
            CandidateDetection(0, (0.0, 0.0, 100.0, 100.0), 0.9),
            CandidateDetection(1, (20.0, 20.0, 80.0, 80.0), 0.8),
        ]
        labeled = label_candidates(cands, np.array([[50.0, 50.0]]))
        assert [c.label for c in labeled] == [1, 1]

    def test_no_centroids(self):
        cands = [CandidateDetection(0, (0.0, 0.0, 10.0, 10.0), 0.5)]
        assert label_candidates(cands, np.zeros((0, 2)))[0].label == 0
