"""Center-heatmap rendering, detection losses, peak extraction, and decode."""

import numpy as np
import pytest

from circleseg.detection import (
    DetectionCircle,
    DetectionLossWeights,
    GaussianTargetConfig,
    GroundTruthCircle,
    Peak,
    decode_circles,
    detection_loss,
    extract_peaks,
    focal_loss,
    offset_loss,
    radius_loss,
    render_center_heatmap,
    render_regression_targets,
)
from circleseg.errors import AnnotationError, DomainError
from circleseg.grid import Grid2D, GridSpec, finite_difference_check

SPEC_64 = GridSpec(input_width=64, input_height=64, downsample=4)
CFG = GaussianTargetConfig()


def random_scene(rng, spec, max_circles=5):
    """Circles with mutually distinct down-sampled cells (so peaks stay separable)."""
    n = int(rng.integers(1, max_circles + 1))
    circles = []
    cells = set()
    while len(circles) < n:
        r = float(rng.uniform(2.0, 10.0))
        cx = float(rng.uniform(r, spec.input_width - r))
        cy = float(rng.uniform(r, spec.input_height - r))
        cell = (int(cx / spec.downsample), int(cy / spec.downsample))
        if cell in cells:
            continue
        cells.add(cell)
        circles.append(GroundTruthCircle(cx, cy, r))
    return circles


class TestTypes:
    def test_detection_score_range_enforced(self):
        with pytest.raises(ValueError):
            DetectionCircle(1.0, 1.0, 2.0, score=1.5)

    def test_truth_radius_positive(self):
        with pytest.raises(ValueError):
            GroundTruthCircle(1.0, 1.0, 0.0)

    def test_loss_weights_non_negative(self):
        with pytest.raises(ValueError):
            DetectionLossWeights(lambda_radius=-0.1)

    def test_default_weights(self):
        w = DetectionLossWeights()
        assert (w.lambda_radius, w.lambda_off) == (0.1, 1.0)

    def test_sigma_policy_floor_and_scale(self):
        cfg = GaussianTargetConfig()
        assert cfg.sigma_for(0.5) == 1.0  # floor
        assert cfg.sigma_for(9.0) == pytest.approx(3.0)  # r_cells / 3


class TestRenderHeatmap:
    def test_peak_is_exactly_one_at_center_cell(self):
        # center 22,22 with R=4 -> cell (5,5)
        circles = [GroundTruthCircle(22.0, 22.0, 8.0)]
        heat = render_center_heatmap(circles, SPEC_64, CFG)
        assert heat.values[5, 5, 0] == 1.0

    def test_known_gaussian_falloff(self):
        # sigma 2 needs r_cells = 6 -> radius 24 px at R=4; value two cells
        # below the peak is exp(-4/8).
        circles = [GroundTruthCircle(22.0, 22.0, 24.0)]
        cfg = GaussianTargetConfig()
        assert cfg.sigma_for(6.0) == pytest.approx(2.0)
        heat = render_center_heatmap(circles, SPEC_64, cfg)
        assert heat.values[7, 5, 0] == pytest.approx(np.exp(-4.0 / 8.0), abs=1e-12)

    def test_empty_scene_all_zero(self):
        heat = render_center_heatmap([], SPEC_64, CFG)
        assert np.all(heat.values == 0.0)

    def test_overlap_resolved_by_elementwise_max(self):
        a = GroundTruthCircle(20.0, 20.0, 12.0)
        b = GroundTruthCircle(28.0, 20.0, 12.0)
        merged = render_center_heatmap([a, b], SPEC_64, CFG)
        only_a = render_center_heatmap([a], SPEC_64, CFG)
        only_b = render_center_heatmap([b], SPEC_64, CFG)
        np.testing.assert_array_equal(
            merged.values, np.maximum(only_a.values, only_b.values)
        )

    def test_values_in_unit_interval(self, rng):
        for _ in range(20):
            heat = render_center_heatmap(random_scene(rng, SPEC_64), SPEC_64, CFG)
            assert heat.values.min() >= 0.0
            assert heat.values.max() <= 1.0

    def test_center_outside_grid_rejected_at_render(self):
        circles = [GroundTruthCircle(90.0, 10.0, 2.0)]  # past the 64 px edge
        with pytest.raises(AnnotationError):
            render_center_heatmap(circles, SPEC_64, CFG)

    def test_class_channel_routing(self):
        spec = GridSpec(input_width=64, input_height=64, downsample=4, classes=2)
        circles = [GroundTruthCircle(22.0, 22.0, 8.0, category=1)]
        heat = render_center_heatmap(circles, spec, CFG)
        assert heat.values[5, 5, 1] == 1.0
        assert np.all(heat.values[:, :, 0] == 0.0)

    def test_category_beyond_classes_rejected(self):
        circles = [GroundTruthCircle(22.0, 22.0, 8.0, category=1)]
        with pytest.raises(AnnotationError):
            render_center_heatmap(circles, SPEC_64, CFG)


class TestFocalLoss:
    def test_perfect_prediction_approaches_zero(self):
        target = Grid2D(np.ones((1, 1)))
        pred = Grid2D(np.full((1, 1), 1.0 - 1e-9))
        loss, _ = focal_loss(pred, target, CFG, num_objects=1)
        assert loss == pytest.approx(0.0, abs=1e-15)

    def test_positive_branch_hand_value(self):
        # Y=1, pred 0.5, alpha=2: (1-0.5)^2 * ln 0.5 -> 0.25 ln 2
        target = Grid2D(np.ones((1, 1)))
        pred = Grid2D(np.full((1, 1), 0.5))
        loss, _ = focal_loss(pred, target, CFG, num_objects=1)
        assert loss == pytest.approx(0.25 * np.log(2.0), abs=1e-12)

    def test_negative_branch_hand_value(self):
        # Y=0, pred p, beta term is 1: loss = -(p^2 ln(1-p))
        p = 0.3
        target = Grid2D(np.zeros((1, 1)))
        pred = Grid2D(np.full((1, 1), p))
        loss, _ = focal_loss(pred, target, CFG, num_objects=1)
        assert loss == pytest.approx(-(p**2) * np.log(1.0 - p), abs=1e-12)

    def test_exact_zero_or_one_raises(self):
        target = Grid2D(np.ones((1, 1)))
        with pytest.raises(DomainError):
            focal_loss(Grid2D(np.ones((1, 1))), target, CFG, 1)
        with pytest.raises(DomainError):
            focal_loss(Grid2D(np.zeros((1, 1))), target, CFG, 1)

    def test_loss_non_negative(self, rng):
        for _ in range(20):
            target = render_center_heatmap(random_scene(rng, SPEC_64), SPEC_64, CFG)
            pred = Grid2D(rng.uniform(0.01, 0.99, size=target.values.shape))
            loss, _ = focal_loss(pred, target, CFG, num_objects=3)
            assert loss >= 0.0

    def test_gradient_matches_finite_differences(self, rng):
        target = np.zeros((4, 4))
        target[1, 2] = 1.0
        target[3, 0] = np.exp(-0.5)
        target_grid = Grid2D(target)
        base = rng.uniform(0.05, 0.95, size=16)

        def loss_fn(p):
            pred = Grid2D(p.reshape(4, 4))
            loss, grad = focal_loss(pred, target_grid, CFG, num_objects=2)
            return loss, grad.ravel()

        report = finite_difference_check(loss_fn, base)
        assert report.max_relative_error < 1e-4

    def test_grad_is_divided_by_num_objects(self, rng):
        target = Grid2D(np.zeros((3, 3)))
        pred = Grid2D(rng.uniform(0.2, 0.8, size=(3, 3)))
        l1, g1 = focal_loss(pred, target, CFG, num_objects=1)
        l4, g4 = focal_loss(pred, target, CFG, num_objects=4)
        assert l1 == pytest.approx(4.0 * l4)
        np.testing.assert_allclose(g1, 4.0 * g4)


class TestRegressionLosses:
    def test_offset_example_from_geometry(self):
        # True center 41.2 px with R=4 -> cell 10, remainder 0.3. A zero
        # prediction contributes exactly 0.3 to the x term.
        circles = [GroundTruthCircle(41.2, 40.0, 5.0)]
        pred = Grid2D(np.zeros((16, 16, 2)))
        loss, _ = offset_loss(pred, circles, SPEC_64)
        assert loss == pytest.approx(0.3, abs=1e-12)

    def test_offset_zero_when_exact(self):
        circles = [GroundTruthCircle(41.2, 46.8, 5.0)]
        offsets, _ = render_regression_targets(circles, SPEC_64)
        loss, grad = offset_loss(offsets, circles, SPEC_64)
        assert loss == 0.0
        assert np.all(grad == 0.0)

    def test_radius_simple_difference(self):
        circles = [GroundTruthCircle(40.0, 40.0, 12.0)]  # 3 cells at R=4
        pred = Grid2D(np.full((16, 16, 1), 3.5))
        loss, _ = radius_loss(pred, circles, SPEC_64)
        assert loss == pytest.approx(0.5, abs=1e-12)

    def test_radius_regressed_in_grid_units(self):
        circles = [GroundTruthCircle(40.0, 40.0, 8.0)]
        _, radius_map = render_regression_targets(circles, SPEC_64)
        assert radius_map.values[10, 10, 0] == pytest.approx(2.0)  # 8 px / R

    def test_mean_over_objects(self):
        circles = [
            GroundTruthCircle(10.0, 10.0, 4.0),
            GroundTruthCircle(50.0, 50.0, 8.0),
        ]
        pred = Grid2D(np.zeros((16, 16, 1)))
        loss, _ = radius_loss(pred, circles, SPEC_64)
        assert loss == pytest.approx((1.0 + 2.0) / 2.0)

    def test_offset_gradient_matches_finite_differences(self, rng):
        circles = random_scene(rng, SPEC_64, max_circles=4)
        base = rng.standard_normal(16 * 16 * 2)

        def loss_fn(p):
            loss, grad = offset_loss(Grid2D(p.reshape(16, 16, 2)), circles, SPEC_64)
            return loss, grad.ravel()

        report = finite_difference_check(loss_fn, base)
        assert report.max_relative_error < 1e-4

    def test_radius_gradient_matches_finite_differences(self, rng):
        circles = random_scene(rng, SPEC_64, max_circles=4)
        base = rng.standard_normal(16 * 16) + 3.0

        def loss_fn(p):
            loss, grad = radius_loss(Grid2D(p.reshape(16, 16, 1)), circles, SPEC_64)
            return loss, grad.ravel()

        report = finite_difference_check(loss_fn, base)
        assert report.max_relative_error < 1e-4

    def test_requires_at_least_one_circle(self):
        pred = Grid2D(np.zeros((16, 16, 2)))
        with pytest.raises(ValueError):
            offset_loss(pred, [], SPEC_64)


class TestDetectionLoss:
    def test_weighted_combination(self):
        # 1.0 + 0.1 * 2.0 + 1.0 * 0.5
        w = DetectionLossWeights()
        assert detection_loss(1.0, 2.0, 0.5, w) == pytest.approx(1.7)

    def test_zero_components(self):
        assert detection_loss(0.0, 0.0, 0.0, DetectionLossWeights()) == 0.0

    def test_zero_weights_leave_heatmap_term(self):
        w = DetectionLossWeights(lambda_radius=0.0, lambda_off=0.0)
        assert detection_loss(1.25, 9.0, 9.0, w) == 1.25

    def test_linearity_in_each_component(self, rng):
        w = DetectionLossWeights()
        a, b, c = rng.uniform(0.1, 2.0, size=3)
        base = detection_loss(a, b, c, w)
        assert detection_loss(2 * a, b, c, w) - base == pytest.approx(a)
        assert detection_loss(a, 2 * b, c, w) - base == pytest.approx(0.1 * b)
        assert detection_loss(a, b, 2 * c, w) - base == pytest.approx(c)


def extract_peaks_oracle(values, top_n, ct_score):
    """Brute-force scan: compare every cell against all existing neighbors."""
    h, w, c = values.shape
    found = []
    for ch in range(c):
        for y in range(h):
            for x in range(w):
                v = values[y, x, ch]
                is_peak = True
                for dy in (-1, 0, 1):
                    for dx in (-1, 0, 1):
                        if dx == 0 and dy == 0:
                            continue
                        ny, nx = y + dy, x + dx
                        if 0 <= ny < h and 0 <= nx < w and values[ny, nx, ch] > v:
                            is_peak = False
                if is_peak:
                    found.append(Peak(x, y, ch, float(v)))
    found.sort(key=lambda p: (-p.score, p.category, p.cell_y, p.cell_x))
    found = found[:top_n]
    return [p for p in found if p.score >= ct_score]


class TestExtractPeaks:
    def test_all_zero_heatmap_empty(self):
        heat = Grid2D(np.zeros((8, 8)))
        assert extract_peaks(heat, top_n=10, ct_score=0.15) == []

    def test_single_hot_cell(self):
        values = np.zeros((8, 8))
        values[3, 5] = 0.9
        peaks = extract_peaks(Grid2D(values), top_n=10, ct_score=0.15)
        assert peaks == [Peak(5, 3, 0, 0.9)]

    def test_two_peaks_ordered_by_score(self):
        values = np.zeros((5, 5))
        values[1, 1] = 0.8
        values[3, 3] = 0.6
        peaks = extract_peaks(Grid2D(values), top_n=10, ct_score=0.15)
        assert [(p.cell_x, p.cell_y) for p in peaks] == [(1, 1), (3, 3)]

    def test_truncation_happens_before_threshold(self):
        # Three peaks, top_n=2: the third-highest is cut by top_n even though
        # it clears ct_score.
        values = np.zeros((9, 9))
        values[1, 1] = 0.9
        values[4, 4] = 0.8
        values[7, 7] = 0.7
        peaks = extract_peaks(Grid2D(values), top_n=2, ct_score=0.5)
        assert [(p.cell_x, p.cell_y) for p in peaks] == [(1, 1), (4, 4)]

    def test_border_cells_compare_existing_neighbors_only(self):
        values = np.zeros((4, 4))
        values[0, 0] = 0.7  # corner peak with only 3 neighbors
        peaks = extract_peaks(Grid2D(values), top_n=5, ct_score=0.5)
        assert peaks[0].cell_x == 0 and peaks[0].cell_y == 0

    def test_matches_brute_force_oracle(self, rng):
        for trial in range(1000):
            h = int(rng.integers(2, 7))
            w = int(rng.integers(2, 7))
            c = int(rng.integers(1, 3))
            # quantized values make plateaus and ties common
            values = rng.integers(0, 5, size=(h, w, c)) / 4.0
            top_n = int(rng.integers(1, 8))
            ct = float(rng.uniform(0.0, 1.0))
            got = extract_peaks(Grid2D(values), top_n=top_n, ct_score=ct)
            want = extract_peaks_oracle(values, top_n, ct)
            assert got == want, f"trial {trial}"


class TestDecodeCircles:
    def test_pinned_arithmetic_example(self):
        offsets = Grid2D(np.zeros((16, 16, 2)))
        offsets.values[12, 10] = [0.3, 0.6]
        radius = Grid2D(np.zeros((16, 16, 1)))
        radius.values[12, 10, 0] = 5.2
        peaks = [Peak(10, 12, 0, 0.9)]
        (det,) = decode_circles(peaks, offsets, radius, SPEC_64)
        assert det.center_x == pytest.approx(41.2, abs=1e-12)
        assert det.center_y == pytest.approx(50.4, abs=1e-12)
        assert det.radius == pytest.approx(20.8, abs=1e-12)
        assert det.score == 0.9

    def test_identity_scaling_at_r1(self):
        spec = GridSpec(input_width=8, input_height=8, downsample=1)
        offsets = Grid2D(np.zeros((8, 8, 2)))
        radius = Grid2D(np.full((8, 8, 1), 2.0))
        (det,) = decode_circles([Peak(3, 4, 0, 0.5)], offsets, radius, spec)
        assert (det.center_x, det.center_y) == (3.0, 4.0)

    def test_non_positive_radius_discarded(self):
        offsets = Grid2D(np.zeros((16, 16, 2)))
        radius = Grid2D(np.zeros((16, 16, 1)))
        assert decode_circles([Peak(3, 3, 0, 0.5)], offsets, radius, SPEC_64) == []

    def test_round_trip_recovers_planted_circles(self, rng):
        # Criterion-2 property at unit-test scale: perfect maps decode back
        # to the planted scene essentially exactly.
        for _ in range(100):
            circles = random_scene(rng, SPEC_64)
            heat = render_center_heatmap(circles, SPEC_64, CFG)
            offsets, radius = render_regression_targets(circles, SPEC_64)
            peaks = extract_peaks(heat, top_n=100, ct_score=0.5)
            decoded = decode_circles(peaks, offsets, radius, SPEC_64)
            assert len(decoded) == len(circles)
            got = sorted((d.center_x, d.center_y, d.radius) for d in decoded)
            want = sorted((c.center_x, c.center_y, c.radius) for c in circles)
            for g, w in zip(got, want):
                assert abs(g[0] - w[0]) < 1e-9
                assert abs(g[1] - w[1]) < 1e-9
                assert abs(g[2] - w[2]) < 1e-9
