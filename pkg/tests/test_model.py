"""Backbone forward/backward, joint training, and checkpoint serialization."""

import numpy as np
import pytest

from circleseg.contour import (
    CircleContour,
    DeformationHead,
    DeformationHeadConfig,
    contour_loss,
    deform_backward,
    deform_contour_train,
    sample_circle_vertices,
)
from circleseg.detection import (
    PROB_CLAMP,
    DetectionLossWeights,
    GaussianTargetConfig,
    GroundTruthCircle,
    detection_loss,
    focal_loss,
    offset_loss,
    radius_loss,
    render_center_heatmap,
)
from circleseg.errors import ShapeError, TrainingError
from circleseg.grid import Grid2D, finite_difference_check
from circleseg.layers import flatten_arrays, write_flat
from circleseg.model import (
    BackboneConfig,
    ToyBackbone,
    TrainConfig,
    TrainSample,
    calibrate_head,
    detect_circles,
    load_checkpoint,
    save_checkpoint,
    segment_instances,
    train,
)


def disk_image(size, cx, cy, r):
    """One bright disk on a dark background, a single channel."""
    ys, xs = np.mgrid[0:size, 0:size]
    inside = (xs + 0.5 - cx) ** 2 + (ys + 0.5 - cy) ** 2 <= r * r
    values = np.where(inside, 0.9, 0.1)
    return Grid2D(values[:, :, np.newaxis].astype(np.float64))


def tiny_sample(size=16, cx=8.0, cy=8.0, r=4.0):
    return TrainSample(
        image=disk_image(size, cx, cy, r),
        circles=(GroundTruthCircle(center_x=cx, center_y=cy, radius=r),),
    )


def tiny_models(size=16, width=4, seed=0, blocks=1):
    backbone = ToyBackbone(
        BackboneConfig(input_width=size, input_height=size, width=width, seed=seed)
    )
    head = DeformationHead(
        DeformationHeadConfig(
            feature_channels=width, width=width, blocks=blocks, kernel_half_width=1, seed=seed + 1
        )
    )
    return backbone, head


class TestBackboneConfig:
    @pytest.mark.parametrize(
        "downsample,expected",
        [
            (1, [1, 1, 1, 1]),
            (2, [2, 1, 1, 1]),
            (4, [2, 2, 1, 1]),
            (8, [2, 2, 2, 1]),
            (16, [2, 2, 2, 2]),
        ],
    )
    def test_stride_schedule(self, downsample, expected):
        cfg = BackboneConfig(input_width=32, input_height=32, downsample=downsample)
        assert cfg.strides() == expected

    @pytest.mark.parametrize("downsample", [3, 5, 32, 0])
    def test_unsupported_downsample_rejected(self, downsample):
        with pytest.raises(ValueError):
            BackboneConfig(input_width=32, input_height=32, downsample=downsample)

    def test_heatmap_prior_must_be_open_interval(self):
        with pytest.raises(ValueError):
            BackboneConfig(input_width=32, input_height=32, heatmap_prior=1.0)


class TestBackboneForward:
    def test_same_input_twice_bitwise_identical(self, rng):
        backbone, _ = tiny_models()
        image = Grid2D(rng.uniform(0, 1, size=(16, 16, 1)))
        a = backbone.forward(image)
        b = backbone.forward(image)
        for ga, gb in zip(a, b):
            np.testing.assert_array_equal(ga.values, gb.values)

    def test_heatmap_in_open_unit_interval(self, rng):
        backbone, _ = tiny_models()
        for _ in range(5):
            image = Grid2D(rng.uniform(0, 1, size=(16, 16, 1)))
            heat, _, _, _ = backbone.forward(image)
            assert np.all(heat.values > 0.0)
            assert np.all(heat.values < 1.0)

    def test_output_grids_are_input_over_downsample(self, rng):
        backbone = ToyBackbone(
            BackboneConfig(input_width=32, input_height=16, width=4, downsample=4, classes=2)
        )
        image = Grid2D(rng.uniform(0, 1, size=(16, 32, 1)))
        heat, offset, radius, feature = backbone.forward(image)
        assert heat.values.shape == (4, 8, 2)
        assert offset.values.shape == (4, 8, 2)
        assert radius.values.shape == (4, 8, 1)
        assert feature.values.shape == (4, 8, 4)

    def test_fresh_heatmap_equals_prior_everywhere(self):
        backbone = ToyBackbone(
            BackboneConfig(input_width=16, input_height=16, width=4, heatmap_prior=0.25)
        )
        # Solid zero input keeps every ReLU inactive, so only the heatmap
        # bias reaches the sigmoid.
        heat, _, _, _ = backbone.forward(Grid2D(np.zeros((16, 16, 1))))
        np.testing.assert_allclose(heat.values, 0.25, atol=1e-12)

    def test_dim_mismatch_rejected(self, rng):
        backbone, _ = tiny_models()
        with pytest.raises(ShapeError):
            backbone.forward(Grid2D(rng.uniform(0, 1, size=(8, 16, 1))))
        with pytest.raises(ShapeError):
            backbone.forward(Grid2D(rng.uniform(0, 1, size=(16, 16, 3))))


class TestJointGradient:
    def test_full_model_gradient_matches_finite_differences(self):
        """The exact training objective, differentiated end to end."""
        backbone, head = tiny_models(size=16, width=4, seed=7)
        sample = tiny_sample()
        cfg = TrainConfig(learning_rate=0.01, steps=1, vertex_count=8, contour_iterations=2)
        calibrate_head(backbone, head, [sample], cfg)

        spec = backbone.config.grid_spec()
        tgt_cfg = GaussianTargetConfig()
        weights = DetectionLossWeights()
        circles = list(sample.circles)
        target = render_center_heatmap(circles, spec, tgt_cfg)
        init = sample_circle_vertices(
            GroundTruthCircle(center_x=9.0, center_y=7.5, radius=3.4), 8
        )
        truth = sample_circle_vertices(circles[0], 8)

        params = backbone.params() + head.params()
        n_backbone = len(backbone.params())
        flat0 = flatten_arrays(params)

        def loss_fn(p):
            write_flat(p, params)
            (heat, offset, radius, feature), cache = backbone.forward_train(sample.image)
            clamped = np.clip(heat.values, PROB_CLAMP, 1.0 - PROB_CLAMP)
            l_heat, g_heat = focal_loss(Grid2D(clamped), target, tgt_cfg, len(circles))
            g_heat = np.where(heat.values == clamped, g_heat, 0.0)
            l_off, g_off = offset_loss(offset, circles, spec)
            l_rad, g_rad = radius_loss(radius, circles, spec)
            l_det = detection_loss(l_heat, l_rad, l_off, weights)

            trace = deform_contour_train(init, feature, head, 2, spec.downsample)
            l_ctr = 0.0
            g_rings = []
            for ring in trace.rings[1:]:
                l_iter, g_ring = contour_loss(CircleContour(ring), truth)
                l_ctr += l_iter
                g_rings.append(g_ring)
            g_maps, h_grads = deform_backward(trace, head, g_rings)

            b_grads = backbone.backward(
                cache,
                g_heat,
                g_off * weights.lambda_off,
                g_rad * weights.lambda_radius,
                g_maps,
            )
            return l_det + l_ctr, flatten_arrays(b_grads + h_grads)

        try:
            report = finite_difference_check(loss_fn, flat0)
        finally:
            write_flat(flat0, params)
        assert report.parameter_count == flat0.size
        assert report.max_relative_error < 1e-4, (
            f"worst parameter {report.worst_parameter_index} of {n_backbone} backbone arrays"
        )


class TestTrain:
    def quiet_cfg(self, **over):
        base = dict(
            learning_rate=1e-3,
            steps=20,
            batch_size=1,
            seed=3,
            vertex_count=8,
            contour_iterations=2,
            contours_per_step=1,
            jitter_center_px=0.0,
            jitter_radius_frac=0.0,
        )
        base.update(over)
        return TrainConfig(**base)

    def test_zero_steps_leaves_parameters_unchanged(self):
        backbone, head = tiny_models(seed=2)
        before = flatten_arrays(backbone.params() + head.params()).copy()
        result = train(backbone, head, [tiny_sample()], self.quiet_cfg(steps=0))
        after = flatten_arrays(backbone.params() + head.params())
        np.testing.assert_array_equal(before, after)
        assert result.steps == 0

    def test_fixed_seed_reproduces_trace_and_parameters(self):
        runs = []
        for _ in range(2):
            backbone, head = tiny_models(seed=4)
            result = train(
                backbone, head, [tiny_sample()], self.quiet_cfg(steps=10, learning_rate=0.01)
            )
            runs.append((result.loss_trace, flatten_arrays(backbone.params() + head.params())))
        np.testing.assert_array_equal(runs[0][0], runs[1][0])
        np.testing.assert_array_equal(runs[0][1], runs[1][1])

    def test_loss_trace_non_increasing_on_one_sample(self):
        # Zero jitter and a single sample make every step a deterministic
        # full-gradient step, so a small enough rate must descend. The L1
        # terms bounce once a component reaches its kink, which bounds how
        # long the window can run.
        backbone, head = tiny_models(seed=5)
        result = train(backbone, head, [tiny_sample()], self.quiet_cfg(learning_rate=1e-4, steps=25))
        diffs = np.diff(result.loss_trace)
        assert np.all(diffs <= 1e-9), f"worst increase {diffs.max()}"

    def test_final_loss_not_above_initial(self):
        backbone, head = tiny_models(seed=6)
        result = train(
            backbone, head, [tiny_sample()], self.quiet_cfg(steps=30, learning_rate=0.01)
        )
        assert result.loss_trace[-1] <= result.loss_trace[0]
        assert result.detection_trace.shape == result.loss_trace.shape
        assert result.contour_trace.shape == result.loss_trace.shape

    def test_divergence_raises_with_step_index(self):
        # Vertex positions feed the next deformation iteration, so once the
        # loop gain passes one the ring coordinates grow geometrically and go
        # non-finite. train must surface that as a training error naming the
        # step, not as a bare error from deep inside the forward pass.
        backbone = ToyBackbone(
            BackboneConfig(input_width=32, input_height=32, width=8, seed=1)
        )
        head = DeformationHead(
            DeformationHeadConfig(feature_channels=8, width=16, blocks=2, seed=2)
        )
        head.pred_w3[...] = np.random.default_rng(3).uniform(-0.5, 0.5, head.pred_w3.shape)
        sample = tiny_sample(size=32, cx=16.0, cy=16.0, r=8.0)
        cfg = TrainConfig(
            learning_rate=0.5,
            steps=40,
            batch_size=1,
            seed=3,
            vertex_count=32,
            contour_iterations=3,
            contours_per_step=2,
        )
        with np.errstate(all="ignore"):
            with pytest.raises(TrainingError) as excinfo:
                train(backbone, head, [sample], cfg)
        assert excinfo.value.step is not None
        assert 0 <= excinfo.value.step < 40

    def test_empty_dataset_rejected(self):
        backbone, head = tiny_models()
        with pytest.raises(ValueError):
            train(backbone, head, [], self.quiet_cfg())

    def test_two_sample_batches_average(self):
        samples = [tiny_sample(cx=7.0, cy=8.0, r=3.5), tiny_sample(cx=9.0, cy=8.5, r=4.5)]
        backbone, head = tiny_models(seed=8)
        result = train(
            backbone, head, samples, self.quiet_cfg(steps=10, batch_size=2, learning_rate=0.01)
        )
        assert result.steps == 10
        assert np.all(np.isfinite(result.loss_trace))


class TestInference:
    def test_fresh_model_detects_nothing_above_prior(self):
        # Prior-initialized heatmaps sit near 0.1, below the default 0.15
        # threshold, so an untrained model stays silent.
        backbone, head = tiny_models()
        sample = tiny_sample()
        assert detect_circles(backbone, sample.image, ct_score=0.15) == []
        assert segment_instances(backbone, head, sample.image, ct_score=0.15) == []

    def test_segment_instances_pairs_detection_with_ring(self):
        backbone, head = tiny_models(seed=9)
        sample = tiny_sample()
        # Trained briefly; detections may or may not clear the threshold,
        # but any returned pair must be consistent.
        train(
            backbone,
            head,
            [sample],
            TrainConfig(learning_rate=0.01, steps=40, vertex_count=8, contour_iterations=2, seed=9),
        )
        pairs = segment_instances(backbone, head, sample.image, ct_score=0.0, vertex_count=12)
        for det, contour in pairs:
            assert contour.vertices.shape == (12, 2)
            assert det.radius > 0


class TestCheckpoint:
    def test_round_trip_preserves_forward_bitwise(self, tmp_path, rng):
        backbone, head = tiny_models(seed=11)
        train(
            backbone,
            head,
            [tiny_sample()],
            TrainConfig(learning_rate=0.01, steps=5, vertex_count=8, contour_iterations=2),
        )
        path = tmp_path / "model.bin"
        save_checkpoint(path, backbone, head)
        loaded_backbone, loaded_head = load_checkpoint(path)

        image = Grid2D(rng.uniform(0, 1, size=(16, 16, 1)))
        a = backbone.forward(image)
        b = loaded_backbone.forward(image)
        for ga, gb in zip(a, b):
            np.testing.assert_array_equal(ga.values, gb.values)

        ring = sample_circle_vertices(
            GroundTruthCircle(center_x=8.0, center_y=8.0, radius=3.0), 8
        )
        feats = a[3]
        trace_a = deform_contour_train(ring, feats, head, 2, 4.0)
        trace_b = deform_contour_train(ring, feats, loaded_head, 2, 4.0)
        np.testing.assert_array_equal(trace_a.rings[-1], trace_b.rings[-1])

    def test_round_trip_preserves_parameters_and_norms(self, tmp_path):
        backbone, head = tiny_models(seed=12)
        calibrate_head(
            backbone,
            head,
            [tiny_sample()],
            TrainConfig(learning_rate=0.01, steps=1, vertex_count=8),
        )
        path = tmp_path / "model.bin"
        save_checkpoint(path, backbone, head)
        backbone2, head2 = load_checkpoint(path)
        a = flatten_arrays(backbone.params() + head.params() + head.norm_arrays())
        b = flatten_arrays(backbone2.params() + head2.params() + head2.norm_arrays())
        np.testing.assert_array_equal(a, b)

    def test_wrong_magic_rejected(self, tmp_path):
        path = tmp_path / "bogus.bin"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(ShapeError):
            load_checkpoint(path)

    def test_truncated_file_rejected(self, tmp_path):
        backbone, head = tiny_models(seed=13)
        path = tmp_path / "model.bin"
        save_checkpoint(path, backbone, head)
        data = path.read_bytes()
        clipped = tmp_path / "clipped.bin"
        clipped.write_bytes(data[: len(data) - 200])
        with pytest.raises((ShapeError, ValueError)):
            load_checkpoint(clipped)
