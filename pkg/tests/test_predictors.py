"""Tests for segmenter and localizer predictors."""

import numpy as np
import pytest

from voxloc.heatmap import HeatmapSpec, TargetPoint, argmax_position, dice_score
from voxloc.predictors import (
    ConvNetLocalizer,
    ConvNetSpec,
    EchoLocalizer,
    IntensityBandSegmenter,
    InvalidModelError,
    Localizer,
    MarkerLocalizer,
    OracleLocalizer,
    OracleLocalizerConfig,
    Segmenter,
    TruthMaskSegmenter,
    apply_inverted_dropout,
    load_weights,
    oracle_localize,
    save_weights,
    synthetic_segment,
)
from voxloc.transforms import RigidTransform, rigid_apply
from voxloc.volume import Volume3, flip_lr


def blank(dims=(32, 32, 32), spacing=(1.0, 1.0, 1.0)):
    return Volume3(np.zeros(dims), spacing)


def bump_volume(center, dims=(40, 40, 40), amplitude=0.9, floor=0.1):
    spec = HeatmapSpec(sigma_mm=2.0, cutoff=0.01, peak=amplitude)
    from voxloc.heatmap import gaussian_heatmap

    h = gaussian_heatmap(spec, TargetPoint(center), dims, (1.0, 1.0, 1.0))
    return Volume3(h.data + floor, h.spacing)


def ellipsoid_mask(dims, center, semi_axes):
    grids = np.meshgrid(*(np.arange(d, dtype=np.float64) for d in dims), indexing="ij")
    rho = sum(((g - c) / a) ** 2 for g, c, a in zip(grids, center, semi_axes))
    return rho <= 1.0


class TestDropout:
    def test_mean_preserved(self):
        # E[inverted dropout(x)] == x; check the sample mean on a big block
        rng = np.random.default_rng(7)
        x = np.ones((40, 40, 40))
        out = apply_inverted_dropout(x, 0.5, rng)
        assert abs(out.mean() - 1.0) < 0.03

    def test_mean_preserved_low_rate(self):
        rng = np.random.default_rng(11)
        x = np.full((40, 40, 40), 3.0)
        out = apply_inverted_dropout(x, 0.2, rng)
        assert abs(out.mean() - 3.0) < 0.09

    def test_survivors_scaled(self):
        rng = np.random.default_rng(3)
        out = apply_inverted_dropout(np.ones(10_000), 0.5, rng)
        values = np.unique(out)
        assert set(values.tolist()) == {0.0, 2.0}

    def test_drop_fraction(self):
        rng = np.random.default_rng(5)
        out = apply_inverted_dropout(np.ones(100_000), 0.5, rng)
        frac = float((out == 0.0).mean())
        assert abs(frac - 0.5) < 0.01


class TestConvNetSpec:
    def test_default_layout(self):
        spec = ConvNetSpec()
        assert spec.channels == (8, 16, 16, 8, 1)
        assert spec.layer_shapes[0] == ((8, 1, 3, 3, 3), (8,))
        assert spec.layer_shapes[-1] == ((1, 8, 3, 3, 3), (1,))

    def test_default_dropout_is_deepest_half_of_hidden(self):
        # 4 hidden layers -> dropout on the two nearest the output
        assert ConvNetSpec().dropout_layers == (2, 3)
        assert ConvNetSpec(channels=(4, 4, 4, 1)).dropout_layers == (2,)

    def test_rejects_bad_layouts(self):
        with pytest.raises(ValueError):
            ConvNetSpec(channels=(8, 2))
        with pytest.raises(ValueError):
            ConvNetSpec(kernel_size=2)
        with pytest.raises(ValueError):
            ConvNetSpec(dropout_rate=1.0)
        with pytest.raises(ValueError):
            ConvNetSpec(channels=(4, 1), dropout_layers=(5,))


class TestConvNetForward:
    def test_matches_direct_convolution(self):
        # independent zero-padded shifted-window implementation
        def direct(x, w, b):
            k = w.shape[-1]
            r = k // 2
            nx, ny, nz = x.shape[1:]
            xp = np.pad(x, ((0, 0), (r, r), (r, r), (r, r)))
            out = np.zeros((w.shape[0], nx, ny, nz))
            for o in range(w.shape[0]):
                for i in range(x.shape[0]):
                    for a in range(k):
                        for bb in range(k):
                            for c in range(k):
                                out[o] += w[o, i, a, bb, c] * xp[i, a : a + nx, bb : bb + ny, c : c + nz]
                out[o] += b[o]
            return out

        spec = ConvNetSpec(channels=(2, 1), dropout_rate=0.0, dropout_layers=())
        net = ConvNetLocalizer.from_seed(spec, seed=9)
        rng = np.random.default_rng(1)
        v = Volume3(rng.random((6, 5, 4)), (1.0, 1.0, 1.0))

        x = v.data[None]
        (w0, b0), (w1, b1) = net.weights
        hidden = np.maximum(direct(x, w0, b0), 0.0)
        logits = direct(hidden, w1, b1)
        expected = 1.0 / (1.0 + np.exp(-logits[0]))

        out = net.predict(v)
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_output_in_unit_interval(self):
        net = ConvNetLocalizer.from_seed(ConvNetSpec(channels=(4, 4, 1)), seed=2)
        rng = np.random.default_rng(0)
        out = net.predict(Volume3(rng.random((10, 10, 10)), (1.0, 1.0, 1.0)))
        assert out.data.min() >= 0.0 and out.data.max() <= 1.0
        assert out.dims == (10, 10, 10)

    def test_deterministic_pass_ignores_seed(self):
        net = ConvNetLocalizer.from_seed(ConvNetSpec(channels=(4, 4, 1)), seed=2)
        v = Volume3(np.random.default_rng(4).random((8, 8, 8)), (1.0, 1.0, 1.0))
        a = net.predict(v, stochastic=False, seed=1)
        b = net.predict(v, stochastic=False, seed=99)
        np.testing.assert_array_equal(a.data, b.data)

    def test_stochastic_pass_seed_contract(self):
        net = ConvNetLocalizer.from_seed(ConvNetSpec(channels=(4, 4, 1)), seed=2)
        v = Volume3(np.random.default_rng(4).random((8, 8, 8)), (1.0, 1.0, 1.0))
        a = net.predict(v, stochastic=True, seed=5)
        b = net.predict(v, stochastic=True, seed=5)
        c = net.predict(v, stochastic=True, seed=6)
        np.testing.assert_array_equal(a.data, b.data)
        assert np.abs(a.data - c.data).max() > 0.0

    def test_same_init_seed_same_weights(self):
        spec = ConvNetSpec(channels=(4, 4, 1))
        n1 = ConvNetLocalizer.from_seed(spec, seed=3)
        n2 = ConvNetLocalizer.from_seed(spec, seed=3)
        for (w1, b1), (w2, b2) in zip(n1.weights, n2.weights):
            np.testing.assert_array_equal(w1, w2)
            np.testing.assert_array_equal(b1, b2)

    def test_satisfies_localizer_protocol(self):
        net = ConvNetLocalizer.from_seed(ConvNetSpec(channels=(2, 1)), seed=0)
        assert isinstance(net, Localizer)
        assert isinstance(EchoLocalizer(), Localizer)


class TestWeightFiles:
    def test_roundtrip_preserves_predictions(self, tmp_path):
        spec = ConvNetSpec(channels=(4, 4, 1))
        net = ConvNetLocalizer.from_seed(spec, seed=13)
        path = tmp_path / "weights.json"
        save_weights(net, path)
        loaded = ConvNetLocalizer.from_file(spec, path)
        v = Volume3(np.random.default_rng(8).random((7, 7, 7)), (1.0, 1.0, 1.0))
        a = net.predict(v)
        b = loaded.predict(v)
        # f32 storage rounds the weights, so reload the original through f32 too
        relaxed = ConvNetLocalizer(
            spec,
            [(w.astype("<f4").astype(np.float64), b_.astype("<f4").astype(np.float64)) for w, b_ in net.weights],
        )
        np.testing.assert_array_equal(b.data, relaxed.predict(v).data)
        np.testing.assert_allclose(a.data, b.data, atol=1e-5)

    def test_shape_mismatch_rejected(self, tmp_path):
        net = ConvNetLocalizer.from_seed(ConvNetSpec(channels=(4, 4, 1)), seed=0)
        path = tmp_path / "weights.json"
        save_weights(net, path)
        with pytest.raises(InvalidModelError, match="do not match"):
            ConvNetLocalizer.from_file(ConvNetSpec(channels=(8, 4, 1)), path)

    def test_truncated_payload_rejected(self, tmp_path):
        net = ConvNetLocalizer.from_seed(ConvNetSpec(channels=(2, 1)), seed=0)
        path = tmp_path / "weights.json"
        save_weights(net, path)
        raw = path.with_suffix(".raw")
        raw.write_bytes(raw.read_bytes()[:-8])
        with pytest.raises(InvalidModelError, match="length mismatch"):
            load_weights(path)

    def test_unsupported_dtype_rejected(self, tmp_path):
        net = ConvNetLocalizer.from_seed(ConvNetSpec(channels=(2, 1)), seed=0)
        path = tmp_path / "weights.json"
        save_weights(net, path)
        text = path.read_text().replace('"f32"', '"f64"')
        path.write_text(text)
        with pytest.raises(InvalidModelError, match="dtype"):
            load_weights(path)

    def test_layer_count_mismatch_rejected(self):
        spec = ConvNetSpec(channels=(2, 1))
        net = ConvNetLocalizer.from_seed(spec, seed=0)
        with pytest.raises(InvalidModelError, match="layers"):
            ConvNetLocalizer(spec, net.weights[:1] * 3)


class TestOracleLocalize:
    def test_clean_oracle_peaks_at_truth(self):
        cfg = OracleLocalizerConfig()
        truth = TargetPoint((12.0, 20.0, 8.0))
        h = oracle_localize(cfg, truth, blank())
        assert argmax_position(h).position == (12, 20, 8)
        assert h.data[12, 20, 8] == pytest.approx(1.0)

    def test_bias_shifts_peak(self):
        cfg = OracleLocalizerConfig(bias=(3.0, 0.0, -2.0))
        h = oracle_localize(cfg, TargetPoint((12.0, 20.0, 8.0)), blank())
        assert argmax_position(h).position == (15, 20, 6)

    def test_deterministic_mode_ignores_seed_and_jitter(self):
        cfg = OracleLocalizerConfig(jitter_std=5.0, failure_rate=0.5)
        truth = TargetPoint((16.0, 16.0, 16.0))
        a = oracle_localize(cfg, truth, blank(), stochastic=False, seed=1)
        b = oracle_localize(cfg, truth, blank(), stochastic=False, seed=42)
        np.testing.assert_array_equal(a.data, b.data)
        assert argmax_position(a).position == (16, 16, 16)

    def test_stochastic_seed_contract(self):
        cfg = OracleLocalizerConfig(jitter_std=1.0)
        truth = TargetPoint((16.0, 16.0, 16.0))
        a = oracle_localize(cfg, truth, blank(), stochastic=True, seed=3)
        b = oracle_localize(cfg, truth, blank(), stochastic=True, seed=3)
        c = oracle_localize(cfg, truth, blank(), stochastic=True, seed=4)
        np.testing.assert_array_equal(a.data, b.data)
        assert np.abs(a.data - c.data).max() > 0.0

    def test_jitter_statistics(self):
        # measured spread of argmax positions tracks the configured std
        cfg = OracleLocalizerConfig(jitter_std=0.8)
        truth = TargetPoint((24.0, 24.0, 24.0))
        v = blank((48, 48, 48))
        positions = np.array(
            [argmax_position(oracle_localize(cfg, truth, v, stochastic=True, seed=s)).position for s in range(300)],
            dtype=np.float64,
        )
        measured = positions.std(axis=0).mean()
        assert 0.6 * 0.8 <= measured <= 1.4 * 0.8
        assert np.abs(positions.mean(axis=0) - 24.0).max() < 0.25

    def test_failure_rate_statistics(self):
        cfg = OracleLocalizerConfig(failure_rate=0.4)
        truth = TargetPoint((24.0, 24.0, 24.0))
        v = blank((48, 48, 48))
        distances = np.array(
            [
                np.linalg.norm(argmax_position(oracle_localize(cfg, truth, v, stochastic=True, seed=s)).as_array - 24.0)
                for s in range(250)
            ]
        )
        far = distances > 8.0
        assert abs(far.mean() - 0.4) < 0.1
        # non-failing passes sit exactly on the truth (no jitter configured)
        assert np.all(distances[~far] == 0.0)
        assert np.all(distances[far] >= 48 / 3.0 - 1.0)

    def test_guaranteed_failure_is_deterministic_and_far(self):
        cfg = OracleLocalizerConfig(failure_rate=1.0)
        truth = TargetPoint((24.0, 24.0, 24.0))
        v = blank((48, 48, 48))
        a = oracle_localize(cfg, truth, v, stochastic=False, seed=0)
        b = oracle_localize(cfg, truth, v, stochastic=False, seed=9)
        np.testing.assert_array_equal(a.data, b.data)
        dist = np.linalg.norm(argmax_position(a).as_array - 24.0)
        assert dist >= 48 / 3.0 - 1.0

    def test_truth_outside_bounds_rejected(self):
        with pytest.raises(ValueError, match="outside"):
            oracle_localize(OracleLocalizerConfig(), TargetPoint((40.0, 1.0, 1.0)), blank())

    def test_config_validation(self):
        with pytest.raises(ValueError):
            OracleLocalizerConfig(jitter_std=-1.0)
        with pytest.raises(ValueError):
            OracleLocalizerConfig(failure_rate=1.5)

    def test_oracle_localizer_class_binds_truth(self):
        loc = OracleLocalizer(OracleLocalizerConfig(), TargetPoint((5.0, 6.0, 7.0)))
        assert isinstance(loc, Localizer)
        assert argmax_position(loc.predict(blank((16, 16, 16)))).position == (5, 6, 7)


class TestMarkerLocalizer:
    def test_detects_bump_subvoxel(self):
        v = bump_volume((17.4, 20.0, 11.6))
        loc = MarkerLocalizer(OracleLocalizerConfig())
        det = loc.detect(v)
        assert np.abs(det.as_array - np.array([17.4, 20.0, 11.6])).max() < 0.3

    def test_prediction_peaks_at_marker(self):
        v = bump_volume((17.0, 20.0, 11.0))
        loc = MarkerLocalizer(OracleLocalizerConfig())
        assert argmax_position(loc.predict(v)).position == (17, 20, 11)

    def test_equivariant_under_lr_flip(self):
        center = (14.0, 22.0, 18.0)
        v = bump_volume(center)
        loc = MarkerLocalizer(OracleLocalizerConfig())
        det = loc.detect(flip_lr(v)).as_array
        expected = np.array([v.dims[0] - 1 - center[0], center[1], center[2]])
        assert np.abs(det - expected).max() < 0.3

    def test_equivariant_under_translation(self):
        center = (17.0, 20.0, 12.0)
        v = bump_volume(center)
        tf = RigidTransform(axis=(0.0, 0.0, 1.0), angle_deg=0.0, translation=(4.0, -3.0, 5.0))
        moved = rigid_apply(tf, v, interpolation="trilinear")
        det = MarkerLocalizer(OracleLocalizerConfig()).detect(moved).as_array
        assert np.abs(det - (np.array(center) + np.array([4.0, -3.0, 5.0]))).max() < 0.35

    def test_flat_volume_falls_back_to_argmax(self):
        v = Volume3(np.zeros((8, 8, 8)), (1.0, 1.0, 1.0))
        det = MarkerLocalizer(OracleLocalizerConfig()).detect(v)
        assert det.position == (0.0, 0.0, 0.0)


class TestEchoLocalizer:
    def test_returns_input(self):
        rng = np.random.default_rng(0)
        v = Volume3(rng.random((6, 6, 6)), (1.0, 1.0, 1.0))
        out = EchoLocalizer().predict(v, stochastic=True, seed=123)
        np.testing.assert_array_equal(out.data, v.data)


class TestTruthMaskSegmenter:
    dims = (48, 48, 48)

    def make_masks(self, dims=None):
        dims = dims or self.dims
        scale = dims[0] / 48.0
        left = ellipsoid_mask(dims, (16 * scale, 24 * scale, 24 * scale), (6 * scale, 8 * scale, 7 * scale))
        right = ellipsoid_mask(dims, (32 * scale, 24 * scale, 24 * scale), (6 * scale, 8 * scale, 7 * scale))
        return left, right

    def seg_for(self, boundary_noise=False, seed=0):
        left, right = self.make_masks()
        sp = (1.0, 1.0, 1.0)
        return (
            TruthMaskSegmenter(Volume3(left.astype(float), sp), Volume3(right.astype(float), sp), boundary_noise=boundary_noise, seed=seed),
            left,
            right,
        )

    def test_probabilities_sum_to_one(self):
        seg, _, _ = self.seg_for()
        bg, l, r = seg.predict(blank(self.dims))
        np.testing.assert_allclose(bg.data + l.data + r.data, 1.0, atol=1e-12)
        for ch in (bg, l, r):
            assert ch.data.min() >= 0.0 and ch.data.max() <= 1.0

    def test_clean_argmax_recovers_masks_exactly(self):
        seg, left, right = self.seg_for()
        bg, l, r = seg.predict(blank(self.dims))
        stacked = np.stack([bg.data, l.data, r.data])
        labels = np.argmax(stacked, axis=0)
        np.testing.assert_array_equal(labels == 1, left)
        np.testing.assert_array_equal(labels == 2, right)

    def test_foreground_probability_above_half(self):
        seg, left, right = self.seg_for()
        _, l, r = seg.predict(blank(self.dims))
        assert l.data[left].min() >= 0.5
        assert r.data[right].min() >= 0.5

    def test_boundary_noise_keeps_high_overlap(self):
        seg, left, _ = self.seg_for(boundary_noise=True, seed=5)
        _, l, _ = seg.predict(blank(self.dims))
        noisy = l.data > 0.5
        score = dice_score(Volume3(noisy.astype(float), (1.0, 1.0, 1.0)), Volume3(left.astype(float), (1.0, 1.0, 1.0)))
        assert 0.8 <= score < 1.0

    def test_boundary_noise_is_deterministic_per_instance(self):
        seg, _, _ = self.seg_for(boundary_noise=True, seed=5)
        a = seg.predict(blank(self.dims))
        b = seg.predict(blank(self.dims))
        for va, vb in zip(a, b):
            np.testing.assert_array_equal(va.data, vb.data)
        seg2, _, _ = self.seg_for(boundary_noise=True, seed=6)
        c = seg2.predict(blank(self.dims))
        assert np.abs(a[1].data - c[1].data).max() > 0.0

    def test_masks_resampled_to_input_grid(self):
        # 96-grid masks consumed on a 48 grid: nearest sampling lands on even indices
        left96, right96 = self.make_masks((96, 96, 96))
        sp2 = (0.5, 0.5, 0.5)
        seg = TruthMaskSegmenter(Volume3(left96.astype(float), sp2), Volume3(right96.astype(float), sp2))
        _, l, r = seg.predict(blank(self.dims))
        np.testing.assert_array_equal(l.data > 0.5, left96[::2, ::2, ::2])
        np.testing.assert_array_equal(r.data > 0.5, right96[::2, ::2, ::2])

    def test_overlapping_masks_keep_valid_probabilities(self):
        sp = (1.0, 1.0, 1.0)
        m = np.zeros((8, 8, 8))
        m[2:6, 2:6, 2:6] = 1.0
        seg = TruthMaskSegmenter(Volume3(m, sp), Volume3(m, sp))
        bg, l, r = seg.predict(blank((8, 8, 8)))
        assert bg.data.min() >= 0.0
        np.testing.assert_allclose(bg.data + l.data + r.data, 1.0, atol=1e-12)
        assert l.data[3, 3, 3] == pytest.approx(r.data[3, 3, 3])

    def test_synthetic_segment_wrapper(self):
        left, right = self.make_masks()
        sp = (1.0, 1.0, 1.0)
        bg, l, r = synthetic_segment(blank(self.dims), Volume3(left.astype(float), sp), Volume3(right.astype(float), sp))
        assert isinstance(bg, Volume3)
        assert (l.data > 0.5).sum() == left.sum()

    def test_satisfies_segmenter_protocol(self):
        seg, _, _ = self.seg_for()
        assert isinstance(seg, Segmenter)
        assert isinstance(IntensityBandSegmenter(), Segmenter)


class TestIntensityBandSegmenter:
    def test_splits_band_at_midplane(self):
        data = np.zeros((16, 16, 16))
        data[4, 8, 8] = 0.6  # left half
        data[12, 8, 8] = 0.6  # right half
        data[8, 2, 2] = 0.95  # outside band
        seg = IntensityBandSegmenter()
        bg, l, r = seg.predict(Volume3(data, (1.0, 1.0, 1.0)))
        assert l.data[4, 8, 8] > 0.5 and r.data[4, 8, 8] < 0.5
        assert r.data[12, 8, 8] > 0.5 and l.data[12, 8, 8] < 0.5
        assert bg.data[8, 2, 2] > 0.5

    def test_rejects_empty_band(self):
        with pytest.raises(ValueError):
            IntensityBandSegmenter(band=(0.8, 0.2))
