"""Scene synthesis, degradation operators, and frequency diagnostics."""

import math

import numpy as np
import pytest

from ocsafpn import degrade as D
from ocsafpn.detection import RotatedBox, read_annotations, write_annotations


class TestStageRng:
    def test_same_key_same_stream(self):
        a = D.stage_rng(7, 3, D.NOISE_STAGE).random(16)
        b = D.stage_rng(7, 3, D.NOISE_STAGE).random(16)
        np.testing.assert_array_equal(a, b)

    @pytest.mark.parametrize("key", [(8, 3, 1), (7, 4, 1), (7, 3, 2)])
    def test_any_key_component_changes_stream(self, key):
        base = D.stage_rng(7, 3, 1).random(16)
        other = D.stage_rng(*key).random(16)
        assert not np.array_equal(base, other)


class TestDegradationSpec:
    def test_preset_registry_is_exactly_three(self):
        assert set(D.PRESETS.values()) == {(0.01, 1.0), (0.2, 0.5), (0.2, 1.0)}
        assert len(D.PRESETS) == 3

    @pytest.mark.parametrize("name", sorted(D.PRESETS))
    def test_preset_lookup(self, name):
        spec = D.DegradationSpec.preset(name, seed=11)
        assert (spec.n, spec.v) == D.PRESETS[name]
        assert spec.seed == 11 and spec.speckle_looks is None

    def test_unknown_preset(self):
        with pytest.raises(ValueError, match="unknown preset"):
            D.DegradationSpec.preset("n0.5_v9")

    @pytest.mark.parametrize("kw", [dict(n=-0.1), dict(v=-1.0),
                                    dict(speckle_looks=0),
                                    dict(noise_unit="16bit")])
    def test_validation(self, kw):
        with pytest.raises(ValueError):
            D.DegradationSpec(**kw)

    def test_noise_unit_scaling(self):
        assert D.DegradationSpec(n=0.2).effective_noise_std == 0.2
        assert D.DegradationSpec(n=51.0, noise_unit="8bit").effective_noise_std == 51.0 / 255.0


class TestSceneSpec:
    @pytest.mark.parametrize("kw", [
        dict(size=100), dict(size=0), dict(num_classes=0),
        dict(min_objects=0), dict(min_objects=5, max_objects=2),
        dict(min_size=2.0), dict(min_size=50.0, max_size=40.0),
        dict(max_size=90.0), dict(background_period=7), dict(grain=-0.1),
    ])
    def test_validation(self, kw):
        with pytest.raises(ValueError):
            D.SceneSpec(**kw)


class TestSynthScene:
    def test_deterministic(self):
        spec = D.SceneSpec(seed=21)
        img_a, gts_a = D.synth_scene(spec, image_id=4)
        img_b, gts_b = D.synth_scene(spec, image_id=4)
        np.testing.assert_array_equal(img_a, img_b)
        assert [(g.cx, g.cy, g.w, g.h, g.theta, g.class_id) for g in gts_a] \
            == [(g.cx, g.cy, g.w, g.h, g.theta, g.class_id) for g in gts_b]

    def test_image_id_changes_scene(self):
        spec = D.SceneSpec(seed=21)
        img_a, _ = D.synth_scene(spec, image_id=0)
        img_b, _ = D.synth_scene(spec, image_id=1)
        assert not np.array_equal(img_a, img_b)

    def test_image_contract(self):
        img, gts = D.synth_scene(D.SceneSpec(seed=3))
        assert img.shape == (3, 128, 128) and img.dtype == np.float64
        assert img.min() >= 0.0 and img.max() <= 1.0
        assert len(gts) >= 1

    @pytest.mark.parametrize("image_id", range(6))
    def test_annotations_inside_canvas(self, image_id):
        spec = D.SceneSpec(seed=9)
        _, gts = D.synth_scene(spec, image_id=image_id)
        for g in gts:
            assert 0 <= g.cx <= spec.size and 0 <= g.cy <= spec.size
            corners = g.corners()
            assert corners.min() >= 0 and corners.max() <= spec.size
            assert 0 <= g.class_id < spec.num_classes

    def test_meta_accounting(self):
        spec = D.SceneSpec(min_objects=20, max_objects=20, min_size=30.0,
                           max_size=40.0, seed=2)
        meta = {}
        _, gts = D.synth_scene(spec, meta=meta)
        assert meta["placed"] == len(gts)
        assert meta["placed"] + meta["skipped"] == 20
        assert meta["skipped"] > 0          # that many big objects cannot fit

    @pytest.mark.parametrize("box", [
        RotatedBox(60.0, 60.0, 30.0, 18.0, 0.0),
        RotatedBox(60.0, 60.0, 30.0, 18.0, 0.7),
        RotatedBox(50.5, 70.25, 22.0, 22.0, -1.2),
        RotatedBox(64.0, 64.0, 41.0, 7.0, 0.3),
    ])
    def test_rect_mask_area_matches_box_area(self, box):
        alpha, _, _ = D._shape_mask(box, "rect", 128)
        area = alpha.sum()
        assert abs(area - box.area()) / box.area() <= 0.03

    def test_ellipse_mask_area(self):
        box = RotatedBox(64.0, 64.0, 32.0, 20.0, 0.5)
        alpha, _, _ = D._shape_mask(box, "ellipse", 128)
        expect = math.pi / 4 * box.w * box.h
        assert abs(alpha.sum() - expect) / expect <= 0.03


class TestGaussianNoise:
    def test_zero_std_is_bitwise_identity(self):
        img = np.random.default_rng(0).random((3, 16, 16))
        out = D.gaussian_noise(img, 0.0, seed=5)
        np.testing.assert_array_equal(out, img)
        assert out is not img

    def test_sample_std(self):
        img = np.full((1024, 1024), 0.5)
        out = D.gaussian_noise(img, 0.01, seed=1)
        assert abs((out - img).std() - 0.01) / 0.01 <= 0.02

    def test_clamped(self):
        img = np.full((256, 256), 0.9)
        out = D.gaussian_noise(img, 0.5, seed=2)
        assert out.max() <= 1.0 and out.min() >= 0.0
        assert (out == 1.0).any()           # saturation actually occurred

    def test_deterministic_per_key(self):
        img = np.full((32, 32), 0.5)
        a = D.gaussian_noise(img, 0.1, seed=3, image_id=7)
        b = D.gaussian_noise(img, 0.1, seed=3, image_id=7)
        c = D.gaussian_noise(img, 0.1, seed=3, image_id=8)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_negative_std_rejected(self):
        with pytest.raises(ValueError):
            D.gaussian_noise(np.zeros((4, 4)), -0.1, seed=0)


class TestGaussianBlur:
    def test_zero_std_is_identity(self):
        img = np.random.default_rng(1).random((3, 12, 12))
        np.testing.assert_array_equal(D.gaussian_blur(img, 0.0), img)

    @pytest.mark.parametrize("c", [0.3, 1.0, 0.123456789])
    @pytest.mark.parametrize("v", [0.5, 1.0, 2.5])
    def test_constant_image_unchanged_bitwise(self, c, v):
        img = np.full((24, 24), c)
        np.testing.assert_array_equal(D.gaussian_blur(img, v), img)

    @pytest.mark.parametrize("v", [0.3, 0.5, 1.0, 1.7, 2.0, 3.0])
    def test_kernel_normalized(self, v):
        k = D.gaussian_kernel(v)
        assert len(k) == 2 * math.ceil(3 * v) + 1
        assert abs(k.sum() - 1.0) <= 1e-9

    def test_impulse_matches_closed_form(self):
        v = 1.0
        img = np.zeros((31, 31))
        img[15, 15] = 1.0
        out = D.gaussian_blur(img, v)
        k = D.gaussian_kernel(v)
        r = (len(k) - 1) // 2
        oracle = np.zeros_like(img)
        oracle[15 - r:15 + r + 1, 15 - r:15 + r + 1] = np.outer(k, k)
        assert np.abs(out - oracle).max() <= 1e-7

    def test_linear(self, rng):
        x, y = rng.random((24, 24)), rng.random((24, 24))
        lhs = D.gaussian_blur(0.7 * x + 1.3 * y, 1.5)
        rhs = 0.7 * D.gaussian_blur(x, 1.5) + 1.3 * D.gaussian_blur(y, 1.5)
        assert np.abs(lhs - rhs).max() <= 1e-9

    def test_matches_dense_2d_oracle(self, rng):
        img = rng.random((14, 17))
        v = 1.2
        k = D.gaussian_kernel(v)
        r = (len(k) - 1) // 2
        k2 = np.outer(k, k)
        pad = np.pad(img, r, mode="reflect")
        oracle = np.zeros_like(img)
        for i in range(img.shape[0]):
            for j in range(img.shape[1]):
                oracle[i, j] = (pad[i:i + 2 * r + 1, j:j + 2 * r + 1] * k2).sum()
        assert np.abs(D.gaussian_blur(img, v) - oracle).max() <= 1e-12

    def test_stack_equals_per_channel(self, rng):
        img = rng.random((3, 20, 20))
        whole = D.gaussian_blur(img, 1.0)
        for c in range(3):
            np.testing.assert_array_equal(whole[c], D.gaussian_blur(img[c], 1.0))

    def test_validation(self):
        with pytest.raises(ValueError):
            D.gaussian_blur(np.zeros((8, 8)), -1.0)
        with pytest.raises(ValueError, match="too small"):
            D.gaussian_blur(np.zeros((1, 8)), 1.0)


class TestSpeckle:
    def test_zero_image_stays_zero(self):
        out = D.speckle(np.zeros((3, 16, 16)), 4, seed=0)
        np.testing.assert_array_equal(out, np.zeros((3, 16, 16)))

    def test_multiplier_mean_near_one(self):
        rng = D.stage_rng(0, 0, D.SPECKLE_STAGE)
        field = D.speckle_field((1000, 1000), 4, rng)
        assert abs(field.mean() - 1.0) <= 0.01

    @pytest.mark.parametrize("looks", [1, 4, 16])
    def test_multiplier_variance(self, looks):
        rng = D.stage_rng(1, 0, D.SPECKLE_STAGE)
        field = D.speckle_field((1000, 1000), looks, rng)
        assert abs(field.var() - 1.0 / looks) / (1.0 / looks) <= 0.05

    def test_more_looks_less_variance(self):
        rng_a = D.stage_rng(2, 0, D.SPECKLE_STAGE)
        rng_b = D.stage_rng(2, 0, D.SPECKLE_STAGE)
        v1 = D.speckle_field((512, 512), 1, rng_a).var()
        v8 = D.speckle_field((512, 512), 8, rng_b).var()
        assert v8 < v1

    def test_field_shared_across_channels(self):
        img = np.full((3, 32, 32), 0.5)
        out = D.speckle(img, 50, seed=4)     # high looks: little clamping
        ratio = out / img
        np.testing.assert_array_equal(ratio[0], ratio[1])
        np.testing.assert_array_equal(ratio[0], ratio[2])

    def test_clamped_and_validated(self):
        out = D.speckle(np.full((64, 64), 0.9), 1, seed=6)
        assert out.max() <= 1.0
        with pytest.raises(ValueError):
            D.speckle(np.zeros((4, 4)), 0, seed=0)


class TestDegradePipeline:
    def test_blur_then_noise_order_witness(self):
        img, _ = D.synth_scene(D.SceneSpec(seed=5))
        spec = D.DegradationSpec(n=0.2, v=1.0, seed=13)
        pipeline = D.degrade_image(img, spec, image_id=0)
        swapped = D.gaussian_blur(
            D.gaussian_noise(img, 0.2, seed=13, image_id=0), 1.0)
        assert not np.array_equal(pipeline, swapped)

    def test_matches_manual_composition(self):
        img, _ = D.synth_scene(D.SceneSpec(seed=5))
        spec = D.DegradationSpec(n=0.01, v=1.0, seed=13)
        manual = D.gaussian_noise(D.gaussian_blur(img, 1.0), 0.01,
                                  seed=13, image_id=2)
        np.testing.assert_array_equal(D.degrade_image(img, spec, image_id=2), manual)

    def test_speckle_stage_appended(self):
        img, _ = D.synth_scene(D.SceneSpec(seed=5))
        plain = D.degrade_image(img, D.DegradationSpec(n=0.01, v=0.5, seed=1))
        with_sp = D.degrade_image(
            img, D.DegradationSpec(n=0.01, v=0.5, speckle_looks=4, seed=1))
        expect = D.speckle(plain, 4, seed=1, image_id=0)
        np.testing.assert_array_equal(with_sp, expect)

    def test_8bit_noise_unit(self):
        img = np.full((3, 32, 32), 0.5)
        spec = D.DegradationSpec(n=51.0, noise_unit="8bit", seed=3)
        out = D.degrade_image(img, spec)
        manual = D.gaussian_noise(img, 51.0 / 255.0, seed=3)
        np.testing.assert_array_equal(out, manual)


class TestFrequencySplit:
    @pytest.mark.parametrize("sigma", [0.5, 1.0, 2.0])
    def test_single_binade_reconstruction_bitwise(self, rng, sigma):
        # values in [0.5, 1): img and low share a binade, so img - low is
        # exact (Sterbenz) and low + high == img holds bit-for-bit
        img = 0.5 + 0.499 * rng.random((48, 48))
        low, high = D.frequency_split(img, sigma)
        np.testing.assert_array_equal(low + high, img)

    def test_full_range_reconstruction_one_ulp(self, rng):
        img = rng.random((3, 48, 48))
        img[rng.random((3, 48, 48)) < 0.3] = 0.0
        low, high = D.frequency_split(img, 1.0)
        assert np.abs(low + high - img).max() <= 1e-15

    def test_low_is_the_blur(self, rng):
        img = rng.random((32, 32))
        low, _ = D.frequency_split(img, 1.5)
        np.testing.assert_array_equal(low, D.gaussian_blur(img, 1.5))

    def test_constant_image_high_is_zero(self):
        low, high = D.frequency_split(np.full((24, 24), 0.7), 1.0)
        np.testing.assert_array_equal(high, np.zeros((24, 24)))
        np.testing.assert_array_equal(low, np.full((24, 24), 0.7))

    def test_sigma_validated(self):
        with pytest.raises(ValueError):
            D.frequency_split(np.zeros((8, 8)), 0.0)

    def test_noise_raises_low_band_energy(self):
        img, _ = D.synth_scene(D.SceneSpec(seed=17))
        noisy = D.degrade_image(img, D.DegradationSpec(n=0.2, v=0.0, seed=2))
        low_clean, _ = D.frequency_split(img, 2.0)
        low_noisy, _ = D.frequency_split(noisy, 2.0)
        e_clean = float((low_clean ** 2).mean())
        e_noisy = float((low_noisy ** 2).mean())
        assert e_noisy != e_clean
        # additive noise leaks into the low band: its energy goes up
        assert e_noisy > e_clean


class TestDftMagnitude:
    def test_constant_is_center_bin_only(self):
        panel = D.dft_magnitude(np.full((64, 64), 0.3))
        assert panel[32, 32] == 1.0
        rest = panel.copy()
        rest[32, 32] = 0.0
        assert rest.max() == 0.0

    def test_cosine_peak_pair(self):
        n, f = 64, 5
        x = np.cos(2 * math.pi * f * np.arange(n) / n)
        img = np.tile(x, (n, 1))
        mag = D.dft_magnitude(img, normalize=False)
        flat = np.argsort(mag.ravel())[::-1][:2]
        peaks = {tuple(divmod(int(i), n)) for i in flat}
        assert peaks == {(32, 32 - f), (32, 32 + f)}
        assert mag.sum() - mag.ravel()[flat].sum() <= 1e-6 * mag.sum()

    def test_parseval(self, rng):
        img = rng.random((128, 128))
        mag = D.dft_magnitude(img, normalize=False)
        lhs = (mag ** 2).sum()
        rhs = img.size * (img ** 2).sum()
        assert abs(lhs - rhs) / rhs <= 1e-6

    def test_panel_range(self, rng):
        panel = D.dft_magnitude(rng.random((32, 32)))
        assert panel.min() >= 0.0 and panel.max() == 1.0

    @pytest.mark.parametrize("shape", [(48, 48), (64, 32), (8, 8, 8)])
    def test_shape_validation(self, shape):
        with pytest.raises(ValueError):
            D.dft_magnitude(np.zeros(shape))


class TestImageIO:
    def test_ppm_roundtrip(self, tmp_path, rng):
        img = rng.random((3, 20, 30))
        path = tmp_path / "x.ppm"
        D.write_ppm(path, img)
        back = D.read_ppm(path)
        np.testing.assert_array_equal(back, np.clip(np.rint(img * 255), 0, 255) / 255.0)

    def test_pgm_roundtrip(self, tmp_path, rng):
        img = rng.random((16, 24))
        path = tmp_path / "x.pgm"
        D.write_pgm(path, img)
        back = D.read_pgm(path)
        np.testing.assert_array_equal(back, np.rint(img * 255) / 255.0)

    def test_header_comments_skipped(self, tmp_path):
        path = tmp_path / "c.pgm"
        payload = bytes(range(6))
        path.write_bytes(b"P5\n# a comment line\n3 2\n# another\n255\n" + payload)
        img = D.read_pgm(path)
        assert img.shape == (2, 3)
        np.testing.assert_array_equal(np.rint(img * 255).astype(int),
                                      np.arange(6).reshape(2, 3))

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ppm"
        path.write_bytes(b"P5\n2 2\n255\n" + bytes(4))
        with pytest.raises(ValueError, match="not a P6"):
            D.read_ppm(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "short.pgm"
        path.write_bytes(b"P5\n4 4\n255\n" + bytes(7))
        with pytest.raises(ValueError, match="truncated"):
            D.read_pgm(path)

    def test_unsupported_depth(self, tmp_path):
        path = tmp_path / "deep.pgm"
        path.write_bytes(b"P5\n2 2\n65535\n" + bytes(8))
        with pytest.raises(ValueError, match="8-bit"):
            D.read_pgm(path)

    def test_shape_validation(self, tmp_path):
        with pytest.raises(ValueError):
            D.write_ppm(tmp_path / "y.ppm", np.zeros((20, 30)))
        with pytest.raises(ValueError):
            D.write_pgm(tmp_path / "y.pgm", np.zeros((3, 20, 30)))


class TestAnnotationIO:
    def test_roundtrip(self, tmp_path):
        boxes = {
            0: [RotatedBox(10.0, 12.0, 5.0, 3.0, 0.4, class_id=1),
                RotatedBox(40.0, 8.0, 7.0, 7.0, -0.9, class_id=0, score=0.75)],
            3: [RotatedBox(20.5, 20.5, 6.25, 4.5, 1.2, class_id=2)],
        }
        path = tmp_path / "ann.jsonl"
        write_annotations(path, boxes)
        back = read_annotations(path)
        assert sorted(back) == [0, 3]
        for image_id, orig in boxes.items():
            got = back[image_id]
            assert len(got) == len(orig)
            for a, b in zip(orig, got):
                assert (a.cx, a.cy, a.w, a.h) == (b.cx, b.cy, b.w, b.h)
                assert abs(a.theta - b.theta) <= 1e-12
                assert a.class_id == b.class_id and a.score == b.score

    def test_header_line_self_describes(self, tmp_path):
        path = tmp_path / "ann.jsonl"
        write_annotations(path, {0: [RotatedBox(1.0, 1.0, 2.0, 2.0, 0.0)]})
        first = path.read_text().splitlines()[0]
        assert "radians" in first

    def test_wrong_angle_unit_rejected(self, tmp_path):
        path = tmp_path / "deg.jsonl"
        path.write_text('{"format": "rotated-boxes", "angle_unit": "degrees"}\n')
        with pytest.raises(ValueError, match="header"):
            read_annotations(path)

    def test_rewrite_is_byte_identical(self, tmp_path):
        boxes = {1: [RotatedBox(9.0, 9.0, 4.0, 2.0, 0.321, class_id=3, score=0.5)]}
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        write_annotations(a, boxes)
        write_annotations(b, boxes)
        assert a.read_bytes() == b.read_bytes()
