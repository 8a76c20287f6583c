import numpy as np
import pytest

from crossdet.pyramid import (
    LaplacianPyramid,
    build,
    reconstruct,
    resize,
    translate_highres,
    translate_via_pyramid,
)


def psnr(a, b):
    mse = float(np.mean((a - b) ** 2))
    return float("inf") if mse == 0 else 10.0 * np.log10(1.0 / mse)


def synthetic_frame(rng, h, w):
    """Flat-dominant scene with rectangles and lines, like the benchmark."""
    img = np.full((3, h, w), 0.7)
    img += rng.normal(0.0, 0.01, img.shape)
    for _ in range(10):
        y0 = int(rng.integers(0, h - 40))
        x0 = int(rng.integers(0, w - 80))
        hh = int(rng.integers(20, 120))
        ww = int(rng.integers(30, 200))
        img[:, y0 : y0 + hh, x0 : x0 + ww] = rng.uniform(0.1, 0.95, 3)[:, None, None]
    return np.clip(img, 0.0, 1.0)


class TestBuildReconstruct:
    def test_single_level_is_the_image(self):
        img = np.random.default_rng(0).random((3, 16, 16))
        p = build(img, 1)
        assert p.bands == []
        assert np.allclose(p.top, img)
        assert p.level_count == 1

    def test_constant_image_has_zero_bands(self):
        img = np.full((3, 32, 32), 0.37)
        p = build(img, 4)
        for band in p.bands:
            assert np.abs(band).max() < 1e-12

    def test_round_trip_exact(self):
        rng = np.random.default_rng(1)
        img = rng.random((3, 64, 64))
        rec = reconstruct(build(img, 3))
        assert np.abs(rec - img).max() <= 1e-6

    def test_round_trip_odd_dims(self):
        rng = np.random.default_rng(2)
        for shape in [(3, 37, 53), (3, 17, 64), (1, 21, 21)]:
            img = rng.random(shape)
            rec = reconstruct(build(img, 3))
            assert np.abs(rec - img).max() <= 1e-6

    def test_halving_shapes(self):
        img = np.zeros((3, 40, 24))
        p = build(img, 3)
        assert p.bands[0].shape == (3, 40, 24)
        assert p.bands[1].shape == (3, 20, 12)
        assert p.top.shape == (3, 10, 6)

    def test_too_many_levels_rejected(self):
        with pytest.raises(ValueError):
            build(np.zeros((3, 4, 4)), 4)
        with pytest.raises(ValueError):
            build(np.zeros((3, 8, 8)), 0)

    def test_inconsistent_levels_rejected(self):
        p = LaplacianPyramid([np.zeros((3, 8, 8))], np.zeros((1, 4, 4)))
        with pytest.raises(ValueError):
            reconstruct(p)


class TestHighResPath:
    def test_identity_generator_psnr(self):
        rng = np.random.default_rng(3)
        img = synthetic_frame(rng, 1080, 1920)
        out = translate_highres(img, lambda low: low)
        assert out.shape == (3, 1080, 1920)
        assert psnr(out, img) >= 30.0

    def test_output_dims_exact(self):
        img = np.full((3, 1080, 1920), 0.5)
        out = translate_highres(img, lambda low: low * 0.5)
        assert out.shape == (3, 1080, 1920)

    def test_wrong_input_shape_rejected(self):
        with pytest.raises(ValueError):
            translate_highres(np.zeros((3, 720, 1280)), lambda low: low)

    def test_constant_image_stays_uniform(self):
        img = np.full((3, 1080, 1920), 0.6)
        out = translate_highres(img, lambda low: np.full_like(low, 0.2))
        # all band-pass levels are zero, so the output is spatially uniform
        assert out.shape == (3, 1080, 1920)
        assert np.ptp(out) < 1e-9

    def test_band_pass_content_preserved_bit_exact(self):
        rng = np.random.default_rng(4)
        img = synthetic_frame(rng, 512, 512)
        captured = {}

        def identity(low):
            captured["low"] = low.copy()
            return low

        before = build(img, 2)
        _ = translate_via_pyramid(img, identity, low_res=256)
        after = build(img, 2)
        for b1, b2 in zip(before.bands, after.bands):
            assert np.array_equal(b1, b2)

    def test_top_resized_to_generator_input(self):
        rng = np.random.default_rng(5)
        img = synthetic_frame(rng, 1080, 1920)
        seen = []
        translate_highres(img, lambda low: (seen.append(low.shape), low)[1])
        assert seen == [(3, 256, 256)]

    def test_small_image_rejected(self):
        with pytest.raises(ValueError):
            translate_via_pyramid(np.zeros((3, 100, 100)), lambda low: low, low_res=256)


class TestResize:
    def test_round_trip_quality(self):
        rng = np.random.default_rng(6)
        img = synthetic_frame(rng, 256, 256)
        small = resize(img, 128, 128)
        back = resize(small, 256, 256)
        assert back.shape == (3, 256, 256)
        assert psnr(back, img) > 20.0

    def test_identity_when_same_size(self):
        img = np.random.default_rng(7).random((3, 32, 32))
        assert np.allclose(resize(img, 32, 32), img)
