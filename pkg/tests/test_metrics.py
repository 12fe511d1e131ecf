import math

import numpy as np
import pytest

from geosynth import metrics
from geosynth.metrics import holdout_split, psnr, ssim


class TestPSNR:
    def test_identical_infinite(self):
        a = np.random.default_rng(0).random((8, 8, 3))
        assert psnr(a, a) == math.inf

    def test_mse_closed_form(self):
        a = np.zeros((10, 10))
        b = np.full((10, 10), 0.1)
        assert psnr(a, b) == pytest.approx(20.0, abs=1e-12)

    def test_matches_scalar_loop(self):
        rng = np.random.default_rng(1)
        a = rng.random((6, 5, 3))
        b = rng.random((6, 5, 3))
        acc = 0.0
        for i in range(6):
            for j in range(5):
                for c in range(3):
                    acc += (a[i, j, c] - b[i, j, c]) ** 2
        mse = acc / (6 * 5 * 3)
        assert psnr(a, b) == pytest.approx(-10 * math.log10(mse), abs=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(metrics.MetricsError):
            psnr(np.zeros((4, 4)), np.zeros((5, 4)))


class TestSSIM:
    def test_self_similarity_one(self):
        a = np.random.default_rng(2).random((16, 16, 3))
        assert ssim(a, a) == pytest.approx(1.0, abs=1e-9)

    def test_inverted_checker_negative_structure(self):
        xs, ys = np.meshgrid(np.arange(24), np.arange(24))
        a = ((xs // 2 + ys // 2) % 2).astype(np.float64)
        assert ssim(a, 1.0 - a) < 0.1

    def test_constant_images_luminance_term(self):
        a = np.full((16, 16), 0.25)
        b = np.full((16, 16), 0.75)
        c1 = 0.01 ** 2
        expect = (2 * 0.25 * 0.75 + c1) / (0.25 ** 2 + 0.75 ** 2 + c1)
        assert ssim(a, b) == pytest.approx(expect, abs=1e-9)

    def test_too_small_rejected(self):
        with pytest.raises(metrics.MetricsError):
            ssim(np.zeros((8, 8)), np.zeros((8, 8)))

    def test_valid_cropping_window_count(self):
        # 16x16 with an 11x11 valid convolution leaves a 6x6 map; changing a
        # corner pixel beyond the window reach must not affect far-side stats
        a = np.random.default_rng(3).random((16, 16))
        b = a.copy()
        v1 = ssim(a, b)
        assert v1 == pytest.approx(1.0, abs=1e-12)


class TestHoldout:
    def test_every_eighth_after_shuffle(self):
        train_idx, held = holdout_split(12, seed=0)
        assert len(held) == 2
        assert sorted(train_idx + held) == list(range(12))

    def test_deterministic(self):
        assert holdout_split(16, 5) == holdout_split(16, 5)
        assert holdout_split(16, 5) != holdout_split(16, 6)

    def test_eighth_fraction(self):
        for n in (8, 16, 24, 33):
            _, held = holdout_split(n, 1)
            assert len(held) == math.ceil(n / 8)
