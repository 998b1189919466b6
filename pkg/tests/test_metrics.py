import math

import numpy as np
import pytest

from rawdenoise.harness.metrics import QualityScore, psnr, ssim, ssim_plane
from rawdenoise.rawmodel import BayerImage


def test_psnr_identical_is_infinite(rng):
    a = rng.uniform(0, 255, (16, 16))
    assert psnr(a, a, 255) == math.inf


def test_psnr_offset_by_one(rng):
    a = rng.uniform(0, 255, (16, 16))
    assert psnr(a, a + 1, 255) == pytest.approx(48.13, abs=0.005)


def test_psnr_awgn_ten(rng):
    a = rng.uniform(0, 255, (512, 512))
    b = a + 10 * rng.standard_normal(a.shape)
    assert psnr(b, a, 255) == pytest.approx(28.13, abs=0.1)


def test_psnr_errors():
    with pytest.raises(ValueError):
        psnr(np.zeros(3), np.zeros(4), 1.0)
    with pytest.raises(ValueError):
        psnr(np.zeros(3), np.zeros(3), 0.0)


def test_ssim_identical(rng):
    a = rng.uniform(0, 1, (4, 32, 32))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)


def test_ssim_symmetric(rng):
    a = rng.uniform(0, 1, (32, 32))
    b = a + 0.1 * rng.standard_normal(a.shape)
    assert abs(ssim_plane(a, b, 1.0) - ssim_plane(b, a, 1.0)) <= 1e-12


def test_ssim_drops_with_noise(rng):
    a = np.tile(np.linspace(0, 1, 64), (64, 1))
    light = ssim(a, a + 0.02 * rng.standard_normal(a.shape))
    heavy = ssim(a, a + 0.2 * rng.standard_normal(a.shape))
    assert -1 <= heavy < light < 1


def test_quality_score_on_bayer(rng):
    ref = BayerImage(rng.uniform(64, 1023, (32, 32)), black_level=64, white_level=1023)
    out = ref.with_data(ref.data + 2.0)
    q = QualityScore.of(out, ref)
    assert q.peak == 959.0
    assert q.psnr == pytest.approx(20 * math.log10(959 / 2))
    assert set(q.as_dict()) == {"psnr", "ssim", "peak"}
