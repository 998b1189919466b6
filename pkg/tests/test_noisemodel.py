import numpy as np
import pytest

from rawdenoise.filters import box_mean_std
from rawdenoise.noisemodel import (DegenerateFitError, InsufficientDataError, MVSamples, NoiseParams,
                                   fit_least_squares, make_rng, residual_stats, sample_noisy)


def test_params_validation():
    with pytest.raises(ValueError):
        NoiseParams(0.0, 1.0)
    with pytest.raises(ValueError):
        NoiseParams(1.0, -1.0)
    with pytest.raises(ValueError):
        NoiseParams(float("nan"), 1.0)
    p = NoiseParams(0.5, 2.0)
    assert p.sigma_hat == 4.0
    assert p.variance(10.0) == pytest.approx(9.0)


def test_zero_signal_zero_read_noise():
    out = sample_noisy(np.zeros((64, 64)), NoiseParams(0.1, 0.0), seed=0)
    assert np.all(out == 0.0)


def test_moments_at_100():
    out = sample_noisy(np.full(1_000_000, 100.0), NoiseParams(1.0, 2.0), seed=5)
    assert out.mean() == pytest.approx(100.0, abs=0.05)
    assert out.var() == pytest.approx(104.0, abs=1.0)


def test_negative_clean_rejected():
    with pytest.raises(ValueError):
        sample_noisy(np.array([-1.0]), NoiseParams(1.0, 0.0))


def test_seeded_sampler_is_reproducible():
    x = np.full((32, 32), 5.0)
    a = sample_noisy(x, NoiseParams(0.3, 0.2), seed=9)
    b = sample_noisy(x, NoiseParams(0.3, 0.2), seed=9)
    c = sample_noisy(x, NoiseParams(0.3, 0.2), seed=10)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_make_rng_passthrough():
    g = make_rng(3)
    assert make_rng(g) is g


def test_exact_line():
    I = np.linspace(0, 10, 25)
    p = fit_least_squares(MVSamples(I, 2 * I + 9))
    assert p.alpha == pytest.approx(2.0, rel=1e-12)
    assert p.sigma == pytest.approx(3.0, rel=1e-12)


def test_negative_intercept_clamped():
    I = np.linspace(5, 10, 25)
    p = fit_least_squares(MVSamples(I, I - 4))
    assert p.alpha > 0 and p.sigma == 0.0


def test_outlier_rejected():
    I = np.linspace(0.1, 1.0, 40)
    V = 0.01 * I + 0.0004
    V[17] *= 10.0
    clean = fit_least_squares(MVSamples(np.delete(I, 17), np.delete(V, 17)))
    got = fit_least_squares(MVSamples(I, V))
    assert got.alpha == pytest.approx(clean.alpha, rel=0.01)
    assert got.sigma == pytest.approx(clean.sigma, rel=0.01)


def test_fit_errors():
    with pytest.raises(InsufficientDataError):
        fit_least_squares(MVSamples([1.0], [1.0]))
    with pytest.raises(DegenerateFitError):
        fit_least_squares(MVSamples([2.0, 2.0, 2.0], [1.0, 2.0, 3.0]))


def test_samples_validation():
    with pytest.raises(ValueError):
        MVSamples([1.0, 2.0], [1.0])
    with pytest.raises(ValueError):
        MVSamples([1.0], [np.inf])
    with pytest.raises(ValueError):
        MVSamples([1.0], [1.0], weight=[-1.0])


def test_residual_stats():
    I = np.linspace(0, 1, 10)
    p = NoiseParams(0.5, 0.1)
    assert residual_stats(MVSamples(I, p.variance(I)), p)["rmse"] == pytest.approx(0.0, abs=1e-15)
    V = p.variance(I).copy()
    V[::2] += 0.3
    assert residual_stats(MVSamples(I, V), p)["rmse"] == pytest.approx(0.3 / np.sqrt(2))


def test_csv_roundtrip(tmp_path):
    s = MVSamples([0.1, 0.2], [0.01, 0.02], [1.0, 2.0], stage="fine")
    s.to_csv(tmp_path / "s.csv")
    back = MVSamples.from_csv(tmp_path / "s.csv")
    np.testing.assert_allclose(back.mean, s.mean)
    np.testing.assert_allclose(back.weight, s.weight)
    assert back.stage == "fine"
    assert (tmp_path / "s.csv").read_text().splitlines()[0] == "mean,variance,weight,stage"


def test_concat_pools():
    a = MVSamples([1.0], [2.0])
    b = MVSamples([3.0, 4.0], [5.0, 6.0], [1.0, 1.0])
    c = MVSamples.concat([a, b])
    assert len(c) == 3 and c.weight.tolist() == [1.0, 1.0, 1.0]
    with pytest.raises(InsufficientDataError):
        MVSamples.concat([])


def test_recovery_on_flat_ramp():
    # 16 flat steps, geometrically spaced so the dark end pins the intercept; windows are taken only where they sit inside one step
    params = NoiseParams(2e-3, 4e-3)
    steps = np.repeat(np.geomspace(0.001, 0.9, 16), 32)
    ramp = np.tile(steps, (512, 1))
    noisy = sample_noisy(ramp, params, seed=21)
    p = 15
    mean, std = box_mean_std(noisy, p)
    cols = np.concatenate([np.arange(8, 25, 8) + 32 * k for k in range(16)])
    rows = np.arange(p, 512 - p, 4)
    sel = np.ix_(rows, cols)
    est = fit_least_squares(MVSamples(mean[sel], std[sel] ** 2))
    assert est.alpha == pytest.approx(params.alpha, rel=0.03)
    assert est.sigma == pytest.approx(params.sigma, rel=0.05)
