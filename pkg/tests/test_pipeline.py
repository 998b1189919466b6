import sys

import numpy as np
import pytest

from rawdenoise.denoisers import IdentityDenoiser
from rawdenoise.harness.metrics import psnr
from rawdenoise.harness.synth import procedural_scene, sensor_setting, synth_pair
from rawdenoise.noisemodel import NoiseParams
from rawdenoise.pipeline import (ConfigError, PipelineConfig, digest, read_config_file, run_yond,
                                 run_yond_p, transform_denoise)
from rawdenoise.rawmodel import pack
from rawdenoise.vst import TransformContext, em_vst_forward, inverse_after_denoise

SMALL = PipelineConfig(p=15, p_prime=9)


@pytest.fixture(scope="module")
def pair():
    st = sensor_setting("phone", 3200)
    noisy, clean = synth_pair(procedural_scene(4, 256, "natural"), st.params, 8)
    return noisy, clean, st


# ------------------------------------------------------------------ config


def test_config_defaults():
    cfg = PipelineConfig()
    assert (cfg.p, cfg.p_prime, cfg.sigma_mult, cfg.denoiser) == (29, 19, 1.03, "dct")
    assert cfg.noise_override is None


@pytest.mark.parametrize("kw", [{"p": 4}, {"p_prime": 0}, {"sigma_mult": 0.0}, {"alpha": 1e-3},
                                {"alpha": -1.0, "sigma": 0.1}, {"denoiser": "bm3d"},
                                {"denoiser": "external"}, {"ats_quantile": 0.0},
                                {"iterative": True, "iter_eta": 2.0}])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        PipelineConfig(**kw)


def test_config_file_and_coercion(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# comment\np = 21\nsigma-mult = 0.93  # weaker\ndct_wiener = no\n"
                    "alpha = 1e-3\nsigma = 2e-3\nats_quantile = none\nlut_chi_grid = (-2, 4, 256)\n")
    assert read_config_file(path)["p"] == "21"
    cfg = PipelineConfig.from_file(path)
    assert cfg.p == 21 and cfg.sigma_mult == 0.93 and cfg.dct_wiener is False
    assert cfg.noise_override == NoiseParams(1e-3, 2e-3)
    assert cfg.ats_quantile is None and cfg.lut_chi_grid == (-2.0, 4.0, 256)


def test_config_file_errors(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("p 29\n")
    with pytest.raises(ConfigError):
        read_config_file(bad)
    with pytest.raises(ConfigError):
        PipelineConfig.from_mapping({"nope": "1"})
    with pytest.raises(ConfigError):
        PipelineConfig.from_mapping({"p": "many"})


def test_mapping_overrides_base():
    base = PipelineConfig(sigma_mult=0.9)
    cfg = PipelineConfig.from_mapping({"seed": 3}, base)
    assert cfg.sigma_mult == 0.9 and cfg.seed == 3


# ---------------------------------------------------------------- pipeline


def test_blind_run_reports_both_stages(pair):
    noisy, clean, st = pair
    res = run_yond(noisy, SMALL)
    assert res.denoised.data.shape == noisy.data.shape
    assert set(res.contexts) == {"coarse", "final"}
    assert res.coarse_denoised is not None
    assert res.contexts["final"].params == res.report.fine
    assert psnr(res.denoised.data, clean.data, clean.dynamic_range) > psnr(noisy.data, clean.data,
                                                                           clean.dynamic_range) + 5
    d = res.as_dict(SMALL)
    assert d["config"]["p"] == 15 and "final_denoise" in d["timings"]


def test_override_skips_estimation(pair):
    noisy, _, st = pair
    calls = []

    class Counting(IdentityDenoiser):
        def _run(self, image, sigma):
            calls.append(sigma)
            return image.copy()

    res = run_yond(noisy, SMALL.replace(alpha=st.alpha, sigma=st.sigma), denoiser=Counting())
    assert res.report.skipped and res.report.coarse is None
    assert res.coarse_denoised is None and set(res.contexts) == {"final"}
    assert len(calls) == 1


def test_deterministic(pair):
    noisy = pair[0]
    a, b = run_yond(noisy, SMALL), run_yond(noisy, SMALL)
    assert digest(a.denoised.data) == digest(b.denoised.data)
    cfg = SMALL.replace(iterative=True, iter_t=3)
    assert np.array_equal(run_yond_p(noisy, cfg).denoised.data, run_yond_p(noisy, cfg).denoised.data)


def test_stage_two_uses_original_noisy(pair):
    noisy, _, st = pair
    base = run_yond(noisy, SMALL)
    rng = np.random.default_rng(0)
    noise_dn = st.sigma * noisy.dynamic_range
    res = run_yond(noisy, SMALL, coarse_hook=lambda p: p + 0.1 * noise_dn * rng.standard_normal(p.shape))
    assert res.report.fine != base.report.fine
    assert res.stage2_input_digest == res.input_digest == digest(pack(noisy).planes)


def test_t1_matches_single_shot(pair):
    noisy = pair[0]
    a = run_yond(noisy, SMALL)
    b = run_yond_p(noisy, SMALL.replace(iterative=True, iter_t=1))
    np.testing.assert_array_equal(a.denoised.data, b.denoised.data)


def test_iterative_lowers_flat_residual():
    st = sensor_setting("dslr", 25600)
    noisy, clean = synth_pair(procedural_scene(1, 512, "flat"), st.params, 2)
    cfg = PipelineConfig()
    single = pack(run_yond(noisy, cfg).denoised).planes
    multi = pack(run_yond_p(noisy, cfg.replace(iterative=True)).denoised).planes

    def flat_std(p):  # interiors of the 64x64 packed tiles
        return np.mean([p[:, i * 64 + 12:i * 64 + 52, j * 64 + 12:j * 64 + 52].std(axis=(1, 2))
                        for i in range(4) for j in range(4)])

    assert not np.array_equal(single, multi)
    assert flat_std(multi) <= flat_std(single)


def test_identity_iterative_is_round_trip(pair, lut):
    noisy, _, st = pair
    cfg = SMALL.replace(alpha=st.alpha, sigma=st.sigma, denoiser="external",
                        external_cmd=f"{sys.executable} -m rawdenoise.denoisers",
                        iterative=True, iter_t=3, iter_eta=1.0)
    res = run_yond_p(noisy, cfg, lut=lut)
    ctx = TransformContext(NoiseParams(st.alpha, st.sigma), noisy.black_level, noisy.white_level)
    fwd = em_vst_forward(pack(noisy), ctx, lut)
    # the bridge carries float32
    fwd = type(fwd)(fwd.data.astype(np.float32).astype(np.float64), fwd.sigma_hat, fwd.peak, fwd.source)
    want = inverse_after_denoise(fwd, ctx)
    np.testing.assert_allclose(pack(res.denoised).planes, want.planes, rtol=0, atol=1e-9)


def test_near_noiseless_is_identity():
    noisy, _ = synth_pair(procedural_scene(4, 256, "flat"), NoiseParams(1e-7, 0.0), 1)
    res = run_yond(noisy, SMALL)
    assert psnr(res.denoised.data, noisy.data, noisy.dynamic_range) >= 60.0


def test_blind_close_to_oracle_phone_1600():
    st = sensor_setting("phone", 1600)
    gaps = []
    for k in range(2):
        noisy, clean = synth_pair(procedural_scene([50, k], 256, "natural"), st.params, [51, k])
        blind = run_yond(noisy, SMALL).denoised
        oracle = run_yond(noisy, SMALL.replace(alpha=st.alpha, sigma=st.sigma)).denoised
        gaps.append(psnr(oracle.data, clean.data, clean.dynamic_range)
                    - psnr(blind.data, clean.data, clean.dynamic_range))
    assert np.mean(gaps) <= 0.5


def test_transform_denoise_keeps_metadata(pair, lut):
    noisy, _, st = pair
    ctx = TransformContext(st.params, noisy.black_level, noisy.white_level)
    out = transform_denoise(pack(noisy), ctx, IdentityDenoiser(), 1.03, lut)
    assert out.black_level == noisy.black_level and out.cfa == noisy.cfa


def test_flagged_on_fallback():
    yy, xx = np.mgrid[0:512, 0:512]
    w = 2 * np.pi / 40
    tex = 0.45 + 0.35 * np.sin(xx * w + 0.3 * yy * w) * np.cos(0.8 * yy * w)
    noisy, _ = synth_pair(tex, sensor_setting("phone", 6400).params, 3)
    res = run_yond(noisy)
    assert res.flagged and res.warnings
