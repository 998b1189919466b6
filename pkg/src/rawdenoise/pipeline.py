"""Two-stage blind denoising: estimate, transform, denoise, invert; then refine and repeat."""
from __future__ import annotations

import dataclasses
import hashlib
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cne import EstimationReport, run_cne
from .denoisers import (DCTDenoiser, DenoiserGuidance, ExternalDenoiser, GaussianDenoiser,
                        IdentityDenoiser, IterConfig, iterative_denoise)
from .noisemodel import NoiseParams
from .rawmodel import BayerImage, PackedPlanes, pack, unpack
from .vst import (DEFAULT_CHI_GRID, DEFAULT_SIGMA_GRID, BiasLut, TransformContext, em_vst_forward,
                  get_lut, inverse_after_denoise)

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    p: int = 29
    p_prime: int = 19
    ats_quantile: float | None = None
    sigma_mult: float = 1.03
    alpha: float | None = None
    sigma: float | None = None
    denoiser: str = "dct"
    dct_threshold: float = 3.0
    dct_wiener: bool = True
    gaussian_scale: float = 20.0
    external_cmd: str | None = None
    iterative: bool = False
    iter_t: int = 10
    iter_eta: float = 0.8
    iter_gamma: float | None = None
    iter_sigma_target: float = 5.0 / 255.0
    lut_chi_grid: tuple = DEFAULT_CHI_GRID
    lut_sigma_grid: tuple = DEFAULT_SIGMA_GRID
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("p", "p_prime"):
            v = getattr(self, name)
            if v < 1 or v % 2 == 0:
                raise ConfigError(f"{name} must be a positive odd integer, got {v}")
        if not self.sigma_mult > 0:
            raise ConfigError(f"sigma_mult must be positive, got {self.sigma_mult}")
        if self.ats_quantile is not None and not 0 < self.ats_quantile <= 1:
            raise ConfigError(f"ats_quantile must lie in (0, 1], got {self.ats_quantile}")
        if (self.alpha is None) != (self.sigma is None):
            raise ConfigError("a noise override needs both alpha and sigma")
        if self.alpha is not None:
            try:
                NoiseParams(self.alpha, self.sigma)
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
        if self.denoiser not in ("dct", "gaussian", "identity", "external"):
            raise ConfigError(f"unknown denoiser {self.denoiser!r}")
        if self.denoiser == "external" and not self.external_cmd:
            raise ConfigError("denoiser 'external' needs external_cmd")
        if self.iterative:
            self.iter_config()

    @property
    def noise_override(self) -> NoiseParams | None:
        return None if self.alpha is None else NoiseParams(self.alpha, self.sigma)

    def iter_config(self) -> IterConfig:
        try:
            return IterConfig(self.iter_t, self.iter_eta, self.iter_gamma, self.iter_sigma_target, self.seed)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_mapping(cls, values: dict, base: "PipelineConfig | None" = None) -> "PipelineConfig":
        """Build from string or typed values; keys may use dashes or underscores."""
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        changes = {}
        for key, raw in values.items():
            name = key.strip().replace("-", "_")
            if name not in types:
                raise ConfigError(f"unknown config key {key!r}")
            changes[name] = _coerce(name, types[name], raw)
        base = base or cls()
        return dataclasses.replace(base, **changes)

    @classmethod
    def from_file(cls, path, base: "PipelineConfig | None" = None) -> "PipelineConfig":
        return cls.from_mapping(read_config_file(path), base)


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = value
    return values


def _coerce(name: str, typ: str, raw):
    if not isinstance(raw, str):
        return tuple(raw) if name.startswith("lut_") else raw
    text = raw.strip()
    if "None" in typ and text.lower() in ("", "none", "null"):
        return None
    try:
        if typ.startswith("bool"):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if typ.startswith("int"):
            return int(text)
        if typ.startswith("float"):
            return float(text)
        if typ.startswith("tuple"):
            lo, hi, n = (s.strip() for s in text.strip("()").split(","))
            return float(lo), float(hi), int(n)
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc
    return text


def make_denoiser(cfg: PipelineConfig):
    if cfg.denoiser == "dct":
        return DCTDenoiser(threshold=cfg.dct_threshold, wiener=cfg.dct_wiener)
    if cfg.denoiser == "gaussian":
        return GaussianDenoiser(scale=cfg.gaussian_scale)
    if cfg.denoiser == "identity":
        return IdentityDenoiser()
    return ExternalDenoiser(cfg.external_cmd)


def normalized_planes(packed: PackedPlanes) -> np.ndarray:
    """Packed planes with black mapped to 0 and white to 1."""
    return (packed.planes - packed.black_level) / packed.dynamic_range


def digest(arr) -> str:
    arr = np.ascontiguousarray(arr)
    return hashlib.sha256(arr.tobytes() + str(arr.shape).encode()).hexdigest()


def transform_denoise(packed: PackedPlanes, ctx: TransformContext, denoiser, multiplier: float,
                      lut: BiasLut, iterative: IterConfig | None = None, on_step=None) -> PackedPlanes:
    """EM-VST, SNR-guided denoise (single shot or iterative), algebraic inverse.  DN in, DN out."""
    fwd = em_vst_forward(packed, ctx, lut)
    guidance = DenoiserGuidance(ctx.sigma_snr, multiplier)
    if iterative is None:
        out = denoiser.denoise(fwd.data, guidance)
    else:
        out = iterative_denoise(fwd.data, denoiser, guidance, iterative, on_step=on_step)
    return inverse_after_denoise(dataclasses.replace(fwd, data=out), ctx)


@dataclass
class PipelineResult:
    denoised: BayerImage
    report: EstimationReport
    contexts: dict[str, TransformContext]
    timings: dict[str, float]
    coarse_denoised: BayerImage | None = None
    input_digest: str = ""
    stage2_input_digest: str = ""
    warnings: list[str] = field(default_factory=list)

    @property
    def flagged(self) -> bool:
        return bool(self.warnings)

    def as_dict(self, config: PipelineConfig | None = None) -> dict:
        out = {"estimation": self.report.as_dict(),
               "contexts": {k: v.as_dict() for k, v in self.contexts.items()},
               "timings": self.timings, "warnings": self.warnings,
               "input_digest": self.input_digest, "stage2_input_digest": self.stage2_input_digest}
        if config is not None:
            out["config"] = config.as_dict()
        return out


def run_yond(noisy: BayerImage, cfg: PipelineConfig | None = None, denoiser=None,
             lut: BiasLut | None = None, coarse_hook=None, _iterative: bool = False,
             on_step=None) -> PipelineResult:
    """Blind two-stage denoising of a Bayer frame.

    The coarse denoised image only feeds the fine noise estimate; the final stage always
    transforms the original noisy frame.  With a noise override both stages collapse into
    one denoise.
    """
    cfg = cfg or PipelineConfig()
    den = denoiser if denoiser is not None else make_denoiser(cfg)
    lut = lut if lut is not None else get_lut(cfg.lut_chi_grid, cfg.lut_sigma_grid)
    timings: dict[str, float] = {}
    contexts: dict[str, TransformContext] = {}
    packed = pack(noisy)
    input_digest = digest(packed.planes)
    coarse_img = None

    t0 = time.perf_counter()
    override = cfg.noise_override
    if override is not None:
        report = EstimationReport(override=override)
    else:
        report, xc = run_cne(noisy, den, cfg, lut, coarse_hook=coarse_hook)
        contexts["coarse"] = TransformContext(report.coarse, packed.black_level, packed.white_level)
        coarse_img = unpack(xc)
    timings["estimation"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    ctx = TransformContext(report.params, packed.black_level, packed.white_level)
    contexts["final"] = ctx
    stage2_digest = digest(packed.planes)
    iterative = cfg.iter_config() if _iterative else None
    out = transform_denoise(packed, ctx, den, cfg.sigma_mult, lut, iterative, on_step=on_step)
    timings["final_denoise"] = time.perf_counter() - t0

    return PipelineResult(unpack(out), report, contexts, timings, coarse_img,
                          input_digest, stage2_digest, list(report.warnings))


def run_yond_p(noisy: BayerImage, cfg: PipelineConfig | None = None, **kw) -> PipelineResult:
    """As :func:`run_yond` with the final denoise replaced by the iterative strategy."""
    return run_yond(noisy, cfg, _iterative=True, **kw)
