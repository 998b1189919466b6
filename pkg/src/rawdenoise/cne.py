"""Coarse-to-fine noise estimation on packed, [0, 1]-normalized Bayer planes.

The coarse stage fits (local mean, local variance) pairs taken from flat regions of the
noisy image.  The fine stage repeats the fit with the local variance of a coarse denoised
image subtracted, which removes the texture that leaks into "flat" windows.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .filters import box_mean, box_mean_std, box_std
from .noisemodel import ALPHA_FLOOR, MVSamples, NoiseParams, fit_least_squares, residual_stats

log = logging.getLogger(__name__)

N_CANDIDATES = 20
HIST_BINS = 100
MIN_FLAT_FRACTION = 0.01
FALLBACK_FRACTION = 0.05
# |median(B(dy^2) / S^2) - 1| beyond this means the "flat" windows are not noise-like.
WHITENESS_TOLERANCE = 0.3


@dataclass
class FlatMask:
    mask: np.ndarray
    threshold: float  # variance units
    quantile: float  # selected fraction q(theta)
    bins: int  # n(theta)
    scores: np.ndarray
    candidates: np.ndarray  # candidate thresholds on the std scale
    selected: int
    warnings: list[str] = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    @property
    def threshold_std(self) -> float:
        return float(self.candidates[self.selected])

    def as_dict(self) -> dict:
        return {"threshold": self.threshold, "threshold_std": self.threshold_std,
                "quantile": self.quantile, "bins": self.bins, "selected": self.selected,
                "candidate_quantiles": candidate_levels().tolist(),
                "candidates": self.candidates.tolist(), "scores": self.scores.tolist(),
                "warnings": list(self.warnings), **self.diagnostics}


def candidate_levels() -> np.ndarray:
    return np.arange(1, N_CANDIDATES + 1) / N_CANDIDATES


def ats(guide_std, means_for_bins, white_level: float = 1.0, bins: int = HIST_BINS,
        quantile: float | None = None) -> FlatMask:
    """Adaptive threshold selection.

    Tries the 20 quantiles (5%, 10%, ..., 100%) of ``guide_std`` as thresholds and keeps
    the one minimizing ``theta / (q(theta) * n(theta))``, where theta is the threshold in
    variance units, q the selected fraction and n the number of occupied histogram bins
    of ``means_for_bins`` under the mask.  ``quantile`` forces a candidate instead.
    """
    guide = np.asarray(guide_std, dtype=np.float64)
    means = np.asarray(means_for_bins, dtype=np.float64)
    if guide.shape != means.shape:
        raise ValueError(f"guide and means differ in shape: {guide.shape} vs {means.shape}")
    if np.any(guide < 0):
        raise ValueError("guide_std must be non-negative")

    levels = candidate_levels()
    flat_guide = guide.ravel()
    binned = np.clip(means.ravel(), 0.0, white_level)
    if not np.any(flat_guide > 0):
        scores = np.full(N_CANDIDATES, np.nan)
        n = _occupied_bins(binned, bins, white_level)
        return FlatMask(np.ones(guide.shape, bool), 0.0, 1.0, n, scores, np.zeros(N_CANDIDATES),
                        N_CANDIDATES - 1, ["guide std is identically zero; selecting every pixel"])

    thetas = np.quantile(flat_guide, levels, method="inverted_cdf")
    scores = np.empty(N_CANDIDATES)
    fractions = np.empty(N_CANDIDATES)
    counts = np.empty(N_CANDIDATES, dtype=int)
    for i, th in enumerate(thetas):
        sel = flat_guide <= th
        fractions[i] = sel.mean()
        counts[i] = _occupied_bins(binned[sel], bins, white_level)
        scores[i] = th * th / (fractions[i] * counts[i]) if counts[i] else np.inf

    if quantile is not None:
        if not 0 < quantile <= 1:
            raise ValueError(f"ATS quantile override must lie in (0, 1], got {quantile}")
        best = int(np.argmin(np.abs(levels - quantile)))
    else:
        best = int(np.argmin(scores))  # first minimum: ties go to the smaller threshold
    th = float(thetas[best])
    return FlatMask(guide <= th, th * th, float(fractions[best]), int(counts[best]), scores, thetas, best)


def _occupied_bins(values: np.ndarray, bins: int, white_level: float) -> int:
    if values.size == 0:
        return 0
    hist, _ = np.histogram(values, bins=bins, range=(0.0, white_level))
    return int(np.count_nonzero(hist))


def sample_grid(shape: tuple[int, int], p: int) -> tuple[np.ndarray, np.ndarray]:
    """Row/column indices of window centres spaced ceil(p/2) apart, windows fully inside the plane."""
    stride = math.ceil(p / 2)
    half = p // 2
    rows = np.arange(half, shape[0] - half, stride)
    cols = np.arange(half, shape[1] - half, stride)
    return rows, cols


def _check_planes(planes, p: int) -> np.ndarray:
    planes = np.asarray(planes, dtype=np.float64)
    if planes.ndim == 2:
        planes = planes[None]
    if planes.ndim != 3:
        raise ValueError(f"expected a stack of planes, got shape {planes.shape}")
    if min(planes.shape[1:]) < p:
        raise ValueError(f"planes {planes.shape[1:]} smaller than the {p}x{p} kernel")
    return planes


def _collect(I, V, guide, mask, p: int, stage: str):
    rows, cols = sample_grid(I.shape[1:], p)
    grid = np.ix_(np.arange(I.shape[0]), rows, cols)
    Ig, Vg, Gg, Mg = I[grid].ravel(), V[grid].ravel(), guide[grid].ravel(), mask[grid].ravel()
    warnings = []
    if Mg.mean() < MIN_FLAT_FRACTION:
        warnings.append(f"{stage}: flat mask covers {100 * Mg.mean():.2f}% of sample points "
                        f"(< {100 * MIN_FLAT_FRACTION:.0f}%)")
    if not Mg.any():
        k = max(2, int(math.ceil(FALLBACK_FRACTION * Gg.size)))
        Mg = np.zeros_like(Mg)
        Mg[np.argsort(Gg, kind="stable")[:k]] = True
        warnings.append(f"{stage}: empty flat mask at sample points; using the lowest-variance "
                        f"{100 * FALLBACK_FRACTION:.0f}%")
    return MVSamples(Ig[Mg], Vg[Mg], stage=stage), Mg, warnings


def _whiteness(planes, V, p: int, sel_grid) -> float:
    """Median ratio of local neighbour-difference variance to local variance at sample points."""
    dy = np.diff(planes, axis=2, append=planes[:, :, -2:-1]) / math.sqrt(2.0)
    local = np.stack([box_mean(d * d, p) for d in dy])
    rows, cols = sample_grid(V.shape[1:], p)
    grid = np.ix_(np.arange(V.shape[0]), rows, cols)
    num, den = local[grid].ravel()[sel_grid], V[grid].ravel()[sel_grid]
    ok = den > 0
    return float(np.median(num[ok] / den[ok])) if ok.any() else float("nan")


def estimate_coarse(planes, p: int = 29, p_prime: int = 19, white_level: float = 1.0,
                    quantile: float | None = None):
    """Coarse stage: returns ``(NoiseParams, FlatMask, MVSamples)``.

    ``planes`` is a (4, H, W) stack in [0, 1]-normalized units (a single 2-D plane is accepted).
    """
    planes = _check_planes(planes, p)
    guide = np.stack([box_std(box_mean(x, p_prime), p) for x in planes])
    stats = [box_mean_std(x, p) for x in planes]
    I = np.stack([m for m, _ in stats])
    V = np.stack([s for _, s in stats]) ** 2

    flat = ats(guide, I, white_level, quantile=quantile)
    samples, used, warnings = _collect(I, V, guide, flat.mask, p, "coarse")
    flat.warnings.extend(warnings)
    params = fit_least_squares(samples)

    ratio = _whiteness(planes, V, p, used)
    flat.diagnostics["whiteness_ratio"] = ratio
    if math.isfinite(ratio) and abs(ratio - 1.0) > WHITENESS_TOLERANCE:
        flat.warnings.append(f"coarse: selected regions look textured (whiteness ratio {ratio:.2f}); "
                             "the image may lack flat regions")
    flat.diagnostics["fit"] = residual_stats(samples, params)
    return params, flat, samples


def estimate_fine(noisy, coarse_denoised, p: int = 29, white_level: float = 1.0,
                  quantile: float | None = None):
    """Fine stage: variance of the noisy image minus variance of the coarse denoised image."""
    noisy = _check_planes(noisy, p)
    den = _check_planes(coarse_denoised, p)
    if noisy.shape != den.shape:
        raise ValueError(f"noisy {noisy.shape} and denoised {den.shape} shapes differ")
    stats = [box_mean_std(x, p) for x in den]
    I = np.stack([m for m, _ in stats])
    guide = np.stack([s for _, s in stats])
    V = np.stack([box_std(x, p) for x in noisy]) ** 2 - guide ** 2

    flat = ats(guide, I, white_level, quantile=quantile)
    samples, _, warnings = _collect(I, V, guide, flat.mask, p, "fine")
    flat.warnings.extend(warnings)
    scale = float(np.max(np.abs(noisy))) or 1.0
    if np.max(np.abs(samples.variance), initial=0.0) <= 1e-12 * scale * scale:
        flat.warnings.append("fine: variance difference vanishes; the coarse denoised image "
                             "matches the noisy input")
    params = fit_least_squares(samples)
    if params.alpha <= ALPHA_FLOOR:
        flat.warnings.append("fine: fitted gain is non-positive; clamped to the floor")
    flat.diagnostics["fit"] = residual_stats(samples, params)
    return params, flat, samples


@dataclass
class EstimationReport:
    coarse: NoiseParams | None = None
    fine: NoiseParams | None = None
    coarse_mask: FlatMask | None = None
    fine_mask: FlatMask | None = None
    coarse_samples: MVSamples | None = None
    fine_samples: MVSamples | None = None
    override: NoiseParams | None = None
    warnings: list[str] = field(default_factory=list)

    @property
    def skipped(self) -> bool:
        return self.override is not None

    @property
    def params(self) -> NoiseParams:
        """The parameters the final transform uses."""
        if self.override is not None:
            return self.override
        if self.fine is None:
            raise ValueError("estimation has not produced fine parameters")
        return self.fine

    def as_dict(self) -> dict:
        def stage(params, mask, samples):
            if params is None:
                return {"skipped": True}
            return {"skipped": False, "params": params.as_dict(),
                    "samples": samples.summary() if samples is not None else None,
                    "ats": mask.as_dict() if mask is not None else None}

        return {"stages_skipped": self.skipped,
                "override": self.override.as_dict() if self.override else None,
                "coarse": stage(self.coarse, self.coarse_mask, self.coarse_samples),
                "fine": stage(self.fine, self.fine_mask, self.fine_samples),
                "params": self.params.as_dict(),
                "warnings": list(self.warnings)}

    def to_json(self, **kw) -> str:
        return json.dumps(self.as_dict(), indent=2, default=_jsonable, **kw)


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"{type(obj).__name__} is not JSON serializable")


def run_cne(noisy, denoiser=None, config=None, lut=None, coarse_hook=None):
    """Coarse estimate, one EM-VST + denoise round trip, fine estimate.

    Returns ``(EstimationReport, coarse_denoised_planes)``; the denoised planes are in DN.
    ``coarse_hook`` may replace the coarse denoised planes before the fine stage (used to
    probe stage isolation).
    """
    from .pipeline import PipelineConfig, make_denoiser, normalized_planes, transform_denoise
    from .rawmodel import pack
    from .vst import TransformContext, get_lut

    cfg = config or PipelineConfig()
    den = denoiser if denoiser is not None else make_denoiser(cfg)
    lut = lut if lut is not None else get_lut(cfg.lut_chi_grid, cfg.lut_sigma_grid)

    packed = pack(noisy)
    norm = normalized_planes(packed)
    coarse, cmask, csamples = estimate_coarse(norm, cfg.p, cfg.p_prime, quantile=cfg.ats_quantile)
    ctx = TransformContext(coarse, packed.black_level, packed.white_level)
    xc = transform_denoise(packed, ctx, den, cfg.sigma_mult, lut)
    if coarse_hook is not None:
        xc = xc.with_planes(coarse_hook(xc.planes))
    fine, fmask, fsamples = estimate_fine(norm, normalized_planes(xc), cfg.p, quantile=cfg.ats_quantile)
    report = EstimationReport(coarse, fine, cmask, fmask, csamples, fsamples)
    report.warnings = cmask.warnings + fmask.warnings
    for w in report.warnings:
        log.warning(w)
    return report, xc


def pool_calibration(reports) -> NoiseParams:
    """One fit over the fine-stage samples of several frames from the same camera setting."""
    return fit_least_squares(MVSamples.concat([r.fine_samples for r in reports], stage="fine"))
