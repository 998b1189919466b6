"""PSNR and SSIM on raw frames."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ..rawmodel import BayerImage, pack

SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_SIGMA = 1.5
SSIM_TAPS = 11


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, peak: float) -> float:
    """``10 log10(peak^2 / MSE)``; identical inputs give ``inf``."""
    if not peak > 0:
        raise ValueError(f"peak must be positive, got {peak}")
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _gauss(x):
    # 11 taps at sigma 1.5: truncate = 5 / 1.5
    return ndimage.gaussian_filter(x, SSIM_SIGMA, truncate=(SSIM_TAPS // 2) / SSIM_SIGMA, mode="reflect")


def ssim_plane(a, b, peak: float) -> float:
    a, b = _pair(a, b)
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    mu_a, mu_b = _gauss(a), _gauss(b)
    saa = _gauss(a * a) - mu_a * mu_a
    sbb = _gauss(b * b) - mu_b * mu_b
    sab = _gauss(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2)
    return float(np.mean(num / den))


def ssim(a, b, peak: float | None = None) -> float:
    """Mean SSIM over planes.

    BayerImages are packed into their four planes first and the peak defaults to
    ``white - black``; a 3-D array is treated as a plane stack; a 2-D array is one plane.
    """
    if isinstance(a, BayerImage):
        peak = a.dynamic_range if peak is None else peak
        a, b = pack(a).planes, pack(b).planes
    a, b = _pair(a, b)
    if peak is None:
        peak = 1.0
    if a.ndim == 2:
        return ssim_plane(a, b, peak)
    return float(np.mean([ssim_plane(pa, pb, peak) for pa, pb in zip(a, b)]))


@dataclass(frozen=True)
class QualityScore:
    psnr: float
    ssim: float
    peak: float

    @classmethod
    def of(cls, result: BayerImage, reference: BayerImage) -> "QualityScore":
        peak = reference.dynamic_range
        return cls(psnr(result.data, reference.data, peak), ssim(result, reference), peak)

    def as_dict(self) -> dict:
        return {"psnr": self.psnr, "ssim": self.ssim, "peak": self.peak}
