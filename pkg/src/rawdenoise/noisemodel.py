"""Poisson-Gaussian noise: parameters, sampling and (mean, variance) line fitting.

Parameters follow the normalized convention: the image is scaled so black maps to 0 and
white to 1, and ``Var(y) = alpha * x + sigma**2`` holds in those units.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

# Fits that come out non-positive (noise-free input) are floored here so the
# downstream transform stays defined.
ALPHA_FLOOR = 1e-9
MAD_CUTOFF = 3.0


class InsufficientDataError(ValueError):
    pass


class DegenerateFitError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseParams:
    alpha: float
    sigma: float

    def __post_init__(self):
        if not (math.isfinite(self.alpha) and self.alpha > 0):
            raise ValueError(f"alpha must be positive and finite, got {self.alpha}")
        if not (math.isfinite(self.sigma) and self.sigma >= 0):
            raise ValueError(f"sigma must be non-negative and finite, got {self.sigma}")

    @property
    def sigma_hat(self) -> float:
        """Read noise in electrons."""
        return self.sigma / self.alpha

    def variance(self, mean):
        return self.alpha * np.asarray(mean) + self.sigma ** 2

    def as_dict(self) -> dict:
        return {"alpha": self.alpha, "sigma": self.sigma, "sigma_hat": self.sigma_hat}


@dataclass(frozen=True)
class MVSamples:
    mean: np.ndarray
    variance: np.ndarray
    weight: np.ndarray | None = None
    stage: str = "coarse"

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).ravel()
        var = np.asarray(self.variance, dtype=np.float64).ravel()
        if mean.shape != var.shape:
            raise ValueError("mean and variance must have the same length")
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(var))):
            raise ValueError("samples must be finite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "variance", var)
        if self.weight is not None:
            w = np.asarray(self.weight, dtype=np.float64).ravel()
            if w.shape != mean.shape or np.any(w < 0):
                raise ValueError("weights must be non-negative and match the samples")
            object.__setattr__(self, "weight", w)

    def __len__(self) -> int:
        return self.mean.size

    @classmethod
    def concat(cls, parts, stage: str | None = None) -> "MVSamples":
        parts = list(parts)
        if not parts:
            raise InsufficientDataError("no sample sets to pool")
        weights = None
        if any(p.weight is not None for p in parts):
            weights = np.concatenate([p.weight if p.weight is not None else np.ones(len(p)) for p in parts])
        return cls(np.concatenate([p.mean for p in parts]),
                   np.concatenate([p.variance for p in parts]),
                   weights, stage or parts[0].stage)

    def summary(self) -> dict:
        if len(self) == 0:
            return {"count": 0}
        return {"count": len(self), "mean_min": float(self.mean.min()), "mean_max": float(self.mean.max()),
                "variance_min": float(self.variance.min()), "variance_max": float(self.variance.max()),
                "negative_variances": int(np.sum(self.variance < 0))}

    def to_csv(self, path) -> None:
        write_samples_csv(self, path)

    @classmethod
    def from_csv(cls, path) -> "MVSamples":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            return cls(np.empty(0), np.empty(0))
        return cls([float(r["mean"]) for r in rows], [float(r["variance"]) for r in rows],
                   [float(r["weight"]) for r in rows], rows[0]["stage"])


def make_rng(seed) -> np.random.Generator:
    """Counter-based generator; ``seed`` may be an int, SeedSequence or an existing Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(seed)
    return np.random.Generator(np.random.Philox(seed))


def sample_noisy(clean, params: NoiseParams, seed=None) -> np.ndarray:
    """Draw ``alpha * Poisson(x / alpha) + N(0, sigma^2)`` per pixel.  The result is not clipped."""
    clean = np.asarray(clean, dtype=np.float64)
    if np.any(clean < 0):
        raise ValueError("clean signal must be non-negative")
    rng = make_rng(seed)
    # numpy's Poisson sampler: inversion for lam < 10, PTRS transformed rejection above
    counts = rng.poisson(clean / params.alpha)
    noisy = params.alpha * counts
    if params.sigma > 0:
        noisy = noisy + rng.normal(0.0, params.sigma, size=clean.shape)
    return noisy


def clip_to_range(y, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    return np.clip(y, lo, hi)


def _line(I, V, w, intercept: bool = True) -> tuple[float, float]:
    if not intercept:
        return float(np.sum(w * I * V) / np.sum(w * I * I)), 0.0
    sw = np.sqrt(w)
    A = np.stack([I * sw, sw], axis=1)
    (a, b), *_ = np.linalg.lstsq(A, V * sw, rcond=None)
    return float(a), float(b)


def _inliers(residual: np.ndarray, scale: float) -> np.ndarray:
    dev = np.abs(residual - np.median(residual))
    mad = np.median(dev)
    return dev <= max(MAD_CUTOFF * mad, 1e-12 * scale)


def fit_least_squares(samples: MVSamples) -> NoiseParams:
    """Fit ``V = alpha * I + sigma^2``: least squares, one MAD-based outlier pass, intercept >= 0."""
    I, V = samples.mean, samples.variance
    if len(samples) < 2:
        raise InsufficientDataError(f"need at least 2 samples, got {len(samples)}")
    if np.ptp(I) == 0:
        raise DegenerateFitError("all sample means are identical")
    w = samples.weight if samples.weight is not None else np.ones_like(I)

    a, b = _line(I, V, w)
    keep = _inliers(V - (a * I + b), float(np.max(np.abs(V))) or 1.0)
    if not keep.all() and keep.sum() >= 2 and np.ptp(I[keep]) > 0:
        I, V, w = I[keep], V[keep], w[keep]
        a, b = _line(I, V, w)
    if b < 0:
        a, b = _line(I, V, w, intercept=False)
    return NoiseParams(max(a, ALPHA_FLOOR), math.sqrt(max(b, 0.0)))


def residual_stats(samples: MVSamples, params: NoiseParams) -> dict:
    if len(samples) == 0:
        raise InsufficientDataError("no samples")
    r = samples.variance - params.variance(samples.mean)
    scale = float(np.max(np.abs(samples.variance))) or 1.0
    return {"rmse": float(np.sqrt(np.mean(r ** 2))),
            "outlier_fraction": float(1.0 - _inliers(r, scale).mean()),
            "count": len(samples)}


def write_samples_csv(samples, path) -> Path:
    """Write one or several sample sets into a single CSV."""
    path = Path(path)
    parts = [samples] if isinstance(samples, MVSamples) else list(samples)
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["mean", "variance", "weight", "stage"])
        for s in parts:
            w = s.weight if s.weight is not None else np.ones(len(s))
            for row in zip(s.mean, s.variance, w):
                out.writerow([repr(float(v)) for v in row] + [s.stage])
    return path
