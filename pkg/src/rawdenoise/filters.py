"""Box mean and local standard deviation via summed-area tables.

Both filters cost the same for any window size: each output is four lookups into a
summed-area table of the reflect-101 padded input.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

# Above this many padded pixels the tables are accumulated with Kahan summation.
COMPENSATED_PIXELS = 4_000_000


@numba.njit(cache=True)
def _kahan_sat(a):
    h, w = a.shape
    out = np.zeros((h + 1, w + 1))
    col = np.zeros(w)
    col_c = np.zeros(w)
    for r in range(h):
        s = 0.0
        c = 0.0
        for k in range(w):
            # row-wise compensated prefix of this row
            y = a[r, k] - c
            t = s + y
            c = (t - s) - y
            s = t
            # column-wise compensated accumulation of row prefixes
            y2 = s - col_c[k]
            t2 = col[k] + y2
            col_c[k] = (t2 - col[k]) - y2
            col[k] = t2
            out[r + 1, k + 1] = t2
    return out


def summed_area_table(a: np.ndarray, compensated: bool | None = None) -> np.ndarray:
    """Zero-bordered summed-area table: ``sat[r, c] = a[:r, :c].sum()``."""
    a = np.asarray(a, dtype=np.float64)
    if compensated is None:
        compensated = a.size > COMPENSATED_PIXELS
    if compensated:
        return _kahan_sat(np.ascontiguousarray(a))
    sat = np.zeros((a.shape[0] + 1, a.shape[1] + 1))
    np.cumsum(a, axis=0, out=sat[1:, 1:])
    np.cumsum(sat[1:, 1:], axis=1, out=sat[1:, 1:])
    return sat


@dataclass(frozen=True)
class IntegralImage:
    """Summed-area tables of a reflect-101 padded image (and optionally of its square)."""

    sat: np.ndarray
    sat_sq: np.ndarray | None
    shape: tuple[int, int]
    pad: int
    offset: float = 0.0
    border: str = "reflect101"

    @classmethod
    def build(cls, img: np.ndarray, p: int, squares: bool = False) -> "IntegralImage":
        img = np.asarray(img, dtype=np.float64)
        _check_window(img, p)
        pad = p // 2
        offset = float(img.mean()) if squares else 0.0
        padded = np.pad(img - offset, pad, mode="reflect")
        sat = summed_area_table(padded)
        sat_sq = summed_area_table(padded * padded) if squares else None
        return cls(sat, sat_sq, img.shape, pad, offset)

    def window_sums(self, p: int, table: np.ndarray | None = None) -> np.ndarray:
        t = self.sat if table is None else table
        h, w = self.shape
        return t[p:p + h, p:p + w] - t[:h, p:p + w] - t[p:p + h, :w] + t[:h, :w]


def _check_window(img: np.ndarray, p: int) -> None:
    if img.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {img.shape}")
    if p < 1 or p % 2 == 0:
        raise ValueError(f"window size must be odd and >= 1, got {p}")
    if p > min(img.shape):
        raise ValueError(f"window {p} larger than image {img.shape}")


def box_mean(img, p: int) -> np.ndarray:
    """Mean over the ``p x p`` window centred on each pixel (reflect-101 borders)."""
    ii = IntegralImage.build(img, p)
    return ii.window_sums(p) / (p * p)


def _window_var(ii: IntegralImage, p: int) -> tuple[np.ndarray, np.ndarray]:
    n = p * p
    mean = ii.window_sums(p) / n
    var = ii.window_sums(p, ii.sat_sq) / n - mean * mean
    # every window sum is a difference of table entries no larger than the grand total, so
    # anything below a few ulps of that total is rounding noise, not variance
    noise_floor = 8.0 * np.finfo(np.float64).eps * ii.sat_sq[-1, -1] / n
    return mean, np.where(var > noise_floor, var, 0.0)


def box_std(img, p: int) -> np.ndarray:
    """Population standard deviation over the ``p x p`` window centred on each pixel."""
    _, var = _window_var(IntegralImage.build(img, p, squares=True), p)
    return np.sqrt(var)


def box_mean_std(img, p: int) -> tuple[np.ndarray, np.ndarray]:
    """Both statistics from one pair of tables."""
    ii = IntegralImage.build(img, p, squares=True)
    mean, var = _window_var(ii, p)
    return mean + ii.offset, np.sqrt(var)
