"""Generalized Anscombe transform, its bias function and the expectation-matched forward transform.

All signal quantities here are in normalized electron units ``chi = (y - black) / alpha_dn``
where ``alpha_dn`` is the system gain expressed in DN.  Noise parameters are kept in
[0, 1]-normalized units (see :mod:`rawdenoise.noisemodel`), so the conversion to DN is
``alpha_dn = alpha * (white_level - black_level)``.
"""
from __future__ import annotations

import functools
import hashlib
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .noisemodel import NoiseParams
from .rawmodel import BayerImage, PackedPlanes

log = logging.getLogger(__name__)

LOW_SIGNAL_THRESHOLD = 50.0
QUAD_NODES = 160
QUAD_WIDTH = 10.0  # read-noise standard deviations covered on each side
TAIL_WIDTH = 8.0
TAIL_PAD = 10

LUT_MAGIC = b"YLUT"
LUT_VERSION = 2
DEFAULT_CHI_GRID = (-2.0, 4.0, 512)  # log10 min, log10 max, count
DEFAULT_SIGMA_GRID = (-2.0, 2.0, 64)


def gat(z, sigma_hat):
    """Generalized Anscombe transform ``2 sqrt(z + 3/8 + s^2)``, zero at and below the domain edge."""
    z = np.asarray(z, dtype=np.float64)
    arg = z + 0.375 + np.square(sigma_hat)
    return 2.0 * np.sqrt(np.maximum(arg, 0.0))


def iat(w, sigma_hat):
    """Algebraic inverse of :func:`gat` for ``w >= 0``."""
    w = np.asarray(w, dtype=np.float64)
    if np.any(w < 0):
        raise ValueError("iat is defined for non-negative transformed values only")
    return np.square(0.5 * w) - 0.375 - np.square(sigma_hat)


def closed_form_bias(chi, sigma_hat):
    """Second-order delta-method bias of the GAT, valid for large ``chi``."""
    chi = np.asarray(chi, dtype=np.float64)
    s2 = np.square(sigma_hat)
    return -(chi + s2) / (4.0 * np.power(chi + 0.375 + s2, 1.5))


@functools.lru_cache(maxsize=None)
def _leggauss():
    return np.polynomial.legendre.leggauss(QUAD_NODES)


def _max_k(chi_max: float) -> int:
    return int(np.ceil(chi_max + TAIL_WIDTH * np.sqrt(chi_max + 1.0))) + TAIL_PAD


def _component_means(sigma_hat: float, kmax: int) -> np.ndarray:
    """``E[f(k + N(0, s^2))]`` for ``k = 0..kmax``.

    With ``u = sqrt(z + 3/8 + s^2)`` the clamped branch drops out and the expectation becomes
    ``int_0^inf 4 u^2 phi((u^2 - 3/8 - s^2 - k) / s) / s du``, a smooth integrand that
    Gauss-Legendre handles well over +-10 s around the mean.
    """
    c = 0.375 + sigma_hat * sigma_hat
    k = np.arange(kmax + 1, dtype=np.float64)[:, None]
    lo = np.sqrt(np.maximum(k + c - QUAD_WIDTH * sigma_hat, 0.0))
    hi = np.sqrt(k + c + QUAD_WIDTH * sigma_hat)
    x, w = _leggauss()
    u = 0.5 * (hi - lo) * x[None, :] + 0.5 * (hi + lo)
    dens = np.exp(-0.5 * np.square((u * u - c - k) / sigma_hat)) / (sigma_hat * np.sqrt(2.0 * np.pi))
    return 0.5 * (hi - lo)[:, 0] * ((4.0 * u * u * dens) @ w)


def _poisson_weights(chi: np.ndarray, kmax: int) -> np.ndarray:
    k = np.arange(kmax + 1)
    pmf = stats.poisson.pmf(k[None, :], chi[:, None])
    spread = TAIL_WIDTH * np.sqrt(chi + 1.0)
    lo = np.maximum(0.0, np.floor(chi - spread))
    hi = np.ceil(chi + spread) + TAIL_PAD
    keep = (k[None, :] >= lo[:, None]) & (k[None, :] <= hi[:, None])
    return np.where(keep, pmf, 0.0)


def quadrature_bias(chi, sigma_hat: float) -> np.ndarray:
    """Bias ``E[f(z)|chi] - f(chi)`` by truncated Poisson mixture and per-component quadrature.

    ``sigma_hat`` must be a scalar; ``chi`` may be any array.
    """
    chi = np.asarray(chi, dtype=np.float64)
    flat = chi.ravel()
    if flat.size == 0:
        return np.zeros_like(chi)
    kmax = _max_k(float(flat.max()))
    means = _component_means(float(sigma_hat), kmax)
    expectation = _poisson_weights(flat, kmax) @ means
    return (expectation - gat(flat, sigma_hat)).reshape(chi.shape)


def bias_function(chi, sigma_hat):
    """VST bias ``e(chi) = E[f(z) | chi] - f(chi)`` for clean signal ``chi`` and read noise ``sigma_hat``.

    Quadrature below :data:`LOW_SIGNAL_THRESHOLD` electrons, closed form above.
    Broadcasts ``chi`` against ``sigma_hat``.
    """
    chi, sigma_hat = np.broadcast_arrays(np.asarray(chi, dtype=np.float64),
                                         np.asarray(sigma_hat, dtype=np.float64))
    if not (np.all(np.isfinite(chi)) and np.all(np.isfinite(sigma_hat))):
        raise ValueError("bias_function requires finite inputs")
    if np.any(sigma_hat <= 0):
        raise ValueError("bias_function requires sigma_hat > 0")
    if np.any(chi < 0):
        raise ValueError("bias_function requires chi >= 0")

    shape = chi.shape
    chi, sigma_hat = chi.ravel(), sigma_hat.ravel()
    out = closed_form_bias(chi, sigma_hat)
    low = chi < LOW_SIGNAL_THRESHOLD
    if np.any(low):
        chi_low, s_low = chi[low], sigma_hat[low]
        vals = np.empty_like(chi_low)
        for s in np.unique(s_low):
            sel = s_low == s
            vals[sel] = quadrature_bias(chi_low[sel], s)
        out[low] = vals
    return out.reshape(shape)[()]


# --------------------------------------------------------------------------- LUT


def _grid(spec) -> np.ndarray:
    lo, hi, n = spec
    return np.linspace(lo, hi, int(n))


@dataclass(frozen=True)
class BiasLut:
    """Bias values on a log-uniform (sigma_hat, chi) grid, rows indexed by sigma_hat."""

    chi_grid: tuple[float, float, int]
    sigma_grid: tuple[float, float, int]
    values: np.ndarray = field(repr=False)
    version: int = LUT_VERSION

    def __post_init__(self):
        shape = (int(self.sigma_grid[2]), int(self.chi_grid[2]))
        if self.values.shape != shape:
            raise ValueError(f"LUT values have shape {self.values.shape}, expected {shape}")
        self.values.setflags(write=False)

    @property
    def log_chi(self) -> np.ndarray:
        return _grid(self.chi_grid)

    @property
    def log_sigma(self) -> np.ndarray:
        return _grid(self.sigma_grid)

    @property
    def chi_nodes(self) -> np.ndarray:
        return 10.0 ** self.log_chi

    @property
    def sigma_nodes(self) -> np.ndarray:
        return 10.0 ** self.log_sigma

    def row(self, sigma_hat: float) -> np.ndarray:
        """Bias curve over the chi axis, linearly interpolated in log sigma_hat."""
        ls = self.log_sigma
        t = np.log10(max(float(sigma_hat), 1e-300))
        t = min(max(t, ls[0]), ls[-1])
        if len(ls) == 1:
            return self.values[0]
        i = min(int(np.searchsorted(ls, t, side="right")) - 1, len(ls) - 2)
        u = (t - ls[i]) / (ls[i + 1] - ls[i])
        return (1.0 - u) * self.values[i] + u * self.values[i + 1]

    def save(self, path) -> None:
        path = Path(path)
        with open(path, "wb") as fh:
            fh.write(LUT_MAGIC)
            fh.write(struct.pack("<I", self.version))
            for lo, hi, n in (self.chi_grid, self.sigma_grid):
                fh.write(struct.pack("<Idd", int(n), float(lo), float(hi)))
            fh.write(np.ascontiguousarray(self.values, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "BiasLut":
        blob = Path(path).read_bytes()
        if blob[:4] != LUT_MAGIC:
            raise ValueError(f"{path}: not a bias LUT file")
        (version,) = struct.unpack_from("<I", blob, 4)
        if version != LUT_VERSION:
            raise LutVersionError(f"{path}: LUT version {version}, expected {LUT_VERSION}")
        n_chi, chi_lo, chi_hi = struct.unpack_from("<Idd", blob, 8)
        n_sig, sig_lo, sig_hi = struct.unpack_from("<Idd", blob, 28)
        payload = blob[48:]
        if len(payload) != 8 * n_chi * n_sig:
            raise ValueError(f"{path}: LUT payload has {len(payload)} bytes, expected {8 * n_chi * n_sig}")
        values = np.frombuffer(payload, dtype="<f8").reshape(n_sig, n_chi).astype(np.float64)
        return cls((chi_lo, chi_hi, n_chi), (sig_lo, sig_hi, n_sig), values, version)


class LutVersionError(ValueError):
    pass


def _as_grid_spec(grid) -> tuple[float, float, int]:
    if len(grid) == 3 and not isinstance(grid, np.ndarray):
        lo, hi, n = grid
        spec = (float(lo), float(hi), int(n))
    else:
        nodes = np.asarray(grid, dtype=np.float64)
        if nodes.ndim != 1 or nodes.size < 2 or np.any(nodes <= 0):
            raise ValueError("grid nodes must be a 1-D array of positive values")
        logs = np.log10(nodes)
        spec = (float(logs[0]), float(logs[-1]), nodes.size)
        if not np.allclose(logs, _grid(spec), rtol=0, atol=1e-9):
            raise ValueError("grid nodes must be log-uniformly spaced")
    if spec[2] < 2 or not spec[1] > spec[0]:
        raise ValueError("grid must be monotone increasing with at least two nodes")
    return spec


def build_lut(sigma_grid=DEFAULT_SIGMA_GRID, chi_grid=DEFAULT_CHI_GRID) -> BiasLut:
    """Tabulate :func:`bias_function` on a log-uniform grid.

    Grids are either ``(log10_min, log10_max, count)`` triples or explicit node arrays.
    """
    chi_spec = _as_grid_spec(chi_grid)
    sigma_spec = _as_grid_spec(sigma_grid)
    chi = 10.0 ** _grid(chi_spec)
    sig = 10.0 ** _grid(sigma_spec)
    low = chi < LOW_SIGNAL_THRESHOLD
    values = np.empty((sig.size, chi.size))
    for r, s in enumerate(sig):
        values[r, ~low] = closed_form_bias(chi[~low], s)
        values[r, low] = quadrature_bias(chi[low], s)
    return BiasLut(chi_spec, sigma_spec, values)


def lut_bias(lut: BiasLut, chi, sigma_hat):
    """Bilinear lookup in log coordinates; queries outside the grid clamp to the boundary."""
    chi = np.asarray(chi, dtype=np.float64)
    if np.ndim(sigma_hat) == 0:
        return _lookup_row(lut.log_chi, lut.row(float(sigma_hat)), chi)
    chi, sigma_hat = np.broadcast_arrays(chi, np.asarray(sigma_hat, dtype=np.float64))
    out = np.empty(chi.shape)
    for s in np.unique(sigma_hat):
        sel = sigma_hat == s
        out[sel] = _lookup_row(lut.log_chi, lut.row(float(s)), chi[sel])
    return out


def _lookup_row(log_chi: np.ndarray, row: np.ndarray, chi: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        lc = np.log10(np.maximum(chi, 0.0))
    return np.interp(lc, log_chi, row)


def default_cache_dir() -> Path:
    env = os.environ.get("RAWDENOISE_CACHE")
    if env:
        return Path(env)
    return Path(os.environ.get("XDG_CACHE_HOME", Path.home() / ".cache")) / "rawdenoise"


def lut_cache_path(chi_grid, sigma_grid, cache_dir=None) -> Path:
    key = repr((LUT_VERSION, _as_grid_spec(chi_grid), _as_grid_spec(sigma_grid))).encode()
    name = "bias-" + hashlib.sha1(key).hexdigest()[:16] + ".ylut"
    return Path(cache_dir or default_cache_dir()) / name


@functools.lru_cache(maxsize=8)
def _memo_lut(chi_spec, sigma_spec, cache_dir: str | None, use_disk: bool) -> BiasLut:
    path = lut_cache_path(chi_spec, sigma_spec, cache_dir) if use_disk else None
    if path is not None and path.exists():
        try:
            lut = BiasLut.load(path)
            if lut.chi_grid == chi_spec and lut.sigma_grid == sigma_spec:
                return lut
        except LutVersionError:
            log.info("rebuilding stale LUT cache %s", path)
        except (ValueError, struct.error) as exc:
            log.warning("ignoring unreadable LUT cache %s: %s", path, exc)
    lut = build_lut(sigma_spec, chi_spec)
    if path is not None:
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_suffix(".tmp")
            lut.save(tmp)
            os.replace(tmp, path)
        except OSError as exc:
            log.warning("could not write LUT cache %s: %s", path, exc)
    return lut


def clear_lut_memo() -> None:
    """Forget in-process LUTs (the disk cache is untouched)."""
    _memo_lut.cache_clear()


def get_lut(chi_grid=DEFAULT_CHI_GRID, sigma_grid=DEFAULT_SIGMA_GRID, cache_dir=None,
            use_disk: bool = True) -> BiasLut:
    """Memoized LUT; backed by an on-disk cache keyed by grid and format version."""
    return _memo_lut(_as_grid_spec(chi_grid), _as_grid_spec(sigma_grid),
                     None if cache_dir is None else str(cache_dir), use_disk)


# ------------------------------------------------------------------- transforms


@dataclass(frozen=True)
class TransformContext:
    params: NoiseParams
    black_level: float
    white_level: float
    chi_lo: float = LOW_SIGNAL_THRESHOLD

    def __post_init__(self):
        if not self.white_level > self.black_level:
            raise ValueError("white_level must exceed black_level")
        if not self.peak > 0:
            raise ValueError("transform peak must be positive")

    @property
    def sigma_hat(self) -> float:
        return self.params.sigma_hat

    @property
    def alpha_dn(self) -> float:
        """System gain in DN per electron."""
        return self.params.alpha * (self.white_level - self.black_level)

    @property
    def peak(self) -> float:
        return float(gat(1.0 / self.params.alpha, self.sigma_hat))

    @property
    def sigma_snr(self) -> float:
        return 1.0 / self.peak

    def to_electrons(self, y):
        return (np.asarray(y, dtype=np.float64) - self.black_level) / self.alpha_dn

    def to_dn(self, chi):
        return np.asarray(chi, dtype=np.float64) * self.alpha_dn + self.black_level

    def as_dict(self) -> dict:
        return {"alpha": self.params.alpha, "sigma": self.params.sigma,
                "sigma_hat": self.sigma_hat, "black_level": self.black_level,
                "white_level": self.white_level, "peak": self.peak,
                "sigma_snr": self.sigma_snr, "chi_lo": self.chi_lo}


@dataclass(frozen=True)
class NormalizedImage:
    """Transformed image scaled so the white level maps to about 1 and noise std to about ``sigma_snr``."""

    data: np.ndarray
    sigma_hat: float
    peak: float
    source: object = None  # BayerImage / PackedPlanes template the data came from


def _unwrap(img):
    if isinstance(img, BayerImage):
        return img.data, img
    if isinstance(img, PackedPlanes):
        return img.stack(), img
    return np.asarray(img, dtype=np.float64), None


def _rewrap(data: np.ndarray, template):
    if isinstance(template, BayerImage):
        return template.with_data(data)
    if isinstance(template, PackedPlanes):
        return template.with_planes(data)
    return data


def em_vst_forward(img, ctx: TransformContext, lut: BiasLut | None = None) -> NormalizedImage:
    """Expectation-matched VST: GAT minus the bias evaluated at the (clamped) noisy value, over the peak.

    ``img`` is a BayerImage, PackedPlanes or a DN array.
    """
    data, template = _unwrap(img)
    lut = lut if lut is not None else get_lut()
    chi = ctx.to_electrons(data)
    row = lut.row(ctx.sigma_hat)
    bias = _lookup_row(lut.log_chi, row, np.maximum(chi, 0.0))
    out = (gat(chi, ctx.sigma_hat) - bias) / ctx.peak
    return NormalizedImage(out, ctx.sigma_hat, ctx.peak, template)


def gat_forward(img, ctx: TransformContext) -> NormalizedImage:
    """Plain GAT scaled by the peak (no bias pre-correction)."""
    data, template = _unwrap(img)
    out = gat(ctx.to_electrons(data), ctx.sigma_hat) / ctx.peak
    return NormalizedImage(out, ctx.sigma_hat, ctx.peak, template)


def _finish_inverse(chi: np.ndarray, ctx: TransformContext, template):
    y = ctx.to_dn(chi)
    sigma_dn = ctx.params.sigma * (ctx.white_level - ctx.black_level)
    y = np.clip(y, ctx.black_level - 4.0 * sigma_dn, ctx.white_level)
    return _rewrap(y, template)


def inverse_after_denoise(den: NormalizedImage, ctx: TransformContext):
    """Plain algebraic inverse back to DN (the bias was removed before denoising)."""
    w = np.maximum(np.asarray(den.data, dtype=np.float64) * ctx.peak, 0.0)
    return _finish_inverse(iat(w, ctx.sigma_hat), ctx, den.source)


def uiat_baseline(den: NormalizedImage, ctx: TransformContext, lut: BiasLut | None = None,
                  iterations: int = 8):
    """Bias-corrected inverse that treats the denoised result as the clean signal.

    Solves ``f(chi) + e(chi) = w`` for ``chi`` by fixed-point iteration starting from the
    algebraic inverse; used for ablations against the expectation-matched path.
    """
    lut = lut if lut is not None else get_lut()
    row = lut.row(ctx.sigma_hat)
    w = np.maximum(np.asarray(den.data, dtype=np.float64) * ctx.peak, 0.0)
    chi = iat(w, ctx.sigma_hat)
    for _ in range(iterations):
        bias = _lookup_row(lut.log_chi, row, np.maximum(chi, 0.0))
        chi = iat(np.maximum(w - bias, 0.0), ctx.sigma_hat)
    return _finish_inverse(chi, ctx, den.source)
