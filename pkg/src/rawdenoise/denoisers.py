"""SNR-guided AWGN denoisers.

Every denoiser maps a [0, 1]-scaled stack of planes plus a noise standard deviation to an
image of the same shape.  Two classical implementations are included, plus a bridge that
pipes frames through an external process so a trained network can be plugged in.
"""
from __future__ import annotations

import logging
import math
import shlex
import struct
import subprocess
import sys
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import fft, ndimage

from .noisemodel import make_rng

log = logging.getLogger(__name__)

PASS_THROUGH_SIGMA = 1e-4
DEFAULT_MULTIPLIER = 1.03

PROTOCOL_MAGIC = b"YDNZ"
PROTOCOL_VERSION = 1
_HEADER = struct.Struct("<4sIIIIf")


@dataclass(frozen=True)
class DenoiserGuidance:
    sigma_snr: float
    multiplier: float = DEFAULT_MULTIPLIER

    def __post_init__(self):
        if not self.sigma_snr > 0:
            raise ValueError(f"sigma_snr must be positive, got {self.sigma_snr}")
        if not self.multiplier > 0:
            raise ValueError(f"multiplier must be positive, got {self.multiplier}")

    @property
    def effective(self) -> float:
        return self.multiplier * self.sigma_snr


class Denoiser:
    """Base class; subclasses implement ``_run(image, sigma)`` on a (C, H, W) float array."""

    name = "base"

    def __call__(self, image, sigma: float) -> np.ndarray:
        image = np.asarray(image, dtype=np.float64)
        if not sigma > 0:
            raise ValueError(f"noise level must be positive, got {sigma}")
        if sigma < PASS_THROUGH_SIGMA:
            return image.copy()
        if image.ndim == 2:
            return self._run(image[None], float(sigma))[0]
        return self._run(image, float(sigma))

    def denoise(self, image, guidance: DenoiserGuidance) -> np.ndarray:
        return self(image, guidance.effective)

    def _run(self, image: np.ndarray, sigma: float) -> np.ndarray:
        raise NotImplementedError


class IdentityDenoiser(Denoiser):
    name = "identity"

    def _run(self, image, sigma):
        return image.copy()


class GaussianDenoiser(Denoiser):
    """Gaussian smoothing with kernel std ``scale * sigma`` pixels."""

    name = "gaussian"

    def __init__(self, scale: float = 20.0, max_radius: float = 8.0):
        self.scale = scale
        self.max_radius = max_radius

    def _run(self, image, sigma):
        width = min(self.scale * sigma, self.max_radius)
        return np.stack([ndimage.gaussian_filter(p, width, mode="mirror") for p in image])


class DCTDenoiser(Denoiser):
    """Sliding-block DCT hard thresholding with uniform overlap-add.

    Blocks of ``block x block`` pixels on a ``stride`` grid; AC coefficients below
    ``threshold * sigma`` are zeroed, the DC term is always kept.  With ``wiener`` a second
    pass shrinks the noisy coefficients by ``pilot^2 / (pilot^2 + sigma^2)`` using the
    first pass as pilot.
    """

    name = "dct"

    def __init__(self, block: int = 8, stride: int = 4, threshold: float = 3.0, wiener: bool = True,
                 chunk_rows: int = 64):
        if block % stride:
            raise ValueError("block size must be a multiple of the stride")
        self.block, self.stride, self.threshold, self.wiener = block, stride, threshold, wiener
        self.chunk_rows = chunk_rows

    def _run(self, image, sigma):
        return np.stack([self.denoise_plane(p, sigma) for p in image])

    def _pad(self, plane):
        lead = self.block - self.stride
        tail = lead + (-plane.shape[0]) % self.stride, lead + (-plane.shape[1]) % self.stride
        mode = "reflect" if min(plane.shape) > max(tail) else "symmetric"
        return np.pad(plane, ((lead, tail[0]), (lead, tail[1])), mode=mode), lead

    def denoise_plane(self, plane, sigma: float) -> np.ndarray:
        plane = np.asarray(plane, dtype=np.float64)
        padded, lead = self._pad(plane)
        out = self._pass(padded, None, sigma)
        if self.wiener and sigma > 0:
            out = self._pass(padded, out, sigma)
        h, w = plane.shape
        return out[lead:lead + h, lead:lead + w]

    def _pass(self, noisy, pilot, sigma):
        b, s = self.block, self.stride
        views = sliding_window_view(noisy, (b, b))[::s, ::s]
        pviews = None if pilot is None else sliding_window_view(pilot, (b, b))[::s, ::s]
        nr, nc = views.shape[:2]
        k = b // s
        acc = np.zeros((nr + k - 1, nc + k - 1, s, s))
        for r0 in range(0, nr, self.chunk_rows):
            r1 = min(nr, r0 + self.chunk_rows)
            coef = fft.dctn(views[r0:r1], axes=(2, 3), norm="ortho")
            if pviews is None:
                keep = np.abs(coef) >= self.threshold * sigma
                keep[..., 0, 0] = True
                coef = np.where(keep, coef, 0.0)
            else:
                pc = fft.dctn(pviews[r0:r1], axes=(2, 3), norm="ortho")
                gain = pc * pc / (pc * pc + sigma * sigma)
                gain[..., 0, 0] = 1.0
                coef = coef * gain
            blocks = fft.idctn(coef, axes=(2, 3), norm="ortho")
            for a in range(k):
                for c in range(k):
                    acc[r0 + a:r1 + a, c:c + nc] += blocks[:, :, a * s:(a + 1) * s, c * s:(c + 1) * s]
        tiles = acc.transpose(0, 2, 1, 3).reshape(acc.shape[0] * s, acc.shape[1] * s)
        return tiles / (k * k)


# --------------------------------------------------------------- external bridge


class ExternalDenoiserError(RuntimeError):
    pass


class ProtocolError(ExternalDenoiserError):
    pass


def encode_frame(image: np.ndarray, sigma: float) -> bytes:
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[None]
    c, h, w = image.shape
    header = _HEADER.pack(PROTOCOL_MAGIC, PROTOCOL_VERSION, c, h, w, sigma)
    return header + np.ascontiguousarray(image, dtype="<f4").tobytes()


def decode_frame(blob: bytes) -> tuple[np.ndarray, float]:
    if len(blob) < _HEADER.size:
        raise ProtocolError(f"frame too short for a header ({len(blob)} bytes)")
    magic, version, c, h, w, sigma = _HEADER.unpack_from(blob)
    if magic != PROTOCOL_MAGIC:
        raise ProtocolError(f"bad magic {magic!r}")
    if version != PROTOCOL_VERSION:
        raise ProtocolError(f"unsupported protocol version {version}")
    payload = blob[_HEADER.size:]
    if len(payload) != 4 * c * h * w:
        raise ProtocolError(f"payload has {len(payload)} bytes, header promises {4 * c * h * w}")
    return np.frombuffer(payload, dtype="<f4").reshape(c, h, w), sigma


class ExternalDenoiser(Denoiser):
    """Runs ``command`` once per call, exchanging one frame over stdin/stdout."""

    name = "external"

    def __init__(self, command, timeout: float | None = None):
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        if not self.command:
            raise ValueError("external denoiser command is empty")
        self.timeout = timeout

    def _run(self, image, sigma):
        try:
            proc = subprocess.run(self.command, input=encode_frame(image, sigma),
                                  capture_output=True, timeout=self.timeout)
        except (OSError, subprocess.TimeoutExpired) as exc:
            raise ExternalDenoiserError(f"could not run {self.command[0]}: {exc}") from exc
        if proc.returncode != 0:
            raise ExternalDenoiserError(
                f"{self.command[0]} exited with status {proc.returncode}: "
                f"{proc.stderr.decode(errors='replace').strip()}")
        out, _ = decode_frame(proc.stdout)
        if out.shape != image.shape:
            raise ProtocolError(f"reply shape {out.shape} does not match request {image.shape}")
        return out.astype(np.float64)


def serve(fn, stdin=None, stdout=None) -> None:
    """Answer one request on stdin with ``fn(image, sigma)``; for writing external denoisers in Python."""
    stdin = stdin or sys.stdin.buffer
    stdout = stdout or sys.stdout.buffer
    image, sigma = decode_frame(stdin.read())
    stdout.write(encode_frame(np.asarray(fn(image, sigma), dtype=np.float32), sigma))
    stdout.flush()


# ----------------------------------------------------------- iterative strategy


@dataclass(frozen=True)
class IterConfig:
    """Settings of the DDIM-style iterative strategy.

    Give either ``gamma`` directly or ``sigma_target``, the guidance level wanted at the last
    step, from which ``gamma = (sigma_target / sigma_snr) ** (1 / (T - 1))``.
    """

    T: int = 10
    eta: float = 0.8
    gamma: float | None = None
    sigma_target: float = 5.0 / 255.0
    seed: int | None = 0

    def __post_init__(self):
        if int(self.T) != self.T or self.T < 1:
            raise ValueError(f"T must be a positive integer, got {self.T}")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError(f"eta must lie in [0, 1], got {self.eta}")
        if self.gamma is not None and not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.gamma is None and not self.sigma_target > 0:
            raise ValueError("sigma_target must be positive")

    def decay(self, sigma_snr: float) -> float:
        if self.gamma is not None:
            return self.gamma
        if self.T < 2:
            return 1.0
        g = (self.sigma_target / sigma_snr) ** (1.0 / (self.T - 1))
        if g >= 1.0:
            log.warning("target sigma %.4g is not below sigma_snr %.4g; noise level held constant",
                        self.sigma_target, sigma_snr)
            return 1.0
        return g


def iterative_denoise(x_T, denoiser, guidance: DenoiserGuidance, cfg: IterConfig, on_step=None):
    """DDIM-based iterative denoising.

    The predicted noise is always recomputed from the original input ``x_T``.  Each call of
    ``denoiser`` uses the guidance multiplier on top of the scheduled level.  ``on_step`` is
    called as ``on_step(t, sigma_t)`` before every refinement.
    """
    x_T = np.asarray(x_T, dtype=np.float64)
    s0, m = guidance.sigma_snr, guidance.multiplier
    gamma = cfg.decay(s0)
    T = cfg.T
    x0 = denoiser(x_T, m * s0)
    rng = make_rng(cfg.seed) if cfg.eta < 1.0 else None
    mix = math.sqrt(1.0 - cfg.eta ** 2)
    sigma_t = s0
    for t in range(T - 1, 0, -1):
        eps = gamma ** (T - t - 1) * (x_T - x0)
        if rng is not None:
            eps = cfg.eta * eps + mix * sigma_t * rng.standard_normal(x_T.shape)
        x_t = x0 + gamma * eps
        sigma_t = gamma ** (T - t) * s0
        if on_step is not None:
            on_step(t, sigma_t)
        x0 = denoiser(x_t, m * sigma_t)
    return x0


DENOISERS = {"dct": DCTDenoiser, "gaussian": GaussianDenoiser, "identity": IdentityDenoiser}


if __name__ == "__main__":
    serve(lambda image, sigma: image)
