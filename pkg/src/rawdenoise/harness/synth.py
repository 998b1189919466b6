"""Synthetic pseudo-raw scenes and noisy/clean suites at the calibrated sensor settings."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..noisemodel import NoiseParams, make_rng, sample_noisy
from ..rawmodel import BayerImage, load_raw, save_raw

SUITE_BLACK = 2048.0
SUITE_WHITE = 18431.0
SCENE_MAX = 0.9
MANIFEST = "manifest.csv"
MANIFEST_FIELDS = ["image", "camera", "iso", "alpha", "sigma", "seed", "clean_path", "noisy_path"]
CLEAN_SUFFIXES = (".raw16", ".npy", ".png")


@dataclass(frozen=True)
class SensorSetting:
    camera: str
    iso: int
    alpha: float
    sigma: float

    @property
    def params(self) -> NoiseParams:
        return NoiseParams(self.alpha, self.sigma)

    @property
    def label(self) -> str:
        return f"{self.camera}-{self.iso}"


# Calibrated (alpha, sigma) in white-normalized units.
SENSOR_TABLE = (
    SensorSetting("phone", 800, 1.10e-3, 2.20e-3),
    SensorSetting("phone", 1600, 2.30e-3, 4.00e-3),
    SensorSetting("phone", 3200, 4.60e-3, 7.20e-3),
    SensorSetting("phone", 6400, 9.10e-3, 1.30e-2),
    SensorSetting("dslr", 3200, 1.90e-3, 2.50e-3),
    SensorSetting("dslr", 6400, 3.85e-3, 4.50e-3),
    SensorSetting("dslr", 12800, 7.70e-3, 9.00e-3),
    SensorSetting("dslr", 25600, 1.55e-2, 1.63e-2),
)


def sensor_setting(camera: str, iso: int) -> SensorSetting:
    for row in SENSOR_TABLE:
        if row.camera == camera.lower() and row.iso == int(iso):
            return row
    known = ", ".join(r.label for r in SENSOR_TABLE)
    raise KeyError(f"no sensor setting {camera}-{iso}; known: {known}")


# ------------------------------------------------------------------ scenes


def _mosaic(rgb: np.ndarray) -> np.ndarray:
    """RGGB mosaic of a full-resolution (H, W, 3) image."""
    out = rgb[..., 1].copy()
    out[0::2, 0::2] = rgb[0::2, 0::2, 0]
    out[1::2, 1::2] = rgb[1::2, 1::2, 2]
    return out


def pink_field(rng, size: int, exponent: float = 1.0) -> np.ndarray:
    """Zero-mean, unit-std random field with a ``1 / f**exponent`` amplitude spectrum."""
    f = np.fft.fftfreq(size)
    radius = np.hypot(f[:, None], f[None, :])
    radius[0, 0] = 1.0
    spec = (rng.standard_normal((size, size)) + 1j * rng.standard_normal((size, size))) / radius ** exponent
    spec[0, 0] = 0.0
    field_ = np.fft.ifft2(spec).real
    return field_ / field_.std()


def _layout(rng, yy, xx) -> np.ndarray:
    tint = rng.uniform(0.5, 1.0, 3)
    base = 0.08 + 0.45 * (rng.uniform(0.3, 1) * xx + rng.uniform(0, 0.5) * yy)
    base = base + 0.05 * np.sin(2 * np.pi * (xx * rng.uniform(0.5, 1.5) + rng.uniform()))
    rgb = base[..., None] * tint
    for _ in range(rng.integers(6, 10)):
        level = rng.choice([rng.uniform(0.005, 0.05), rng.uniform(0.1, 0.85)], p=[0.25, 0.75])
        colour = level * rng.uniform(0.4, 1.0, 3)
        cy, cx = rng.uniform(0.1, 0.9, 2)
        r = rng.uniform(0.08, 0.2)
        if rng.uniform() < 0.5:
            m = (np.abs(yy - cy) < r) & (np.abs(xx - cx) < r * rng.uniform(0.6, 1.4))
        else:
            m = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
        rgb[m] = colour
    rgb[yy + xx < 0.25] *= 0.05  # dark corner
    ty, tx = rng.uniform(0.1, 0.6, 2)
    tm = (yy > ty) & (yy < ty + 0.3) & (xx > tx) & (xx < tx + 0.3)
    f = rng.uniform(20, 40)
    grating = 0.5 + 0.5 * np.sin(2 * np.pi * f * (xx + 0.7 * yy)) * np.cos(2 * np.pi * 0.6 * f * yy)
    rgb[tm] = (0.1 + 0.6 * grating[tm])[:, None] * tint
    return rgb


SCENE_KINDS = ("natural", "mixed", "flat")
TEXTURE_AMPLITUDE = 0.05


def procedural_scene(seed, size: int = 512, kind: str = "natural") -> np.ndarray:
    """Clean normalized RGGB frame with values in ``[0, 0.9]``.

    ``mixed`` scenes combine a smooth gradient, flat coloured shapes, a dark corner and a
    grating patch.  ``natural`` scenes add multiplicative 1/f micro-texture (5% contrast)
    over most of a mixed layout, leaving a few patches perfectly flat.  ``flat`` scenes
    are a chart of constant tiles at graded levels.
    """
    if size % 2:
        raise ValueError("scene size must be even")
    if kind not in SCENE_KINDS:
        raise ValueError(f"unknown scene kind {kind!r}")
    rng = make_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / size
    if kind == "flat":
        tiles = 4
        levels = np.geomspace(0.01, 0.85, tiles * tiles)
        rng.shuffle(levels)
        idx = np.minimum((yy * tiles).astype(int), tiles - 1) * tiles + np.minimum((xx * tiles).astype(int), tiles - 1)
        return levels[idx]
    rgb = _layout(rng, yy, xx)
    if kind == "natural":
        texture = pink_field(rng, size, 1.0)
        textured = pink_field(rng, size, 2.0) > -0.3
        rgb = rgb * (1.0 + TEXTURE_AMPLITUDE * texture * textured)[..., None]
    return np.clip(_mosaic(rgb), 0.0, SCENE_MAX)


def write_procedural_scenes(out_dir, count: int, seed=0, size: int = 512, kind: str = "natural") -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seeds = np.random.SeedSequence(seed).spawn(count)
    paths = []
    for i, ss in enumerate(seeds):
        path = out_dir / f"{kind}_{i:03d}.npy"
        np.save(path, procedural_scene(ss, size, kind))
        paths.append(path)
    return paths


def load_clean(path) -> np.ndarray:
    """Load a clean source as a normalized RGGB frame in ``[0, 0.9]``.

    ``.raw16`` frames are black/white normalized.  ``.npy`` arrays are taken as linear and
    rescaled only if they exceed the scene ceiling.  ``.png`` images are linearized with a
    2.2 gamma and mosaicked.  Odd dimensions are cropped.
    """
    path = Path(path)
    if path.suffix == ".raw16":
        img = load_raw(path)
        arr = (img.data - img.black_level) / img.dynamic_range
    elif path.suffix == ".npy":
        arr = np.load(path).astype(np.float64)
        if arr.ndim == 3:
            arr = _mosaic(arr)
    elif path.suffix == ".png":
        from PIL import Image

        pix = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
        arr = _mosaic(pix ** 2.2)
    else:
        raise ValueError(f"unsupported clean source {path}")
    if arr.ndim != 2:
        raise ValueError(f"{path}: expected a 2-D frame, got shape {arr.shape}")
    arr = arr[: arr.shape[0] // 2 * 2, : arr.shape[1] // 2 * 2]
    arr = np.clip(arr, 0.0, None)
    top = arr.max()
    if top > SCENE_MAX:
        arr = arr * (SCENE_MAX / top)
    return arr


def to_bayer(norm: np.ndarray, black: float = SUITE_BLACK, white: float = SUITE_WHITE, tag=None,
             quantize: bool = True) -> BayerImage:
    dn = black + np.asarray(norm) * (white - black)
    if quantize:
        # clip to the container only: the noise model has no saturation
        dn = np.clip(np.rint(dn), 0, 65535)
    return BayerImage(dn, "RGGB", black, white, tag)


def synth_pair(clean: np.ndarray, params: NoiseParams, seed, tag=None) -> tuple[BayerImage, BayerImage]:
    """Noisy and clean BayerImages in DN for a normalized clean frame."""
    noisy = sample_noisy(clean, params, seed)
    return to_bayer(noisy, tag=tag), to_bayer(clean, tag=tag, quantize=False)


def make_synthetic_suite(clean_dir, params_table=SENSOR_TABLE, seed=0, out_dir=None) -> Path:
    """Write a noisy/clean pair for every clean source and sensor setting; return the manifest path.

    Every pair has its own seed derived from ``seed``, the image index and the setting index,
    so the suite is byte-identical for a given seed.
    """
    clean_dir = Path(clean_dir)
    sources = sorted(p for p in clean_dir.iterdir() if p.suffix in CLEAN_SUFFIXES) if clean_dir.is_dir() else []
    if not sources:
        raise FileNotFoundError(f"no clean images ({', '.join(CLEAN_SUFFIXES)}) in {clean_dir}")
    out_dir = Path(out_dir) if out_dir is not None else clean_dir.parent / "suite"
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, src in enumerate(sources):
        clean = load_clean(src)
        clean_path = save_raw(to_bayer(clean, tag=src.stem), out_dir / "clean" / src.stem)
        for j, setting in enumerate(params_table):
            pair_seed = [int(seed), i, j]
            noisy, _ = synth_pair(clean, setting.params, np.random.SeedSequence(pair_seed), tag=src.stem)
            noisy_path = save_raw(noisy, out_dir / setting.label / src.stem)
            rows.append({"image": src.stem, "camera": setting.camera, "iso": setting.iso,
                         "alpha": setting.alpha, "sigma": setting.sigma, "seed": "-".join(map(str, pair_seed)),
                         "clean_path": clean_path.relative_to(out_dir).as_posix(),
                         "noisy_path": noisy_path.relative_to(out_dir).as_posix()})
    manifest = out_dir / MANIFEST
    with manifest.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS)
        writer.writeheader()
        writer.writerows(rows)
    return manifest


@dataclass(frozen=True)
class SuiteEntry:
    image: str
    setting: SensorSetting
    clean_path: Path
    noisy_path: Path

    def load(self) -> tuple[BayerImage, BayerImage]:
        return load_raw(self.noisy_path), load_raw(self.clean_path)


def read_manifest(path) -> list[SuiteEntry]:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST
    root = path.parent
    with path.open(newline="") as fh:
        return [SuiteEntry(r["image"], SensorSetting(r["camera"], int(r["iso"]), float(r["alpha"]), float(r["sigma"])),
                           root / r["clean_path"], root / r["noisy_path"]) for r in csv.DictReader(fh)]
