"""Bayer raw frames: packing into R/G1/G2/B planes, normalization, file I/O and a preview ISP."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

CFA_PATTERNS = ("RGGB", "BGGR", "GRBG", "GBRG")

# (row, col) offset of R, G1, G2, B inside the 2x2 tile; G1 shares a row with R.
CFA_OFFSETS = {
    "RGGB": ((0, 0), (0, 1), (1, 0), (1, 1)),
    "BGGR": ((1, 1), (1, 0), (0, 1), (0, 0)),
    "GRBG": ((0, 1), (0, 0), (1, 1), (1, 0)),
    "GBRG": ((1, 0), (1, 1), (0, 0), (0, 1)),
}

RAW_SUFFIX = ".raw16"
SIDECAR_SUFFIX = ".json"


class RawFormatError(ValueError):
    """Malformed raw payload or sidecar."""


def _check_cfa(cfa: str) -> str:
    if cfa not in CFA_OFFSETS:
        raise RawFormatError(f"unknown CFA pattern {cfa!r}; expected one of {CFA_PATTERNS}")
    return cfa


@dataclass(frozen=True)
class BayerImage:
    data: np.ndarray = field(repr=False)
    cfa: str = "RGGB"
    black_level: float = 0.0
    white_level: float = 65535.0
    tag: str | None = None

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if data.ndim != 2:
            raise ValueError(f"Bayer data must be 2-D, got shape {data.shape}")
        if data.shape[0] % 2 or data.shape[1] % 2:
            raise ValueError(f"Bayer dimensions must be even, got {data.shape[1]}x{data.shape[0]}")
        _check_cfa(self.cfa)
        if not self.black_level < self.white_level:
            raise ValueError("black_level must be below white_level")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def dynamic_range(self) -> float:
        return float(self.white_level - self.black_level)

    def with_data(self, data) -> "BayerImage":
        return replace(self, data=data)

    def meta(self) -> dict:
        out = {"width": self.width, "height": self.height, "cfa": self.cfa,
               "black_level": self.black_level, "white_level": self.white_level}
        if self.tag is not None:
            out["tag"] = self.tag
        return out


@dataclass(frozen=True)
class PackedPlanes:
    """Four half-resolution planes in canonical R, G1, G2, B order."""

    planes: np.ndarray = field(repr=False)
    cfa: str = "RGGB"
    black_level: float = 0.0
    white_level: float = 65535.0
    tag: str | None = None

    def __post_init__(self):
        planes = np.array(self.planes, dtype=np.float64)
        if planes.ndim != 3 or planes.shape[0] != 4:
            raise ValueError(f"expected 4 planes of equal shape, got array of shape {planes.shape}")
        _check_cfa(self.cfa)
        planes.setflags(write=False)
        object.__setattr__(self, "planes", planes)

    def stack(self) -> np.ndarray:
        return self.planes

    def with_planes(self, planes) -> "PackedPlanes":
        return replace(self, planes=planes)

    @property
    def dynamic_range(self) -> float:
        return float(self.white_level - self.black_level)


def pack(img: BayerImage) -> PackedPlanes:
    h, w = img.data.shape
    if h % 2 or w % 2:
        raise ValueError("pack requires even dimensions")
    planes = np.stack([img.data[dr::2, dc::2] for dr, dc in CFA_OFFSETS[img.cfa]])
    return PackedPlanes(planes, img.cfa, img.black_level, img.white_level, img.tag)


def unpack(planes) -> BayerImage:
    """Inverse of :func:`pack`.  Accepts PackedPlanes or a sequence of four equal-shape arrays (RGGB)."""
    if isinstance(planes, PackedPlanes):
        arrs, meta = list(planes.planes), planes
    else:
        arrs, meta = [np.asarray(p, dtype=np.float64) for p in planes], None
    if len(arrs) != 4:
        raise ValueError(f"unpack needs 4 planes, got {len(arrs)}")
    shape = arrs[0].shape
    if any(a.shape != shape for a in arrs) or len(shape) != 2:
        raise ValueError(f"plane shapes differ: {[a.shape for a in arrs]}")
    cfa = meta.cfa if meta else "RGGB"
    out = np.empty((2 * shape[0], 2 * shape[1]))
    for a, (dr, dc) in zip(arrs, CFA_OFFSETS[cfa]):
        out[dr::2, dc::2] = a
    if meta is None:
        return BayerImage(out, cfa)
    return BayerImage(out, cfa, meta.black_level, meta.white_level, meta.tag)


def normalize(data, black_level: float, gain: float) -> np.ndarray:
    """Map DN to electrons, ``(y - black) / gain``."""
    return (np.asarray(data, dtype=np.float64) - black_level) / gain


def denormalize(chi, black_level: float, gain: float) -> np.ndarray:
    return np.asarray(chi, dtype=np.float64) * gain + black_level


def _paths(path) -> tuple[Path, Path]:
    path = Path(path)
    if path.suffix in (RAW_SUFFIX, SIDECAR_SUFFIX):
        path = path.with_suffix("")
    return path.with_name(path.name + RAW_SUFFIX), path.with_name(path.name + SIDECAR_SUFFIX)


def save_raw(img: BayerImage, path) -> Path:
    """Write ``<name>.raw16`` (little-endian uint16) and its ``<name>.json`` sidecar.

    Values are rounded and clipped to the 16-bit range.
    """
    raw_path, meta_path = _paths(path)
    payload = np.clip(np.rint(img.data), 0, 65535).astype("<u2")
    raw_path.parent.mkdir(parents=True, exist_ok=True)
    raw_path.write_bytes(payload.tobytes())
    meta_path.write_text(json.dumps(img.meta(), indent=2) + "\n")
    return raw_path


def load_raw(path) -> BayerImage:
    raw_path, meta_path = _paths(path)
    if not meta_path.exists():
        raise FileNotFoundError(f"missing sidecar {meta_path}")
    try:
        meta = json.loads(meta_path.read_text())
        width, height = int(meta["width"]), int(meta["height"])
        cfa = str(meta["cfa"])
        black, white = float(meta["black_level"]), float(meta["white_level"])
    except (KeyError, TypeError, ValueError) as exc:
        raise RawFormatError(f"{meta_path}: bad sidecar ({exc})") from exc
    _check_cfa(cfa)
    blob = raw_path.read_bytes()
    if len(blob) != width * height * 2:
        raise RawFormatError(
            f"{raw_path}: payload is {len(blob)} bytes, expected {width * height * 2} for {width}x{height}")
    data = np.frombuffer(blob, dtype="<u2").reshape(height, width)
    return BayerImage(data, cfa, black, white, meta.get("tag"))


def preview_isp(img: BayerImage, gamma: float = 2.2) -> np.ndarray:
    """Half-resolution 8-bit RGB preview: black subtraction, white scaling, G averaging, gamma."""
    r, g1, g2, b = pack(img).planes
    rgb = np.stack([r, 0.5 * (g1 + g2), b], axis=-1)
    lin = np.clip((rgb - img.black_level) / img.dynamic_range, 0.0, 1.0)
    return np.clip(np.rint(255.0 * lin ** (1.0 / gamma)), 0, 255).astype(np.uint8)


def save_png(rgb: np.ndarray, path) -> None:
    from PIL import Image

    Image.fromarray(np.asarray(rgb, dtype=np.uint8)).save(path)
