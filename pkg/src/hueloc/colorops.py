"""Pixel-level color primitives: hue rotation, CFA mosaic/demosaic, JPEG round-trips.

Images are plain ``uint8`` numpy arrays of shape (H, W, 3) in RGB order.
"""
from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

CHANNELS = "RGB"

# 4:4:4 chroma at and above this quality, 4:2:0 below.
JPEG_FULL_CHROMA_QF = 95


class DimensionError(ValueError):
    pass


class ParameterError(ValueError):
    pass


def as_raster(img) -> np.ndarray:
    """Validate and return ``img`` as an (H, W, 3) uint8 array."""
    arr = np.asarray(img)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise DimensionError(f"expected an HxWx3 raster, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        if np.issubdtype(arr.dtype, np.floating) and not np.all(np.isfinite(arr)):
            raise ParameterError("raster contains non-finite values")
        if arr.min() < 0 or arr.max() > 255:
            raise ParameterError("channel values must lie in [0, 255]")
        arr = arr.astype(np.uint8)
    return arr


def quantize(x: np.ndarray) -> np.ndarray:
    """Round half away from zero and clip to 8 bits."""
    return np.clip(np.sign(x) * np.floor(np.abs(x) + 0.5), 0, 255).astype(np.uint8)


# --------------------------------------------------------------------------- hue

def rgb_to_hsv(rgb: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Hexcone RGB -> HSV. Hue in degrees [0, 360), s and v in [0, 1]."""
    x = np.asarray(rgb, dtype=np.float64) / 255.0
    r, g, b = x[..., 0], x[..., 1], x[..., 2]
    v = x.max(axis=-1)
    c = v - x.min(axis=-1)
    s = np.divide(c, v, out=np.zeros_like(v), where=v > 0)
    safe_c = np.where(c > 0, c, 1.0)
    h = np.where(
        v == r,
        np.mod((g - b) / safe_c, 6.0),
        np.where(v == g, (b - r) / safe_c + 2.0, (r - g) / safe_c + 4.0),
    )
    h = np.where(c > 0, h * 60.0, 0.0)
    return np.mod(h, 360.0), s, v


_CHANNEL_OFFSET = (5.0, 3.0, 1.0)


def _hsv_channel(h, s, v, channel: int):
    k = np.mod(_CHANNEL_OFFSET[channel] + np.mod(h, 360.0) / 60.0, 6.0)
    return (v - v * s * np.clip(np.minimum(k, 4.0 - k), 0.0, 1.0)) * 255.0


def hsv_to_rgb(h: np.ndarray, s: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Hexcone HSV -> RGB as floats in [0, 255] (not quantized)."""
    return np.stack([_hsv_channel(h, s, v, c) for c in range(3)], axis=-1)


def hue_rotate(img, angle: int) -> np.ndarray:
    """Add ``angle`` degrees to the hue of every pixel; S and V are kept."""
    img = as_raster(img)
    angle = int(angle) % 360
    if angle == 0:
        return img.copy()
    h, s, v = rgb_to_hsv(img)
    return quantize(hsv_to_rgb(h + angle, s, v))


def hue_rotated_channel(hsv: tuple, angle: int, channel: int) -> np.ndarray:
    """One channel of ``hue_rotate`` given a precomputed ``rgb_to_hsv`` triple and
    the original image (needed for the exact identity at angle 0)."""
    h, s, v, img = hsv
    angle = int(angle) % 360
    if angle == 0:
        return img[..., channel].copy()
    return quantize(_hsv_channel(h + angle, s, v, channel))


# --------------------------------------------------------------------------- CFA

@dataclass(frozen=True)
class CfaPattern:
    """2x2 Bayer layout read row-major, e.g. ``"GBRG"``."""

    layout: str = "GBRG"

    def __post_init__(self):
        layout = self.layout.upper()
        if len(layout) != 4 or sorted(layout) != sorted("BGGR"):
            raise ParameterError(f"invalid CFA layout {self.layout!r}")
        object.__setattr__(self, "layout", layout)

    def channel_grid(self) -> np.ndarray:
        return np.array([CHANNELS.index(c) for c in self.layout]).reshape(2, 2)

    def labels(self, height: int, width: int, offset: tuple[int, int] = (0, 0)) -> np.ndarray:
        """Channel index (0=R, 1=G, 2=B) recorded at every pixel of an H x W region
        whose top-left corner sits at ``offset`` in the tiled pattern."""
        rows = (np.arange(height) + offset[0]) % 2
        cols = (np.arange(width) + offset[1]) % 2
        return self.channel_grid()[rows[:, None], cols[None, :]]

    def green_mask(self, height: int, width: int, offset: tuple[int, int] = (0, 0)) -> np.ndarray:
        return self.labels(height, width, offset) == 1


GBRG = CfaPattern("GBRG")


@dataclass
class Mosaic:
    values: np.ndarray  # H x W uint8
    pattern: CfaPattern

    @property
    def labels(self) -> np.ndarray:
        return self.pattern.labels(*self.values.shape)


def cfa_mosaic(img, pattern: CfaPattern = GBRG) -> Mosaic:
    img = as_raster(img)
    H, W = img.shape[:2]
    if H % 2 or W % 2:
        raise DimensionError(f"CFA mosaicing needs even dimensions, got {H}x{W}")
    labels = pattern.labels(H, W)
    values = np.take_along_axis(img, labels[..., None], axis=2)[..., 0]
    return Mosaic(values.copy(), pattern)


_GREEN_KERNEL = np.array([[0, 1, 0], [1, 4, 1], [0, 1, 0]], dtype=np.float64)
_RB_KERNEL = np.array([[1, 2, 1], [2, 4, 2], [1, 2, 1]], dtype=np.float64)


def demosaic_bilinear(mosaic: Mosaic, pattern: CfaPattern | None = None) -> np.ndarray:
    """Fill missing channels with the mean of the nearest recorded same-channel
    neighbours (2 or 4; fewer at borders). Recorded samples are copied as-is."""
    pattern = pattern or mosaic.pattern
    values = np.asarray(mosaic.values)
    labels = pattern.labels(*values.shape)
    out = np.empty(values.shape + (3,), dtype=np.uint8)
    for c in range(3):
        present = (labels == c).astype(np.float64)
        kernel = _GREEN_KERNEL if c == 1 else _RB_KERNEL
        num = ndimage.correlate(values * present, kernel, mode="constant")
        den = ndimage.correlate(present, kernel, mode="constant")
        interp = quantize(num / den)
        out[..., c] = np.where(labels == c, values, interp)
    return out


def simulate_camera(img, pattern: CfaPattern = GBRG) -> np.ndarray:
    """Mosaic then bilinear-demosaic, the stand-in for raw decoding."""
    return demosaic_bilinear(cfa_mosaic(img, pattern), pattern)


# --------------------------------------------------------------------------- JPEG

def _check_qf(qf: int) -> int:
    if isinstance(qf, bool) or int(qf) != qf or not 1 <= qf <= 100:
        raise ParameterError(f"JPEG quality must be an integer in [1, 100], got {qf!r}")
    return int(qf)


def jpeg_encode(img, qf: int) -> bytes:
    qf = _check_qf(qf)
    img = as_raster(img)
    subsampling = 0 if qf >= JPEG_FULL_CHROMA_QF else 2
    buf = io.BytesIO()
    Image.fromarray(img, "RGB").save(
        buf, format="JPEG", quality=qf, subsampling=subsampling, optimize=False, progressive=False
    )
    return buf.getvalue()


def jpeg_decode(data: bytes) -> np.ndarray:
    with Image.open(io.BytesIO(data)) as im:
        return np.asarray(im.convert("RGB")).copy()


def jpeg_roundtrip(img, qf: int) -> np.ndarray:
    return jpeg_decode(jpeg_encode(img, qf))


# --------------------------------------------------------------------------- files

def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB")).copy()


def write_png(path, img) -> None:
    Image.fromarray(as_raster(img), "RGB").save(Path(path), format="PNG")


def write_jpeg(path, img, qf: int) -> None:
    Path(path).write_bytes(jpeg_encode(img, qf))


def read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 127


def write_mask(path, mask: np.ndarray) -> None:
    Image.fromarray(np.asarray(mask, dtype=bool)).convert("1").save(Path(path), format="PNG")
