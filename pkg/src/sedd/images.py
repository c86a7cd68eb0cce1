"""8-bit RGB images and conversion to/from network vectors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError, ShapeError


@dataclass
class ImageRecord:
    pixels: np.ndarray  # (height, width, 3) uint8
    source_id: str = ""

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3:
            raise FormatError(f"{self.source_id or 'image'}: expected RGB pixels (h, w, 3), got shape {px.shape}")
        if px.dtype != np.uint8:
            raise FormatError(f"{self.source_id or 'image'}: expected uint8 pixels, got {px.dtype}")
        self.pixels = px

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def __eq__(self, other):
        if not isinstance(other, ImageRecord):
            return NotImplemented
        return self.pixels.shape == other.pixels.shape and bool(np.array_equal(self.pixels, other.pixels))


def flatten_image(image: ImageRecord) -> np.ndarray:
    """Row-major pixels with r, g, b interleaved, scaled to [0, 1]."""
    if image.pixels.ndim != 3 or image.pixels.shape[2] != 3:
        raise FormatError(f"expected 3 channels, got shape {image.pixels.shape}")
    return image.pixels.reshape(-1).astype(np.float32) / np.float32(255.0)


def quantize(values: np.ndarray) -> np.ndarray:
    """[0, 1] floats to uint8 by round-half-up of ``v * 255``, clamped."""
    scaled = np.floor(np.asarray(values, dtype=np.float64) * 255.0 + 0.5)
    return np.clip(scaled, 0, 255).astype(np.uint8)


def reshape_to_image(y: np.ndarray, image_h: int, image_w: int, source_id: str = "") -> ImageRecord:
    """Inverse of :func:`flatten_image` followed by 8-bit quantization."""
    y = np.asarray(y)
    n = image_h * image_w * 3
    if y.ndim != 1 or y.shape[0] != n:
        raise ShapeError(f"cannot reshape vector of shape {y.shape} into {image_h}x{image_w}x3 (needs {n})")
    return ImageRecord(quantize(y).reshape(image_h, image_w, 3), source_id)


def _bilinear_axis(in_size: int, out_size: int):
    # half-pixel centres: output pixel k samples input coordinate (k + 0.5) * in/out - 0.5
    src = (np.arange(out_size, dtype=np.float64) + 0.5) * (in_size / out_size) - 0.5
    src = np.clip(src, 0.0, in_size - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, in_size - 1)
    return lo, hi, src - lo


def resize_image(image: ImageRecord, target_h: int, target_w: int) -> ImageRecord:
    """Bilinear resize per channel, half-pixel-centred sample coordinates."""
    if target_h <= 0 or target_w <= 0:
        raise ConfigError(f"resize target must be positive, got {target_h}x{target_w}")
    if (target_h, target_w) == (image.height, image.width):
        return ImageRecord(image.pixels.copy(), image.source_id)
    px = image.pixels.astype(np.float64)
    r0, r1, fr = _bilinear_axis(image.height, target_h)
    c0, c1, fc = _bilinear_axis(image.width, target_w)
    rows = px[r0] * (1.0 - fr)[:, None, None] + px[r1] * fr[:, None, None]
    out = rows[:, c0] * (1.0 - fc)[None, :, None] + rows[:, c1] * fc[None, :, None]
    out = np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)
    return ImageRecord(out, image.source_id)
