"""Image corpora and image-encoding pair datasets."""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .encoder import EncoderModel, encode_image
from .errors import ConfigError, EmptyCorpusError, ShapeError
from .images import ImageRecord, flatten_image, resize_image
from .nn import DeterministicRng

log = logging.getLogger(__name__)

DEFAULT_TEST_FRACTION = 0.1
DEFAULT_SPLIT_SEED = 0x5B17
_IMAGE_FORMATS = {"PNG", "JPEG"}


def load_image_dir(path, limit: Optional[int] = None) -> list:
    """Decode PNG/JPEG files in lexicographic filename order.

    Anything else is skipped and counted in a single warning. Grayscale and
    palette images come back as 3-channel RGB.
    """
    try:
        names = sorted(os.listdir(path))
    except OSError as exc:
        raise OSError(f"cannot read image directory {path}: {exc}") from exc
    records, skipped = [], 0
    for name in names:
        if limit is not None and len(records) >= limit:
            break
        full = os.path.join(path, name)
        if not os.path.isfile(full):
            continue
        try:
            with Image.open(full) as img:
                if img.format not in _IMAGE_FORMATS:
                    skipped += 1
                    continue
                pixels = np.asarray(img.convert("RGB"), dtype=np.uint8)
        except (UnidentifiedImageError, OSError):
            skipped += 1
            continue
        records.append(ImageRecord(pixels.copy(), name))
    if skipped:
        log.warning("skipped %d non-image file(s) in %s", skipped, path)
    if not records:
        raise EmptyCorpusError(f"no decodable PNG/JPEG images in {path}")
    return records


def synthetic_images(count: int, height: int, width: int, seed: int = 0,
                     max_shapes: int = 2) -> list:
    """Procedural corpus: a two-colour linear gradient at a random angle,
    overlaid with up to ``max_shapes`` flat-coloured discs or squares."""
    rng = DeterministicRng(seed)
    u = rng.next_uniform
    yy, xx = np.mgrid[0:height, 0:width]
    yy = (yy + 0.5) / height
    xx = (xx + 0.5) / width
    images = []
    for k in range(count):
        c0 = np.array([u(), u(), u()], dtype=np.float64)
        c1 = np.array([u(), u(), u()], dtype=np.float64)
        theta = 2.0 * math.pi * float(u())
        g = (xx - 0.5) * math.cos(theta) + (yy - 0.5) * math.sin(theta)
        g = np.clip(g / math.sqrt(2.0) + 0.5, 0.0, 1.0)[..., None]
        img = c0 * (1.0 - g) + c1 * g
        for _ in range(rng.below(max_shapes + 1)):
            colour = np.array([u(), u(), u()], dtype=np.float64)
            cy, cx = 0.2 + 0.6 * float(u()), 0.2 + 0.6 * float(u())
            r = 0.08 + 0.12 * float(u())
            if u() < 0.5:
                inside = (yy - cy) ** 2 + (xx - cx) ** 2 < r * r
            else:
                inside = (np.abs(yy - cy) < r) & (np.abs(xx - cx) < r)
            img[inside] = colour
        pixels = np.clip(np.floor(img * 255.0 + 0.5), 0, 255).astype(np.uint8)
        images.append(ImageRecord(pixels, f"synthetic-{seed}-{k:06d}"))
    return images


@dataclass
class PairDataset:
    """Row i pairs encoding ``encodings[i]`` with flattened image ``targets[i]``."""

    encodings: np.ndarray  # (m, p) float32
    targets: np.ndarray  # (m, n) float32 in [0, 1]
    image_h: int
    image_w: int
    source_ids: list = field(default_factory=list)
    is_test: Optional[np.ndarray] = None  # (m,) bool; None means all rows are train

    def __post_init__(self):
        if self.encodings.ndim != 2 or self.targets.ndim != 2:
            raise ShapeError("encodings and targets must be 2-D")
        m = self.encodings.shape[0]
        if self.targets.shape[0] != m:
            raise ShapeError(f"{m} encodings but {self.targets.shape[0]} targets")
        if self.targets.shape[1] != self.image_h * self.image_w * 3:
            raise ShapeError(f"targets of length {self.targets.shape[1]} do not match "
                             f"{self.image_h}x{self.image_w}x3")
        if not self.source_ids:
            self.source_ids = [f"row-{i:06d}" for i in range(m)]
        if len(self.source_ids) != m:
            raise ShapeError(f"{len(self.source_ids)} source ids for {m} rows")
        if self.is_test is None:
            self.is_test = np.zeros(m, dtype=bool)

    @property
    def m(self) -> int:
        return self.encodings.shape[0]

    @property
    def p(self) -> int:
        return self.encodings.shape[1]

    @property
    def n(self) -> int:
        return self.targets.shape[1]

    def train(self):
        keep = ~self.is_test
        return self.encodings[keep], self.targets[keep]

    def test(self):
        return self.encodings[self.is_test], self.targets[self.is_test]

    def rows(self, split: str):
        """Indices of ``split`` ('train', 'test' or 'all')."""
        if split == "all":
            return np.arange(self.m)
        if split == "train":
            return np.flatnonzero(~self.is_test)
        if split == "test":
            return np.flatnonzero(self.is_test)
        raise ConfigError(f"unknown split {split!r}")


def build_encoding_pairs(encoder: EncoderModel, images: Sequence[ImageRecord]) -> PairDataset:
    encodings = np.empty((len(images), encoder.p), dtype=np.float32)
    targets = np.empty((len(images), encoder.input_dim), dtype=np.float32)
    for i, image in enumerate(images):
        if (image.height, image.width) != (encoder.image_h, encoder.image_w):
            raise ShapeError(
                f"image {image.source_id!r} is {image.height}x{image.width}; "
                f"encoder expects {encoder.image_h}x{encoder.image_w} (resize first)"
            )
        encodings[i] = encode_image(encoder, image)
        targets[i] = flatten_image(image)
    return PairDataset(encodings, targets, encoder.image_h, encoder.image_w,
                       [img.source_id for img in images])


def prepare_images(images: Sequence[ImageRecord], image_h: int, image_w: int) -> list:
    return [resize_image(img, image_h, image_w) for img in images]


def split_dataset(ds: PairDataset, test_fraction: float = DEFAULT_TEST_FRACTION,
                  seed: int = DEFAULT_SPLIT_SEED) -> PairDataset:
    """Mark the first ``ceil(m * test_fraction)`` rows of a seeded shuffle as test."""
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError(f"test_fraction must be in (0, 1), got {test_fraction}")
    m = ds.m
    if m < 2:
        raise ConfigError(f"need at least 2 pairs to split, got {m}")
    # tolerance keeps e.g. 10 * 0.1 from ceiling up to 2
    n_test = math.ceil(m * test_fraction - 1e-9)
    if n_test < 1 or n_test >= m:
        raise ConfigError(f"split of {m} rows at fraction {test_fraction} leaves one side empty")
    order = DeterministicRng(seed).permutation(m)
    is_test = np.zeros(m, dtype=bool)
    is_test[order[:n_test]] = True
    return PairDataset(ds.encodings, ds.targets, ds.image_h, ds.image_w,
                       list(ds.source_ids), is_test)
