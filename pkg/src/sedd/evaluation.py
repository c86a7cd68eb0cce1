"""Reconstruction metrics, the mean-image baseline and the adversary experiment."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .dataset import DEFAULT_TEST_FRACTION, PairDataset, build_encoding_pairs, split_dataset
from .decoder import (DEFAULT_HIDDEN_SIZES, DecoderModel, TrainingConfig, decode_vectors,
                      init_decoder, train_decoder)
from .encoder import EncoderModel
from .errors import ConfigError, ExperimentValidityError, ShapeError
from .images import ImageRecord, flatten_image, quantize

ATTACKER_SEED = 0xA77AC
ATTACKER_SPLIT_SEED = 0xA775


def psnr_from_mse(mse: float) -> float:
    """Peak signal-to-noise ratio in dB for [0, 1] pixels; ``inf`` when mse is 0."""
    if mse < 0:
        raise ValueError(f"mse must be nonnegative, got {mse}")
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def image_mse(original: ImageRecord, reconstructed: ImageRecord) -> float:
    if original.pixels.shape != reconstructed.pixels.shape:
        raise ShapeError(f"image shapes differ: {original.pixels.shape} vs {reconstructed.pixels.shape}")
    diff = flatten_image(original).astype(np.float64) - flatten_image(reconstructed)
    return float(np.mean(diff * diff))


def psnr(original: ImageRecord, reconstructed: ImageRecord) -> float:
    return psnr_from_mse(image_mse(original, reconstructed))


def baseline_mean_image(train_targets: np.ndarray) -> np.ndarray:
    """Elementwise mean of the training targets: the null-model predictor."""
    train_targets = np.asarray(train_targets)
    if train_targets.ndim != 2 or train_targets.shape[0] == 0:
        raise ConfigError("baseline needs a nonempty 2-D set of train targets")
    return train_targets.astype(np.float64).mean(axis=0).astype(np.float32)


@dataclass
class ReconstructionReport:
    source_ids: list
    mse: np.ndarray  # per image, [0, 1] scale
    baseline_mse: float
    psnr: np.ndarray = field(init=False)

    def __post_init__(self):
        self.mse = np.asarray(self.mse, dtype=np.float64)
        self.psnr = np.array([psnr_from_mse(v) for v in self.mse], dtype=np.float64)

    @property
    def mean_mse(self) -> float:
        return float(np.mean(self.mse))

    @property
    def median_mse(self) -> float:
        return float(np.median(self.mse))

    @property
    def worst_mse(self) -> float:
        return float(np.max(self.mse))

    @property
    def mean_psnr(self) -> float:
        return psnr_from_mse(self.mean_mse)

    @property
    def beats_baseline(self) -> bool:
        return self.mean_mse < self.baseline_mse

    @property
    def baseline_ratio(self) -> float:
        return self.mean_mse / self.baseline_mse if self.baseline_mse > 0 else math.inf

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["source_id", "mse", "psnr"])
        for sid, m, p in zip(self.source_ids, self.mse, self.psnr):
            writer.writerow([sid, repr(float(m)), "inf" if math.isinf(p) else repr(float(p))])
        return buf.getvalue()

    def summary(self) -> str:
        verdict = "beats" if self.beats_baseline else "does NOT beat"
        return (
            f"images: {len(self.mse)}\n"
            f"mse mean {self.mean_mse:.6f}  median {self.median_mse:.6f}  worst {self.worst_mse:.6f}\n"
            f"psnr at mean mse: {self.mean_psnr:.2f} dB\n"
            f"mean-image baseline mse {self.baseline_mse:.6f}; decoder {verdict} it "
            f"(ratio {self.baseline_ratio:.3f})\n"
        )


def compare_images(originals: Sequence[ImageRecord], reconstructions: Sequence[ImageRecord],
                   baseline: Optional[np.ndarray] = None) -> ReconstructionReport:
    """Report for already-decoded images. Without ``baseline`` the originals' mean is used."""
    if len(originals) != len(reconstructions):
        raise ShapeError(f"{len(originals)} originals but {len(reconstructions)} reconstructions")
    if not originals:
        raise ConfigError("nothing to compare")
    targets = np.stack([flatten_image(img) for img in originals])
    if baseline is None:
        baseline = baseline_mean_image(targets)
    mse = [image_mse(o, r) for o, r in zip(originals, reconstructions)]
    return ReconstructionReport([o.source_id for o in originals], mse,
                                _mse_against(targets, baseline))


def _mse_against(targets: np.ndarray, prediction: np.ndarray) -> float:
    diff = targets.astype(np.float64) - prediction.astype(np.float64)
    return float(np.mean(diff * diff))


def evaluate_decoder(decoder: DecoderModel, dataset: PairDataset,
                     split: str = "test") -> ReconstructionReport:
    """Decode every row of ``split`` to 8-bit pixels and score against the originals.

    The baseline is the train-split mean image (all rows when there is no
    train split) scored on the same rows.
    """
    rows = dataset.rows(split)
    if len(rows) == 0:
        raise ConfigError(f"dataset has no {split} rows")
    if dataset.p != decoder.p or dataset.n != decoder.n:
        raise ShapeError(f"dataset is p={dataset.p}, n={dataset.n}; decoder is p={decoder.p}, n={decoder.n}")
    train_rows = dataset.rows("train")
    if split == "all" or len(train_rows) == 0:
        train_rows = dataset.rows("all")
    baseline = baseline_mean_image(dataset.targets[train_rows])

    targets = dataset.targets[rows].astype(np.float64)
    decoded = quantize(decode_vectors(decoder, dataset.encodings[rows])).astype(np.float64) / 255.0
    per_image = np.mean((decoded - targets) ** 2, axis=1)
    return ReconstructionReport([dataset.source_ids[i] for i in rows], per_image,
                                _mse_against(targets, baseline))


def train_adversary(captured_encoder: EncoderModel, attacker_corpus: Sequence[ImageRecord],
                    config: TrainingConfig, *, hidden_sizes=DEFAULT_HIDDEN_SIZES,
                    seed: int = ATTACKER_SEED, test_fraction: float = DEFAULT_TEST_FRACTION,
                    defender_ids: Sequence[str] = ()):
    """Train a fresh decoder from pairs the attacker makes with the captured encoder."""
    if len(attacker_corpus) == 0:
        raise ConfigError("attacker corpus is empty")
    overlap = set(defender_ids) & {img.source_id for img in attacker_corpus}
    if overlap:
        raise ExperimentValidityError(
            f"attacker corpus shares {len(overlap)} image(s) with the defender, e.g. {sorted(overlap)[0]!r}"
        )
    pairs = split_dataset(build_encoding_pairs(captured_encoder, attacker_corpus),
                          test_fraction, ATTACKER_SPLIT_SEED)
    decoder = init_decoder(captured_encoder.p, hidden_sizes, captured_encoder.image_h,
                           captured_encoder.image_w, config.alpha, config.dropout_rates, seed)
    return train_decoder(decoder, pairs, config)


def adversary_attack(captured_encoder: EncoderModel, attacker_corpus: Sequence[ImageRecord],
                     config: TrainingConfig, defender: PairDataset, *,
                     hidden_sizes=DEFAULT_HIDDEN_SIZES, seed: int = ATTACKER_SEED,
                     test_fraction: float = DEFAULT_TEST_FRACTION) -> ReconstructionReport:
    """Decrypt the defender's held-out encodings with an attacker-trained decoder.

    ``defender`` holds the genuine encodings and the original images; only its
    test split is decoded. Its source ids must not appear in the attacker corpus.
    """
    decoder, _ = train_adversary(captured_encoder, attacker_corpus, config,
                                 hidden_sizes=hidden_sizes, seed=seed,
                                 test_fraction=test_fraction, defender_ids=defender.source_ids)
    return evaluate_decoder(decoder, defender, "test")
