"""The deep decoder: builds, trains and runs the network that reconstructs
images from encodings."""

from __future__ import annotations

import csv
import enum
import io
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import nn
from .errors import ConfigError, DivergenceError, ShapeError, StructuralError
from .images import ImageRecord, reshape_to_image

log = logging.getLogger(__name__)

DEFAULT_HIDDEN_SIZES = (512, 512, 512)
DEFAULT_ALPHA = 0.2
DEFAULT_DROPOUT_RATES = (0.3, 0.3, 0.2)
DEFAULT_SEED = 0xDEC0
_EVAL_CHUNK = 256


@dataclass
class DecoderModel:
    hidden: list  # DenseLayer, LeakyRelu
    dropout_rates: list
    output: nn.DenseLayer  # Sigmoid
    image_h: int
    image_w: int
    alpha: float = DEFAULT_ALPHA
    seed: int = DEFAULT_SEED

    def __post_init__(self):
        # stored as float32 on disk; normalise so save/load round-trips exactly
        self.alpha = float(np.float32(self.alpha))
        self.dropout_rates = [float(np.float32(r)) for r in self.dropout_rates]
        if not self.hidden:
            raise StructuralError("decoder needs at least one hidden layer")
        if len(self.dropout_rates) != len(self.hidden):
            raise ConfigError(f"{len(self.dropout_rates)} dropout rates for {len(self.hidden)} hidden layers")
        for rate in self.dropout_rates:
            if not 0.0 <= rate < 1.0:
                raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
        for layer in self.hidden:
            if layer.activation != nn.leaky_relu(self.alpha):
                raise StructuralError("hidden layers must all be LeakyRelu with the model's alpha")
        if self.output.activation.kind != nn.Kind.SIGMOID:
            raise StructuralError("decoder output layer must be Sigmoid")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if nxt.in_units != prev.out_units:
                raise StructuralError(f"layer expecting {nxt.in_units} inputs follows one with {prev.out_units} outputs")
        if self.output.out_units != self.n:
            raise StructuralError(f"output size {self.output.out_units} != {self.image_h}x{self.image_w}x3")

    @property
    def layers(self) -> list:
        return [*self.hidden, self.output]

    @property
    def p(self) -> int:
        return self.hidden[0].in_units

    @property
    def n(self) -> int:
        return self.image_h * self.image_w * 3

    @property
    def param_count(self) -> int:
        return sum(layer.param_count for layer in self.layers)

    def copy(self) -> "DecoderModel":
        return DecoderModel([layer.copy() for layer in self.hidden], list(self.dropout_rates),
                            self.output.copy(), self.image_h, self.image_w, self.alpha, self.seed)


def decoder_param_count(p: int, hidden_sizes: Sequence[int], n: int) -> int:
    sizes = [p, *hidden_sizes, n]
    return sum(a * b + b for a, b in zip(sizes, sizes[1:]))


def init_decoder(p: int = 1024, hidden_sizes: Sequence[int] = DEFAULT_HIDDEN_SIZES,
                 image_h: int = 150, image_w: int = 150, alpha: float = DEFAULT_ALPHA,
                 dropout_rates: Sequence[float] = DEFAULT_DROPOUT_RATES,
                 seed: int = DEFAULT_SEED) -> DecoderModel:
    if not hidden_sizes:
        raise ConfigError("hidden_sizes must be nonempty")
    if len(dropout_rates) != len(hidden_sizes):
        raise ConfigError(f"{len(dropout_rates)} dropout rates for {len(hidden_sizes)} hidden layers")
    if p <= 0 or image_h <= 0 or image_w <= 0 or any(h <= 0 for h in hidden_sizes):
        raise ConfigError("decoder dimensions must be positive")
    rng = nn.DeterministicRng(seed)
    act = nn.leaky_relu(alpha)
    hidden, fan_in = [], p
    for units in hidden_sizes:
        hidden.append(nn.glorot_layer(rng, fan_in, units, act))
        fan_in = units
    output = nn.glorot_layer(rng, fan_in, image_h * image_w * 3, nn.SIGMOID)
    return DecoderModel(hidden, [float(r) for r in dropout_rates], output,
                        image_h, image_w, float(alpha), seed)


def decoder_forward(model: DecoderModel, x: np.ndarray, training: bool = False,
                    rng: Optional[nn.DeterministicRng] = None):
    """Return ``(y, cache)``. Hidden block: dense, LeakyRelu, dropout.

    Dropout only runs when ``training``; inference never touches ``rng``.
    """
    x = np.asarray(x)
    if x.shape[-1] != model.p:
        raise ShapeError(f"decoder expects encodings of length {model.p}, got shape {x.shape}")
    if training and rng is None and any(model.dropout_rates):
        raise ConfigError("training-mode forward needs an rng for dropout")
    inputs, pres, acts, masks = [], [], [], []
    h = x
    for layer, rate in zip(model.hidden, model.dropout_rates):
        inputs.append(h)
        pre, h = nn.dense_forward(layer, h)
        pres.append(pre)
        acts.append(h)
        if training and rate > 0.0:
            h, mask = nn.dropout_forward(rate, h, True, rng)
            masks.append(mask)
        else:
            masks.append(None)
    inputs.append(h)
    pre, y = nn.dense_forward(model.output, h)
    pres.append(pre)
    acts.append(y)
    masks.append(None)
    return y, nn.ForwardCache(inputs, pres, acts, masks, y)


def decode_vectors(model: DecoderModel, encodings: np.ndarray) -> np.ndarray:
    """Inference-mode outputs for a batch of encodings, row by row in chunks."""
    encodings = np.asarray(encodings)
    out = np.empty((encodings.shape[0], model.n), dtype=np.float32)
    for start in range(0, encodings.shape[0], _EVAL_CHUNK):
        out[start:start + _EVAL_CHUNK] = decoder_forward(model, encodings[start:start + _EVAL_CHUNK])[0]
    return out


def decode_image(model: DecoderModel, x: np.ndarray, source_id: str = "") -> ImageRecord:
    y, _ = decoder_forward(model, np.asarray(x).reshape(-1), training=False)
    return reshape_to_image(y, model.image_h, model.image_w, source_id)


def dataset_mse(model: DecoderModel, encodings: np.ndarray, targets: np.ndarray) -> float:
    """Inference-mode MSE over a whole split, accumulated in float64."""
    total = 0.0
    for start in range(0, encodings.shape[0], _EVAL_CHUNK):
        y = decoder_forward(model, encodings[start:start + _EVAL_CHUNK])[0]
        diff = y.astype(np.float64) - targets[start:start + _EVAL_CHUNK]
        total += float(np.sum(diff * diff))
    return total / targets.size


@dataclass
class TrainingConfig:
    learning_rate: float = 0.01
    batch_size: int = 32
    max_epochs: int = 20
    early_stop_test_mse: float = 0.075
    patience: int = 5
    shuffle_seed: int = 0x5AFF
    # used when a decoder is built for this config (CLI, adversary)
    alpha: float = DEFAULT_ALPHA
    dropout_rates: tuple = DEFAULT_DROPOUT_RATES

    def __post_init__(self):
        if not self.learning_rate >= 0.0 or not math.isfinite(self.learning_rate):
            raise ConfigError(f"learning_rate must be a finite nonnegative number, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if not self.early_stop_test_mse > 0:
            raise ConfigError(f"early_stop_test_mse must be > 0, got {self.early_stop_test_mse}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")


class StopReason(str, enum.Enum):
    REACHED_THRESHOLD = "ReachedThreshold"
    PATIENCE = "Patience"
    MAX_EPOCHS = "MaxEpochs"


@dataclass
class EpochRecord:
    epoch: int
    train_mse: float
    test_mse: float
    seconds: float


@dataclass
class TrainingHistory:
    records: list = field(default_factory=list)
    stop_reason: Optional[StopReason] = None
    best_epoch: Optional[int] = None

    @property
    def test_mse(self) -> list:
        return [r.test_mse for r in self.records]

    @property
    def train_mse(self) -> list:
        return [r.train_mse for r in self.records]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["epoch", "train_mse", "test_mse", "seconds"])
        for r in self.records:
            writer.writerow([r.epoch, repr(r.train_mse), repr(r.test_mse), f"{r.seconds:.3f}"])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "TrainingHistory":
        rows = list(csv.DictReader(io.StringIO(text)))
        return cls([EpochRecord(int(r["epoch"]), float(r["train_mse"]), float(r["test_mse"]),
                                float(r["seconds"])) for r in rows])


EvaluateFn = Callable[[DecoderModel, int], tuple]


def train_decoder(model: DecoderModel, dataset, config: TrainingConfig,
                  evaluate: Optional[EvaluateFn] = None):
    """Mini-batch SGD on the train split with early stopping on the test split.

    Each epoch shuffles with a stream derived from ``(shuffle_seed, epoch)``;
    the same stream then supplies the dropout masks. ``evaluate(model, epoch)``
    may replace the end-of-epoch ``(train_mse, test_mse)`` measurement.

    Returns the parameters from the epoch with the lowest test MSE (earliest on
    ties) and the history. The input model is left untouched.
    """
    x_train, t_train = dataset.train()
    x_test, t_test = dataset.test()
    if len(x_train) == 0 or len(x_test) == 0:
        raise ConfigError(f"need nonempty train and test splits, got {len(x_train)}/{len(x_test)}")
    if dataset.p != model.p or dataset.n != model.n:
        raise ShapeError(f"dataset is p={dataset.p}, n={dataset.n}; decoder is p={model.p}, n={model.n}")

    model = model.copy()
    layers = model.layers
    history = TrainingHistory()
    best, best_mse, since_best = model.copy(), math.inf, 0
    m = len(x_train)
    for epoch in range(1, config.max_epochs + 1):
        started = time.perf_counter()
        rng = nn.DeterministicRng.derived(config.shuffle_seed, epoch)
        order = rng.permutation(m)
        for batch, start in enumerate(range(0, m, config.batch_size), start=1):
            idx = order[start:start + config.batch_size]
            _, cache = decoder_forward(model, x_train[idx], training=True, rng=rng)
            loss, grads = nn.backward(layers, cache, t_train[idx])
            if not math.isfinite(loss):
                raise DivergenceError(epoch, batch, loss)
            nn.sgd_step(layers, grads, config.learning_rate)

        if evaluate is None:
            train_mse = dataset_mse(model, x_train, t_train)
            test_mse = dataset_mse(model, x_test, t_test)
        else:
            train_mse, test_mse = evaluate(model, epoch)
        if not (math.isfinite(train_mse) and math.isfinite(test_mse)):
            raise DivergenceError(epoch, None, test_mse if math.isfinite(train_mse) else train_mse)
        history.records.append(EpochRecord(epoch, float(train_mse), float(test_mse),
                                           time.perf_counter() - started))
        log.info("epoch %d: train mse %.6f, test mse %.6f", epoch, train_mse, test_mse)

        if test_mse < best_mse:
            best, best_mse, since_best = model.copy(), test_mse, 0
            history.best_epoch = epoch
        else:
            since_best += 1
        if test_mse < config.early_stop_test_mse:
            history.stop_reason = StopReason.REACHED_THRESHOLD
            break
        if since_best >= config.patience:
            history.stop_reason = StopReason.PATIENCE
            break
    else:
        history.stop_reason = StopReason.MAX_EPOCHS
    return best, history
