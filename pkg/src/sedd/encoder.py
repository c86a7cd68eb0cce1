"""The shallow encoder: a fixed, never-trained random network acting as the key.

The encoder maps a flattened image through a small ReLU hidden layer and a
sigmoid output layer. Its parameters are generated once from a seed and are
read-only afterwards.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .errors import ConfigError, ShapeError, StructuralError
from .images import ImageRecord, flatten_image

DEFAULT_IMAGE_SIZE = 150
DEFAULT_HIDDEN_UNITS = 10
DEFAULT_ENCODING_SIZE = 1024
DEFAULT_SEED = 0x5EDD


@dataclass(frozen=True)
class EncoderModel:
    hidden: nn.DenseLayer
    output: nn.DenseLayer
    image_h: int
    image_w: int
    seed: int = DEFAULT_SEED

    def __post_init__(self):
        if self.hidden.activation.kind != nn.Kind.RELU or self.output.activation.kind != nn.Kind.SIGMOID:
            raise StructuralError("encoder must be Relu hidden layer followed by Sigmoid output layer")
        if self.hidden.in_units != self.input_dim:
            raise StructuralError(
                f"encoder input {self.hidden.in_units} != {self.image_h}x{self.image_w}x3"
            )
        if self.output.in_units != self.hidden.out_units:
            raise StructuralError("encoder output layer does not chain onto hidden layer")
        for layer in self.layers:
            layer.weights.flags.writeable = False
            layer.bias.flags.writeable = False

    @property
    def input_dim(self) -> int:
        return self.image_h * self.image_w * 3

    @property
    def h_units(self) -> int:
        return self.hidden.out_units

    @property
    def p(self) -> int:
        return self.output.out_units

    @property
    def layers(self):
        return [self.hidden, self.output]

    @property
    def param_count(self) -> int:
        return count_encoder_params(self)


def encoder_param_count(n: int, h_units: int, p: int) -> int:
    return n * h_units + h_units + h_units * p + p


def count_encoder_params(model: EncoderModel) -> int:
    return encoder_param_count(model.input_dim, model.h_units, model.p)


def init_encoder(image_h: int = DEFAULT_IMAGE_SIZE, image_w: int = DEFAULT_IMAGE_SIZE,
                 h_units: int = DEFAULT_HIDDEN_UNITS, p: int = DEFAULT_ENCODING_SIZE,
                 seed: int = DEFAULT_SEED) -> EncoderModel:
    """Create a key. Draw order: hidden weights, then output weights."""
    for name, value in (("image_h", image_h), ("image_w", image_w), ("h_units", h_units), ("p", p)):
        if value <= 0:
            raise ConfigError(f"{name} must be positive, got {value}")
    rng = nn.DeterministicRng(seed)
    n = image_h * image_w * 3
    hidden = nn.glorot_layer(rng, n, h_units, nn.RELU)
    output = nn.glorot_layer(rng, h_units, p, nn.SIGMOID)
    return EncoderModel(hidden, output, image_h, image_w, seed)


def encode_vector(model: EncoderModel, a: np.ndarray) -> np.ndarray:
    _, hidden = nn.dense_forward(model.hidden, a)
    _, x = nn.dense_forward(model.output, hidden)
    return x


def encode_image(model: EncoderModel, image: ImageRecord) -> np.ndarray:
    """Encrypt one image into a float32 vector of length ``p`` in (0, 1)."""
    if (image.height, image.width) != (model.image_h, model.image_w):
        raise ShapeError(
            f"{image.source_id or 'image'} is {image.height}x{image.width}, "
            f"encoder expects {model.image_h}x{model.image_w}"
        )
    return encode_vector(model, flatten_image(image))
