"""Binary storage for keys (encoders), decoders and encodings.

Model file, all little-endian::

    header   magic "SEDDMDL1" | role u8 | version u16 | image_h u32 | image_w u32
             | layer_count u16 | alpha f32 | seed u64                 (33 bytes)
    layer    in_units u32 | out_units u32 | activation u8 | dropout f32
             | weights f32[out*in] row-major | biases f32[out]      (13 + 4*(out*in+out))
    trailer  CRC32 of every preceding byte, u32

Encodings file::

    magic "SEDDENC1" | p u32 | count u32 | f32[count*p] row-major

Files written to a path go through a temporary name and an atomic rename.
"""

from __future__ import annotations

import os
import struct
import tempfile
import zlib

import numpy as np

from . import nn
from .dataset import PairDataset
from .decoder import DecoderModel
from .encoder import EncoderModel
from .errors import CorruptionError, FormatError, ShapeError, StructuralError

MODEL_MAGIC = b"SEDDMDL1"
ENCODINGS_MAGIC = b"SEDDENC1"
VERSION = 1
ROLE_ENCODER = 0x01
ROLE_DECODER = 0x02

_HEADER = struct.Struct("<8sBHIIHfQ")
_LAYER = struct.Struct("<IIBf")
_ENC_HEADER = struct.Struct("<8sII")
_CRC = struct.Struct("<I")
_F32 = np.dtype("<f4")


def model_file_size(layer_shapes) -> int:
    """Byte size of a model file whose layers are ``(in_units, out_units)`` pairs."""
    body = sum(_LAYER.size + 4 * (i * o + o) for i, o in layer_shapes)
    return _HEADER.size + body + _CRC.size


def dump_model(model) -> bytes:
    if isinstance(model, EncoderModel):
        role, alpha, rates = ROLE_ENCODER, 0.0, [0.0, 0.0]
    elif isinstance(model, DecoderModel):
        role, alpha, rates = ROLE_DECODER, model.alpha, [*model.dropout_rates, 0.0]
    else:
        raise TypeError(f"cannot serialize {type(model).__name__}")
    layers = model.layers
    parts = [_HEADER.pack(MODEL_MAGIC, role, VERSION, model.image_h, model.image_w,
                          len(layers), alpha, model.seed)]
    for layer, rate in zip(layers, rates):
        parts.append(_LAYER.pack(layer.in_units, layer.out_units, int(layer.activation.kind), rate))
        parts.append(np.ascontiguousarray(layer.weights, dtype=_F32).tobytes())
        parts.append(np.ascontiguousarray(layer.bias, dtype=_F32).tobytes())
    body = b"".join(parts)
    return body + _CRC.pack(zlib.crc32(body))


def _read_floats(buf: bytes, offset: int, count: int) -> np.ndarray:
    values = np.frombuffer(buf, dtype=_F32, count=count, offset=offset).astype(np.float32)
    if not np.all(np.isfinite(values)):
        raise CorruptionError("non-finite parameter value in model file")
    return values


def parse_model(buf: bytes):
    """Rebuild an EncoderModel or DecoderModel from :func:`dump_model` bytes."""
    if len(buf) < _HEADER.size + _CRC.size:
        raise CorruptionError(f"model file truncated ({len(buf)} bytes)")
    (stored_crc,) = _CRC.unpack_from(buf, len(buf) - _CRC.size)
    body = buf[:-_CRC.size]
    if zlib.crc32(body) != stored_crc:
        raise CorruptionError("model file checksum mismatch (corrupted or truncated)")
    magic, role, version, image_h, image_w, layer_count, alpha, seed = _HEADER.unpack_from(body, 0)
    if magic != MODEL_MAGIC:
        raise FormatError(f"not a SEDD model file (magic {magic!r})")
    if version != VERSION:
        raise FormatError(f"unsupported model file version {version}")
    if role not in (ROLE_ENCODER, ROLE_DECODER):
        raise FormatError(f"unknown model role 0x{role:02x}")

    offset, layers, rates = _HEADER.size, [], []
    for _ in range(layer_count):
        if offset + _LAYER.size > len(body):
            raise StructuralError("layer table runs past end of file")
        in_units, out_units, code, rate = _LAYER.unpack_from(body, offset)
        offset += _LAYER.size
        n_values = in_units * out_units + out_units
        if offset + 4 * n_values > len(body):
            raise StructuralError("layer parameters run past end of file")
        try:
            kind = nn.Kind(code)
        except ValueError:
            raise FormatError(f"unknown activation code {code}") from None
        act = nn.leaky_relu(alpha) if kind == nn.Kind.LEAKY_RELU else nn.Activation(kind)
        weights = _read_floats(body, offset, in_units * out_units).reshape(out_units, in_units)
        offset += 4 * in_units * out_units
        bias = _read_floats(body, offset, out_units)
        offset += 4 * out_units
        layers.append(nn.DenseLayer(weights, bias, act))
        rates.append(float(rate))
    if offset != len(body):
        raise StructuralError(f"{len(body) - offset} unexpected trailing bytes in model file")
    for prev, nxt in zip(layers, layers[1:]):
        if nxt.in_units != prev.out_units:
            raise StructuralError(f"layer with {nxt.in_units} inputs follows one with {prev.out_units} outputs")

    if role == ROLE_ENCODER:
        if len(layers) != 2:
            raise StructuralError(f"encoder file has {len(layers)} layers, expected 2")
        return EncoderModel(layers[0], layers[1], image_h, image_w, seed)
    if len(layers) < 2:
        raise StructuralError("decoder file needs at least one hidden layer and an output layer")
    return DecoderModel(layers[:-1], rates[:-1], layers[-1], image_h, image_w, float(alpha), seed)


def _atomic_write(path, data: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".sedd-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write(data: bytes, sink) -> int:
    if hasattr(sink, "write"):
        sink.write(data)
    else:
        _atomic_write(sink, data)
    return len(data)


def _read(source) -> bytes:
    if isinstance(source, (bytes, bytearray, memoryview)):
        return bytes(source)
    if hasattr(source, "read"):
        return source.read()
    with open(source, "rb") as fh:
        return fh.read()


def save_model(model, sink) -> int:
    """Write ``model`` to a path or binary stream; returns the byte count."""
    return _write(dump_model(model), sink)


def load_model(source):
    return parse_model(_read(source))


def dump_encodings(encodings, p: int | None = None) -> bytes:
    rows = list(encodings) if not isinstance(encodings, np.ndarray) else encodings
    if len(rows) == 0:
        return _ENC_HEADER.pack(ENCODINGS_MAGIC, p or 0, 0)
    lengths = {len(np.asarray(r).reshape(-1)) for r in rows}
    if len(lengths) != 1:
        raise ShapeError(f"encodings have mixed lengths {sorted(lengths)}")
    width = lengths.pop()
    if p is not None and p != width:
        raise ShapeError(f"encodings have length {width}, expected {p}")
    data = np.ascontiguousarray(np.asarray(rows, dtype=np.float32).reshape(len(rows), width), dtype=_F32)
    return _ENC_HEADER.pack(ENCODINGS_MAGIC, width, len(rows)) + data.tobytes()


def parse_encodings(buf: bytes) -> np.ndarray:
    if len(buf) < _ENC_HEADER.size:
        raise CorruptionError(f"encodings file truncated ({len(buf)} bytes)")
    magic, p, count = _ENC_HEADER.unpack_from(buf, 0)
    if magic != ENCODINGS_MAGIC:
        raise FormatError(f"not a SEDD encodings file (magic {magic!r})")
    expected = _ENC_HEADER.size + 4 * p * count
    if len(buf) != expected:
        raise CorruptionError(f"encodings file is {len(buf)} bytes, header implies {expected}")
    values = np.frombuffer(buf, dtype=_F32, offset=_ENC_HEADER.size, count=p * count)
    values = values.astype(np.float32).reshape(count, p)
    if not np.all(np.isfinite(values)):
        raise CorruptionError("non-finite value in encodings file")
    return values


def save_encodings(encodings, sink, p: int | None = None) -> int:
    return _write(dump_encodings(encodings, p), sink)


def load_encodings(source) -> np.ndarray:
    """``(count, p)`` float32 array; ``len()`` is 0 for an empty file."""
    return parse_encodings(_read(source))


def save_pairs(dataset, encodings_sink, targets_sink) -> int:
    """A pair dataset is an encodings file plus a targets file in the same format."""
    return (save_encodings(dataset.encodings, encodings_sink, dataset.p)
            + save_encodings(dataset.targets, targets_sink, dataset.n))


def load_pairs(encodings_source, targets_source, image_h: int, image_w: int):
    encodings = load_encodings(encodings_source)
    targets = load_encodings(targets_source)
    if len(encodings) != len(targets):
        raise ShapeError(f"{len(encodings)} encodings but {len(targets)} targets")
    if len(targets) == 0:
        targets = targets.reshape(0, image_h * image_w * 3)
    return PairDataset(encodings, targets, image_h, image_w)

