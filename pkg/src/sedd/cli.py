"""``sedd`` command line: key generation, encryption, training, decryption,
evaluation and the adversary experiment.

Seeds default to fixed constants so runs are reproducible. A real deployment
must pass ``--seed`` from a secure random source: the seed *is* the key.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys

from PIL import Image

from . import codec
from .dataset import (DEFAULT_SPLIT_SEED, DEFAULT_TEST_FRACTION, build_encoding_pairs,
                      load_image_dir, prepare_images, split_dataset)
from .decoder import (DEFAULT_ALPHA, DEFAULT_DROPOUT_RATES, DEFAULT_HIDDEN_SIZES,
                      TrainingConfig, decode_image, init_decoder, train_decoder)
from .decoder import DEFAULT_SEED as DECODER_SEED
from .encoder import (DEFAULT_ENCODING_SIZE, DEFAULT_HIDDEN_UNITS, DEFAULT_IMAGE_SIZE,
                      EncoderModel, init_encoder)
from .encoder import DEFAULT_SEED as ENCODER_SEED
from .errors import ConfigError, SeddError
from .evaluation import (ATTACKER_SEED, compare_images, evaluate_decoder, train_adversary)
from .images import ImageRecord

EXIT_IO = 12
_DEFAULTS = TrainingConfig()


def positive_int(text: str) -> int:
    value = int(text)
    if value <= 0:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {text}")
    return value


def int_list(text: str) -> list:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values or any(v <= 0 for v in values):
        raise argparse.ArgumentTypeError(f"expected positive integers, got {text!r}")
    return values


def float_list(text: str) -> list:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def seed(text: str) -> int:
    return int(text, 0)


def write_png(image: ImageRecord, path) -> None:
    # fixed settings, no metadata: identical pixels give identical bytes
    Image.fromarray(image.pixels).save(path, format="PNG", compress_level=6, optimize=False)


def _write_text(path, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _load_encoder(path) -> EncoderModel:
    model = codec.load_model(path)
    if not isinstance(model, EncoderModel):
        raise ConfigError(f"{path} is a decoder file, expected an encoder key")
    return model


def _load_decoder(path):
    model = codec.load_model(path)
    if isinstance(model, EncoderModel):
        raise ConfigError(f"{path} is an encoder key, expected a decoder file")
    return model


def _encode_corpus(key: EncoderModel, images_dir, limit=None):
    images = prepare_images(load_image_dir(images_dir, limit), key.image_h, key.image_w)
    return build_encoding_pairs(key, images)


def _pairs_from_args(args):
    """Pair dataset from either --key/--images or --encodings/--targets."""
    if args.images:
        if not args.key:
            raise ConfigError("--images needs --key to build encodings")
        return _encode_corpus(_load_encoder(args.key), args.images, args.limit)
    if args.encodings and args.targets:
        if args.key:
            key = _load_encoder(args.key)
            height, width = key.image_h, key.image_w
        elif args.height and args.width:
            height, width = args.height, args.width
        else:
            raise ConfigError("--encodings/--targets need --height/--width (or --key) for the image shape")
        return codec.load_pairs(args.encodings, args.targets, height, width)
    raise ConfigError("give either --key with --images, or --encodings with --targets")


def _training_config(args) -> TrainingConfig:
    return TrainingConfig(
        learning_rate=args.lr, batch_size=args.batch_size, max_epochs=args.max_epochs,
        early_stop_test_mse=args.threshold, patience=args.patience,
        shuffle_seed=args.shuffle_seed, alpha=args.alpha, dropout_rates=tuple(args.dropout),
    )


def cmd_init_encoder(args) -> int:
    if os.path.exists(args.out) and not args.force:
        raise ConfigError(f"{args.out} exists; refusing to overwrite a key without --force")
    model = init_encoder(args.height, args.width, args.hidden, args.encoding_size, args.seed)
    size = codec.save_model(model, args.out)
    print(f"wrote encoder key {args.out}: {model.image_h}x{model.image_w}x3 -> "
          f"{model.h_units} -> {model.p}, {model.param_count} parameters, {size} bytes")
    return 0


def cmd_encode(args) -> int:
    key = _load_encoder(args.key)
    for flag, requested, actual in (("--height", args.height, key.image_h), ("--width", args.width, key.image_w)):
        if requested is not None and requested != actual:
            raise ConfigError(f"{flag} {requested} does not match the key's image size {actual}")
    pairs = _encode_corpus(key, args.images, args.limit)
    size = codec.save_encodings(pairs.encodings, args.out, key.p)
    if args.targets_out:
        codec.save_encodings(pairs.targets, args.targets_out, pairs.n)
    print(f"encoded {pairs.m} images -> {args.out} ({size} bytes)")
    return 0


def cmd_train(args) -> int:
    pairs = split_dataset(_pairs_from_args(args), args.test_fraction, args.split_seed)
    config = _training_config(args)
    if len(args.dropout) != len(args.hidden_sizes):
        raise ConfigError(f"--dropout has {len(args.dropout)} rates for {len(args.hidden_sizes)} hidden layers")
    decoder = init_decoder(pairs.p, args.hidden_sizes, pairs.image_h, pairs.image_w,
                           args.alpha, args.dropout, args.seed)
    trained, history = train_decoder(decoder, pairs, config)
    codec.save_model(trained, args.out)
    if args.history:
        _write_text(args.history, history.to_csv())
    best = history.records[history.best_epoch - 1]
    print(f"stopped after {len(history.records)} epoch(s): {history.stop_reason.value}; "
          f"best epoch {best.epoch} train mse {best.train_mse:.6f} test mse {best.test_mse:.6f}")
    print(f"wrote decoder {args.out}")
    return 0


def cmd_decode(args) -> int:
    decoder = _load_decoder(args.decoder)
    encodings = codec.load_encodings(args.encodings)
    os.makedirs(args.out_dir, exist_ok=True)
    for i, x in enumerate(encodings):
        write_png(decode_image(decoder, x), os.path.join(args.out_dir, f"{i:06d}.png"))
    print(f"decoded {len(encodings)} image(s) into {args.out_dir}")
    return 0


def cmd_eval(args) -> int:
    if args.decoded:
        if not args.images:
            raise ConfigError("--decoded needs --images with the originals")
        originals = load_image_dir(args.images)
        decoded = load_image_dir(args.decoded)
        if decoded:
            originals = prepare_images(originals, decoded[0].height, decoded[0].width)
        report = compare_images(originals, decoded)
    else:
        if not args.decoder:
            raise ConfigError("eval needs --decoder (or --decoded with --images)")
        decoder = _load_decoder(args.decoder)
        pairs = _pairs_from_args(args)
        if args.split == "test":
            pairs = split_dataset(pairs, args.test_fraction, args.split_seed)
        report = evaluate_decoder(decoder, pairs, args.split)
    if args.report:
        _write_text(args.report, report.to_csv())
    print(report.summary(), end="")
    return 0


def cmd_attack(args) -> int:
    captured = _load_encoder(args.key)
    defender_key = _load_encoder(args.defender_key) if args.defender_key else captured
    defender = split_dataset(_encode_corpus(defender_key, args.images, args.limit),
                             args.test_fraction, args.split_seed)
    attacker_images = prepare_images(load_image_dir(args.attacker_images, args.attacker_limit),
                                     captured.image_h, captured.image_w)
    decoder, history = train_adversary(captured, attacker_images, _training_config(args),
                                       hidden_sizes=args.hidden_sizes, seed=args.seed,
                                       test_fraction=args.test_fraction,
                                       defender_ids=defender.source_ids)
    report = evaluate_decoder(decoder, defender, "test")
    if args.report:
        _write_text(args.report, report.to_csv())
    print(f"adversary decoder trained for {len(history.records)} epoch(s) ({history.stop_reason.value})")
    print(report.summary(), end="")
    if args.legit_decoder:
        legit = evaluate_decoder(_load_decoder(args.legit_decoder), defender, "test")
        print(f"legitimate decoder mse {legit.mean_mse:.6f}; attack/legit ratio "
              f"{report.mean_mse / legit.mean_mse:.3f}")
    return 0


def _add_pair_source(p, images_help="directory of PNG/JPEG images"):
    p.add_argument("--key", help="encoder key file")
    p.add_argument("--images", help=images_help)
    p.add_argument("--limit", type=positive_int, help="use only the first N images by filename")
    p.add_argument("--encodings", help="prebuilt encodings file (with --targets)")
    p.add_argument("--targets", help="prebuilt targets file (with --encodings)")
    p.add_argument("--height", type=positive_int, help="image height for --encodings/--targets")
    p.add_argument("--width", type=positive_int, help="image width for --encodings/--targets")


def _add_split(p):
    p.add_argument("--test-fraction", type=float, default=DEFAULT_TEST_FRACTION)
    p.add_argument("--split-seed", type=seed, default=DEFAULT_SPLIT_SEED)


def _add_training(p, decoder_seed):
    p.add_argument("--hidden-sizes", type=int_list, default=list(DEFAULT_HIDDEN_SIZES),
                   help="decoder hidden layer widths")
    p.add_argument("--alpha", type=float, default=DEFAULT_ALPHA, help="LeakyRelu slope")
    p.add_argument("--dropout", type=float_list, default=list(DEFAULT_DROPOUT_RATES),
                   help="dropout rate per hidden layer")
    p.add_argument("--lr", type=float, default=_DEFAULTS.learning_rate, help="SGD learning rate")
    p.add_argument("--batch-size", type=positive_int, default=_DEFAULTS.batch_size)
    p.add_argument("--max-epochs", type=positive_int, default=_DEFAULTS.max_epochs)
    p.add_argument("--threshold", type=float, default=_DEFAULTS.early_stop_test_mse,
                   help="stop once test mse falls below this")
    p.add_argument("--patience", type=positive_int, default=_DEFAULTS.patience,
                   help="stop after this many epochs without test mse improvement")
    p.add_argument("--shuffle-seed", type=seed, default=_DEFAULTS.shuffle_seed)
    p.add_argument("--seed", type=seed, default=decoder_seed, help="decoder initialisation seed")
    _add_split(p)


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="sedd", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init-encoder", help="generate an encoder key", formatter_class=fmt)
    p.add_argument("--height", type=positive_int, default=DEFAULT_IMAGE_SIZE, help="image height")
    p.add_argument("--width", type=positive_int, default=DEFAULT_IMAGE_SIZE, help="image width")
    p.add_argument("--hidden", type=positive_int, default=DEFAULT_HIDDEN_UNITS, help="hidden units")
    p.add_argument("--encoding-size", type=positive_int, default=DEFAULT_ENCODING_SIZE,
                   help="encoding length p")
    p.add_argument("--seed", type=seed, default=ENCODER_SEED,
                   help="key seed; use a secure random value outside experiments")
    p.add_argument("--out", required=True, help="key file to write")
    p.add_argument("--force", action="store_true", help="overwrite an existing key file")
    p.set_defaults(func=cmd_init_encoder)

    p = sub.add_parser("encode", help="encrypt a directory of images", formatter_class=fmt)
    p.add_argument("--key", required=True, help="encoder key file")
    p.add_argument("--images", required=True, help="directory of PNG/JPEG images")
    p.add_argument("--out", required=True, help="encodings file to write")
    p.add_argument("--targets-out", help="also write the flattened images as a targets file")
    p.add_argument("--limit", type=positive_int, help="use only the first N images by filename")
    p.add_argument("--height", type=positive_int, help="expected image height; must match the key")
    p.add_argument("--width", type=positive_int, help="expected image width; must match the key")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("train", help="train a decoder on image-encoding pairs", formatter_class=fmt)
    _add_pair_source(p)
    p.add_argument("--out", required=True, help="decoder file to write")
    p.add_argument("--history", help="per-epoch CSV (epoch,train_mse,test_mse,seconds)")
    _add_training(p, DECODER_SEED)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("decode", help="decrypt encodings into PNG images", formatter_class=fmt)
    p.add_argument("--decoder", required=True, help="decoder file")
    p.add_argument("--encodings", required=True, help="encodings file")
    p.add_argument("--out-dir", required=True, help="directory for 000000.png, 000001.png, ...")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval", help="score reconstructions against originals", formatter_class=fmt)
    p.add_argument("--decoder", help="decoder file to evaluate on pairs")
    _add_pair_source(p, "directory of original images")
    p.add_argument("--decoded", help="directory of decoded PNGs to compare with --images (filename order)")
    p.add_argument("--split", choices=("test", "all"), default="test", help="rows to evaluate")
    _add_split(p)
    p.add_argument("--report", help="CSV report to write (source_id,mse,psnr)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("attack", help="train an adversary decoder from a captured key", formatter_class=fmt)
    p.add_argument("--key", required=True, help="captured encoder key")
    p.add_argument("--attacker-images", required=True, help="attacker's own image corpus")
    p.add_argument("--attacker-limit", type=positive_int, help="use only the first N attacker images")
    p.add_argument("--images", required=True, help="defender's image corpus (held-out split is attacked)")
    p.add_argument("--limit", type=positive_int, help="use only the first N defender images")
    p.add_argument("--defender-key", help="key that produced the defender's encodings (default: --key)")
    p.add_argument("--legit-decoder", help="defender's decoder, for an attack/legitimate mse ratio")
    p.add_argument("--report", help="CSV report to write (source_id,mse,psnr)")
    _add_training(p, ATTACKER_SEED)
    p.set_defaults(func=cmd_attack)
    return parser


def _thread_limit():
    value = os.environ.get("SEDD_THREADS")
    if not value:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, int(value)))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except SeddError as exc:
        print(f"sedd {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"sedd {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
