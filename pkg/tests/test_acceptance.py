"""Acceptance gate. Each test prints one PASS/FAIL line (also collected in the
terminal summary) and then asserts, so a red criterion shows up as a failure.

Criteria 3 and 8 train real decoders and take several minutes in total.
"""

import subprocess
import sys
import time
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from sedd import nn
from sedd.codec import dump_encodings, dump_model, load_encodings, parse_model
from sedd.dataset import PairDataset, build_encoding_pairs, split_dataset, synthetic_images
from sedd.decoder import (DecoderModel, StopReason, TrainingConfig, decode_image, decoder_forward,
                          decoder_param_count, init_decoder, train_decoder)
from sedd.encoder import encode_image, encoder_param_count, init_encoder
from sedd.errors import CorruptionError
from sedd.evaluation import adversary_attack, evaluate_decoder
from sedd.images import ImageRecord, flatten_image, reshape_to_image

from oracles import fd_gradients, rel_err


# --- 1: gradient oracle -----------------------------------------------------

def test_criterion_1_gradient_oracle(criterion):
    started = time.perf_counter()
    rng = np.random.default_rng(2024)
    shapes = [(1, 1), (1, 2), (2, 1), (1, 3), (3, 1)]
    worst, checked, skipped, failures = 0.0, 0, 0, []
    for trial in range(24):
        p = int(rng.integers(1, 5))
        hidden = [int(w) for w in rng.integers(1, 7, size=int(rng.integers(1, 3)))]
        h, w = shapes[trial % len(shapes)]
        with_dropout = trial % 2 == 1
        rates = [0.3] * len(hidden) if with_dropout else [0.0] * len(hidden)
        model = init_decoder(p, hidden, h, w, 0.2, rates, seed=trial)
        model = DecoderModel([l.astype(np.float64) for l in model.hidden], model.dropout_rates,
                             model.output.astype(np.float64), h, w, model.alpha)
        # small random biases so no unit sits exactly on the LeakyRelu kink
        for layer in model.layers:
            layer.bias[:] = rng.normal(0, 0.1, layer.bias.shape)
        x = rng.uniform(0, 1, p)
        t = rng.uniform(0, 1, model.n)
        _, cache = decoder_forward(model, x, training=with_dropout, rng=nn.DeterministicRng(trial))
        _, grads = nn.backward(model.layers, cache, t)
        params = [(l.weights, l.bias) for l in model.layers]
        acts = ["leaky"] * len(hidden) + ["sigmoid"]
        fd, kinks = fd_gradients(params, acts, x, t, cache.masks, model.alpha, step=1e-3)
        for k, ((fw, fb), (kw, kb)) in enumerate(zip(fd, kinks)):
            for analytic, numeric, kink in ((grads.weights[k], fw, kw), (grads.biases[k], fb, kb)):
                err = rel_err(analytic, numeric)
                skipped += int(kink.sum())
                checked += int((~kink).sum())
                worst = max(worst, float(err[~kink].max(initial=0.0)))
                if np.any(err[~kink] >= 1e-3):
                    failures.append((trial, k))
    seconds = time.perf_counter() - started
    passed = not failures and seconds < 30
    criterion(1, passed, f"24 decoders, {checked} components, worst rel err {worst:.2e}, "
                         f"{skipped} kink-straddling skipped, {seconds:.1f}s")
    assert not failures, failures
    assert seconds < 30


# --- 2: memorization --------------------------------------------------------

def test_criterion_2_memorization(criterion):
    started = time.perf_counter()
    images = synthetic_images(8, 8, 8, seed=11)
    key = init_encoder(8, 8, 10, 32, seed=11)
    pairs = build_encoding_pairs(key, images + images)
    # the second copy serves as the required held-out split; it is the train set itself
    ds = PairDataset(pairs.encodings, pairs.targets, 8, 8, is_test=np.arange(16) >= 8)
    decoder = init_decoder(32, [32], 8, 8, 0.2, [0.0], seed=12)
    config = TrainingConfig(learning_rate=0.1, batch_size=1, max_epochs=500,
                            early_stop_test_mse=1e-3, patience=500, dropout_rates=(0.0,))
    _, history = train_decoder(decoder, ds, config)
    best_train = min(history.train_mse)
    seconds = time.perf_counter() - started
    passed = best_train < 1e-3 and seconds < 60
    criterion(2, passed, f"best train mse {best_train:.6f} after {len(history.records)} epochs "
                         f"(start {history.train_mse[0]:.6f}), {seconds:.1f}s")
    assert best_train < 1e-3
    assert seconds < 60


# --- 3 and 8: desk-scale experiment and adversary ---------------------------

DESK = dict(h=32, w=32, p=128, hidden=[256, 256, 256], epochs=300)


def desk_config():
    return TrainingConfig(learning_rate=5.0, batch_size=8, max_epochs=DESK["epochs"],
                          early_stop_test_mse=1e-6, patience=DESK["epochs"],
                          dropout_rates=(0.3, 0.3, 0.2))


@pytest.fixture(scope="module")
def desk_run():
    started = time.perf_counter()
    images = synthetic_images(1000, DESK["h"], DESK["w"], seed=1)
    key = init_encoder(DESK["h"], DESK["w"], 10, DESK["p"], seed=1)
    ds = split_dataset(build_encoding_pairs(key, images), 0.1, seed=7)
    decoder = init_decoder(DESK["p"], DESK["hidden"], DESK["h"], DESK["w"], 0.2, [0.3, 0.3, 0.2], seed=3)
    trained, history = train_decoder(decoder, ds, desk_config())
    report = evaluate_decoder(trained, ds)
    return dict(key=key, ds=ds, decoder=trained, history=history, report=report,
                seconds=time.perf_counter() - started)


def test_criterion_3_desk_scale_experiment(criterion, desk_run):
    report, history = desk_run["report"], desk_run["history"]
    first5 = history.test_mse[:5]
    decreasing = all(b < a for a, b in zip(first5, first5[1:]))
    ratio = report.baseline_ratio
    passed = ratio <= 0.8 and decreasing and desk_run["seconds"] < 600
    criterion(3, passed, f"test mse {report.mean_mse:.5f} vs baseline {report.baseline_mse:.5f} "
                         f"(ratio {ratio:.3f}), first 5 test mse {[f'{v:.6f}' for v in first5]}, "
                         f"{len(history.records)} epochs, {desk_run['seconds']:.0f}s")
    assert ratio <= 0.8
    assert decreasing
    assert desk_run["seconds"] < 600


def test_criterion_8_adversary(criterion, desk_run):
    started = time.perf_counter()
    key, ds = desk_run["key"], desk_run["ds"]
    attacker = synthetic_images(500, DESK["h"], DESK["w"], seed=1001)
    legit = desk_run["report"]
    attack = adversary_attack(key, attacker, desk_config(), ds, hidden_sizes=DESK["hidden"])
    wrong_key = init_encoder(DESK["h"], DESK["w"], 10, DESK["p"], seed=2)
    control = adversary_attack(wrong_key, attacker, desk_config(), ds, hidden_sizes=DESK["hidden"])
    seconds = time.perf_counter() - started
    attack_ok = attack.mean_mse <= 1.5 * legit.mean_mse
    control_ok = control.mean_mse >= 0.9 * control.baseline_mse
    passed = attack_ok and control_ok and seconds < 900
    criterion(8, passed, f"true-key attack {attack.mean_mse:.5f} vs legit {legit.mean_mse:.5f} "
                         f"(x{attack.mean_mse / legit.mean_mse:.2f}); wrong-key {control.mean_mse:.5f} "
                         f"vs baseline {control.baseline_mse:.5f} (x{control.baseline_ratio:.2f}), {seconds:.0f}s")
    assert attack_ok
    assert control_ok
    assert seconds < 900


# --- 4: early-stop contract -------------------------------------------------

@pytest.mark.parametrize("k", [1, 4, 10])
def test_criterion_4_early_stop(criterion, k):
    img = synthetic_images(1, 2, 2)[0]
    pairs = build_encoding_pairs(init_encoder(2, 2, 3, 4), [img] * 3)
    ds = PairDataset(pairs.encodings, pairs.targets, 2, 2, is_test=np.array([False, False, True]))
    seen = []

    def stub(model, epoch):
        seen.append(epoch)
        return 0.1, 0.074 if epoch == k else 0.2 - 0.001 * epoch

    config = TrainingConfig(learning_rate=0.01, batch_size=1, max_epochs=20, patience=50,
                            early_stop_test_mse=0.075, dropout_rates=(0.0,))
    _, history = train_decoder(init_decoder(4, [3], 2, 2, dropout_rates=[0.0]), ds, config, stub)
    passed = (history.stop_reason == StopReason.REACHED_THRESHOLD and len(history.records) == k
              and seen == list(range(1, k + 1)) and history.best_epoch == k)
    criterion(4, passed, f"k={k}: stopped after {len(history.records)} epochs, {history.stop_reason.value}")
    assert passed


# --- 5: end-to-end determinism ----------------------------------------------

def cli_pipeline(root, images):
    root.mkdir()
    src = root / "images"
    src.mkdir()
    for img in images:
        Image.fromarray(img.pixels).save(src / f"{img.source_id}.png")
    steps = [
        ["init-encoder", "--height", "8", "--width", "8", "--encoding-size", "16", "--seed", "99",
         "--out", "key.sedd"],
        ["encode", "--key", "key.sedd", "--images", "images", "--out", "enc.seddenc"],
        ["train", "--key", "key.sedd", "--images", "images", "--hidden-sizes", "16,16",
         "--dropout", "0.3,0.2", "--lr", "0.5", "--batch-size", "4", "--max-epochs", "4",
         "--threshold", "1e-6", "--out", "dec.sedd", "--history", "history.csv"],
        ["decode", "--decoder", "dec.sedd", "--encodings", "enc.seddenc", "--out-dir", "decoded"],
    ]
    for argv in steps:
        subprocess.run([sys.executable, "-m", "sedd", *argv], cwd=root, check=True, capture_output=True)
    names = ["key.sedd", "enc.seddenc", "dec.sedd"]
    names += sorted(f"decoded/{p.name}" for p in (root / "decoded").iterdir())
    return {name: (root / name).read_bytes() for name in names}


def test_criterion_5_end_to_end_determinism(criterion, tmp_path):
    images = synthetic_images(12, 8, 8, seed=5)
    first = cli_pipeline(tmp_path / "run1", images)
    second = cli_pipeline(tmp_path / "run2", images)
    differing = [name for name in first if first[name] != second.get(name)]
    passed = first.keys() == second.keys() and not differing and len(first) == 3 + 12
    criterion(5, passed, f"{len(first)} files compared, {len(differing)} differ")
    assert passed, differing


# --- 6: serialization -------------------------------------------------------

def random_artifact(rng):
    kind = rng.integers(3)
    seed = int(rng.integers(0, 2**63))
    h, w = (int(v) for v in rng.integers(1, 4, size=2))
    if kind == 0:
        return init_encoder(h, w, int(rng.integers(1, 5)), int(rng.integers(1, 9)), seed)
    if kind == 1:
        hidden = [int(v) for v in rng.integers(1, 7, size=int(rng.integers(1, 4)))]
        rates = [float(r) for r in rng.uniform(0, 0.9, len(hidden))]
        model = init_decoder(int(rng.integers(1, 9)), hidden, h, w, float(rng.uniform(0, 0.9)), rates, seed)
        for layer in model.layers:  # nonzero biases exercise the bias payload
            layer.bias[:] = rng.normal(size=layer.bias.shape)
        return model
    return rng.uniform(0, 1, (int(rng.integers(0, 6)), int(rng.integers(1, 9)))).astype(np.float32)


def round_trip_exact(item):
    if isinstance(item, np.ndarray):
        data = dump_encodings(item, item.shape[1])
        back = load_encodings(data)
        return back.shape == item.shape and back.tobytes() == item.tobytes()
    data = dump_model(item)
    back = parse_model(data)
    same = type(back) is type(item) and dump_model(back) == data
    for a, b in zip(item.layers, back.layers):
        same &= a.weights.tobytes() == b.weights.tobytes() and a.bias.tobytes() == b.bias.tobytes()
    if isinstance(item, DecoderModel):
        same &= back.alpha == item.alpha and back.dropout_rates == item.dropout_rates
    return same and back.seed == item.seed


def test_criterion_6_serialization(criterion):
    rng = np.random.default_rng(6)
    bad_round_trips = sum(not round_trip_exact(random_artifact(rng)) for _ in range(1000))

    samples = [dump_model(init_encoder(2, 2, 3, 4, seed=3)),
               dump_model(init_decoder(3, [4], 1, 2, dropout_rates=[0.3], seed=4))]
    undetected, corruptions = 0, 0
    for data in samples:
        for pos in range(len(data)):
            for flip in range(1, 256):
                bad = bytearray(data)
                bad[pos] ^= flip
                corruptions += 1
                try:
                    parse_model(bytes(bad))
                    undetected += 1
                except CorruptionError:
                    pass
    assert zlib.crc32(samples[0][:-4]) == int.from_bytes(samples[0][-4:], "little")
    passed = bad_round_trips == 0 and undetected == 0
    criterion(6, passed, f"1000 round trips, {bad_round_trips} inexact; "
                         f"{corruptions} single-byte corruptions of 2 model files, {undetected} accepted")
    assert bad_round_trips == 0
    assert undetected == 0


# --- 7: parameter counts ----------------------------------------------------

def test_criterion_7_parameter_counts(criterion):
    enc = encoder_param_count(67_500, 10, 1024)
    dec = decoder_param_count(1024, [512, 512, 512], 67_500)
    # published figures for this architecture are 15,774 (encoder) and
    # 36,727,212 (decoder); neither follows from the stated layer sizes.
    # 15,774 is what an input of 450 would give, and the decoder figure is
    # exactly one extra 1024x1024 dense layer above ours. We pin the formula.
    documented = (encoder_param_count(450, 10, 1024) == 15_774
                  and 36_727_212 - dec == 1024 * 1024 + 1024)
    passed = enc == 686_274 and dec == 35_677_612 and documented
    criterion(7, passed, f"encoder {enc:,} (published 15,774), decoder {dec:,} (published 36,727,212)")
    assert passed


# --- 9: range invariants ----------------------------------------------------

@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**64 - 1), st.integers(1, 6), st.integers(1, 6), st.integers(1, 12),
       st.integers(1, 48), st.integers(0, 2**32 - 1))
def check_encoding_range(key_seed, h, w, hidden, p, image_seed):
    img = ImageRecord(np.random.default_rng(image_seed).integers(0, 256, (h, w, 3), dtype=np.uint8))
    x = encode_image(init_encoder(h, w, hidden, p, seed=key_seed), img)
    assert x.shape == (p,) and np.all(x > 0) and np.all(x < 1)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**64 - 1), st.integers(1, 8), st.integers(1, 4),
       arrays(np.float32, 8, elements=st.floats(-1e6, 1e6, width=32)))
def check_decoded_range(model_seed, width, side, x):
    model = init_decoder(8, [width], side, side, dropout_rates=[0.0], seed=model_seed)
    for layer in model.layers:
        layer.weights *= 100  # push the output sigmoid into saturation
    img = decode_image(model, x)
    assert img.pixels.dtype == np.uint8 and img.pixels.shape == (side, side, 3)
    assert 0 <= int(img.pixels.min()) and int(img.pixels.max()) <= 255


@settings(max_examples=100, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(1, 10), st.integers(1, 10), st.just(3))))
def check_flatten_round_trip(pixels):
    img = ImageRecord(pixels)
    assert reshape_to_image(flatten_image(img), *pixels.shape[:2]) == img


def test_criterion_9_range_invariants(criterion):
    results = {}
    for name, check in [("encodings in (0,1)", check_encoding_range),
                        ("decoded pixels in [0,255]", check_decoded_range),
                        ("flatten/reshape identity", check_flatten_round_trip)]:
        try:
            check()
            results[name] = True
        except AssertionError:
            results[name] = False
    passed = all(results.values())
    criterion(9, passed, ", ".join(f"{k}: {'ok' if v else 'violated'}" for k, v in results.items()))
    assert passed
