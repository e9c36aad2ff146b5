import math
import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from fogsound import classifier as clf
from fogsound.errors import CorruptModel, DimensionMismatch, DivergenceDetected, TooSmall, VersionMismatch


def random_dataset(rng, n=20, dim=193):
    return clf.Dataset(rng.normal(size=(n, dim)), rng.integers(0, 10, n))


def balanced(rng, per_class, dim=193):
    y = np.repeat(np.arange(10), per_class)
    return clf.Dataset(rng.normal(size=(len(y), dim)), y)


def test_parameter_count():
    assert clf.init_model(0).n_params == 193 * 280 + 280 + 280 * 300 + 300 + 300 * 10 + 10 == 141_630


def test_init_is_deterministic_glorot():
    a, b = clf.init_model(5), clf.init_model(5)
    assert a.same_as(b)
    assert not a.same_as(clf.init_model(6))
    for w, (i, o) in zip(a.weights, zip(clf.LAYER_DIMS[:-1], clf.LAYER_DIMS[1:])):
        assert w.shape == (o, i)
        assert np.abs(w).max() <= math.sqrt(6 / (i + o))
    assert all(not b.any() for b in a.biases)


def test_zero_model_is_uniform():
    model = clf.zero_model()
    np.testing.assert_allclose(clf.forward(model, np.ones(193)), 0.1)
    assert clf.classify(model, np.ones(193)) == 0


def test_zero_model_loss_is_ln10(rng):
    assert clf.loss(clf.zero_model(), random_dataset(rng)) == pytest.approx(math.log(10), abs=1e-12)


def test_confident_correct_model_has_zero_loss(rng):
    model = clf.zero_model()
    model.biases[-1][3] = 1000.0
    ds = clf.Dataset(rng.normal(size=(5, 193)), np.full(5, 3))
    assert clf.loss(model, ds) == pytest.approx(0.0, abs=1e-12)


@given(arrays(np.float64, 193, elements=st.floats(-50, 50)), st.integers(0, 1000))
def test_probabilities_sum_to_one(x, seed):
    p = clf.forward(clf.init_model(seed % 7), x)
    assert p.shape == (10,)
    assert np.all(p >= 0)
    assert p.sum() == pytest.approx(1.0, abs=1e-9)


@given(st.floats(-100, 100))
def test_output_bias_shift_invariance(c):
    rng = np.random.default_rng(1)
    model = clf.init_model(2)
    x = rng.normal(size=193)
    shifted = model.copy()
    shifted.biases[-1] += c
    np.testing.assert_allclose(clf.forward(shifted, x), clf.forward(model, x), atol=1e-12)


def test_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        clf.forward(clf.zero_model(), np.zeros(40))


# --------------------------------------------------------------- gradients

def test_gradient_matches_finite_differences(rng):
    model = clf.init_model(4)
    model.biases = [rng.normal(scale=0.1, size=b.shape) for b in model.biases]
    ds = random_dataset(rng)
    analytic = clf.grad(model, ds)
    params = model.params()
    h = 1e-5
    checked = 0
    for k, p in enumerate(params):
        for flat in rng.choice(p.size, size=10, replace=False):
            idx = np.unravel_index(flat, p.shape)
            orig = p[idx]
            p[idx] = orig + h
            up = clf.loss(model, ds)
            p[idx] = orig - h
            down = clf.loss(model, ds)
            p[idx] = orig
            a, b = analytic[k][idx], (up - down) / (2 * h)
            rel = abs(a - b) / max(abs(a), abs(b), 1e-7)
            assert rel <= 1e-4, (k, idx, a, b)
            checked += 1
    assert checked >= 50


def test_gradient_of_duplicated_dataset(rng):
    model = clf.init_model(1)
    ds = random_dataset(rng, 8)
    doubled = clf.Dataset(np.vstack([ds.x, ds.x]), np.concatenate([ds.y, ds.y]))
    for a, b in zip(clf.grad(model, ds), clf.grad(model, doubled)):
        np.testing.assert_allclose(a, b, atol=1e-14)


def test_silence_features_give_finite_gradients():
    from fogsound.audio import AudioClip
    from fogsound.features import extract_features

    fv = extract_features(AudioClip(np.zeros(16000, np.int16)))
    ds = clf.Dataset.from_items([(fv, 4)])
    assert all(np.isfinite(g).all() for g in clf.grad(clf.init_model(0), ds))


# ----------------------------------------------------------------- training

def test_zero_epochs_is_identity(rng):
    model = clf.init_model(0)
    assert clf.train(model, random_dataset(rng), clf.TrainSpec(epochs=0)).same_as(model)


def test_training_is_deterministic_and_pure(rng):
    ds = random_dataset(rng, 30)
    model = clf.init_model(0)
    before = model.copy()
    a = clf.train(model, ds, clf.TrainSpec(epochs=20, learning_rate=0.05))
    b = clf.train(model, ds, clf.TrainSpec(epochs=20, learning_rate=0.05))
    assert a.same_as(b)
    assert model.same_as(before)
    assert clf.loss(a, ds) < clf.loss(model, ds)


def test_single_step_decreases_loss(rng):
    ds = random_dataset(rng)
    model = clf.init_model(9)
    assert clf.loss(clf.train(model, ds, clf.TrainSpec(epochs=1, learning_rate=0.01)), ds) < clf.loss(model, ds)


def test_divergence_detected(rng):
    ds = clf.Dataset(rng.normal(scale=1e3, size=(10, 193)), rng.integers(0, 10, 10))
    with pytest.raises(DivergenceDetected):
        clf.train(clf.init_model(0), ds, clf.TrainSpec(epochs=50, learning_rate=1e30))


def test_invalid_train_spec():
    with pytest.raises(ValueError):
        clf.TrainSpec(epochs=-1)
    with pytest.raises(ValueError):
        clf.TrainSpec(learning_rate=0.0)


def test_trained_model_separates_classes(trained_model, small_dataset):
    assert clf.evaluate(trained_model, small_dataset) >= 0.95


def test_normalizer_standardizes(rng):
    ds = clf.Dataset(rng.normal(5.0, 3.0, size=(50, 193)), rng.integers(0, 10, 50))
    model = clf.fit_normalizer(clf.zero_model(), ds)
    z = (ds.x - model.input_mean) / model.input_scale
    np.testing.assert_allclose(z.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(z.std(axis=0), 1.0, atol=1e-12)


# --------------------------------------------------------------- evaluation

def test_evaluate_extremes(rng):
    assert clf.evaluate(clf.zero_model(), balanced(rng, 3)) == pytest.approx(0.1)
    ds = clf.Dataset(rng.normal(size=(7, 193)), np.zeros(7, int))
    assert clf.evaluate(clf.zero_model(), ds) == 1.0


def test_split_is_stratified(rng):
    ds = balanced(rng, 10)
    train, test = clf.split_dataset(ds, 0.7, seed=3)
    assert (len(train), len(test)) == (70, 30)
    assert np.all(np.bincount(train.y, minlength=10) == 7)
    assert np.all(np.bincount(test.y, minlength=10) == 3)
    rows = {r.tobytes() for r in np.vstack([train.x, test.x])}
    assert rows == {r.tobytes() for r in ds.x}
    again = clf.split_dataset(ds, 0.7, seed=3)
    np.testing.assert_array_equal(again[0].x, train.x)


def test_split_too_small(rng):
    ds = clf.Dataset(rng.normal(size=(1, 193)), np.array([2]))
    with pytest.raises(TooSmall):
        clf.split_dataset(ds)


# ---------------------------------------------------------------- model file

def test_save_load_round_trip(tmp_path, rng):
    model = clf.fit_normalizer(clf.init_model(8), random_dataset(rng, 30))
    size = clf.save_model(model, tmp_path / "m.bin")
    loaded = clf.load_model(tmp_path / "m.bin")
    assert loaded.same_as(model)
    x = rng.normal(size=193)
    assert clf.forward(loaded, x).tobytes() == clf.forward(model, x).tobytes()
    assert size == 4 + 4 + 16 + 8 * (141_630 + 2 * 193) + 4
    assert (tmp_path / "m.bin").read_bytes()[:4] == b"FMLP"


def test_truncated_and_corrupted_files():
    blob = clf.model_to_bytes(clf.init_model(0))
    for cut in (0, 3, 11, 100, len(blob) - 1):
        with pytest.raises(CorruptModel):
            clf.model_from_bytes(blob[:cut])
    flipped = bytearray(blob)
    flipped[500] ^= 0x01
    with pytest.raises(CorruptModel):
        clf.model_from_bytes(bytes(flipped))


def test_version_mismatch():
    blob = bytearray(clf.model_to_bytes(clf.zero_model())[:-4])
    blob[4:6] = struct.pack("<H", 99)
    blob += struct.pack("<I", zlib.crc32(bytes(blob)))
    with pytest.raises(VersionMismatch):
        clf.model_from_bytes(bytes(blob))
