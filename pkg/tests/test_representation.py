import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mupod import autodiff as ad
from mupod.autodiff import Tensor
from mupod.representation import GATES, LstmParams, PretrainConfig, encode_stream, lstm_step, pretrain_encoder
from mupod.synthetic import GeneratorConfig, generate_dataset


def zero_params(n_in=3, h=4):
    p = LstmParams.init(n_in, h, 0)
    for g in GATES:
        p.W[g].data[:] = 0
        p.b[g].data[:] = 0
    return p


def scalar_step(x, h, c, p):
    """Loop-per-unit reference for one cell update."""
    z = list(x) + list(h)
    H = len(h)
    sig = lambda v: 1 / (1 + math.exp(-v))
    gate = {}
    for g in GATES:
        gate[g] = []
        for j in range(H):
            s = p.b[g].data[0, j]
            for i, zi in enumerate(z):
                s += zi * p.W[g].data[i, j]
            gate[g].append(math.tanh(s) if g == "g" else sig(s))
    c2 = [gate["f"][j] * c[j] + gate["i"][j] * gate["g"][j] for j in range(H)]
    h2 = [gate["o"][j] * math.tanh(c2[j]) for j in range(H)]
    return np.array(h2), np.array(c2)


def test_zero_params_examples():
    p = zero_params()
    zero = Tensor(np.zeros((1, 4)))
    h, c = lstm_step(Tensor(np.ones((1, 3))), zero, zero, p)
    np.testing.assert_array_equal(h.data, 0.0)
    c0 = np.array([[0.4, -1.0, 2.0, 0.0]])
    h, c = lstm_step(Tensor(np.ones((1, 3))), zero, Tensor(c0), p)
    np.testing.assert_allclose(c.data, 0.5 * c0, atol=1e-15)
    np.testing.assert_allclose(h.data, 0.5 * np.tanh(0.5 * c0), atol=1e-15)


@given(st.integers(0, 10_000))
def test_step_matches_scalar_loop(seed):
    rng = np.random.default_rng(seed)
    p = LstmParams.init(3, 4, seed)
    x, h, c = rng.normal(size=3), rng.normal(size=4) * 0.5, rng.normal(size=4)
    h2, c2 = lstm_step(Tensor(x), Tensor(h), Tensor(c), p)
    rh, rc = scalar_step(x, h, c, p)
    np.testing.assert_allclose(h2.data[0], rh, atol=1e-12)
    np.testing.assert_allclose(c2.data[0], rc, atol=1e-12)


def test_step_shape_mismatch():
    p = LstmParams.init(3, 4)
    with pytest.raises(ad.DimensionError):
        lstm_step(Tensor(np.ones((1, 5))), Tensor(np.zeros((1, 4))), Tensor(np.zeros((1, 4))), p)


def test_single_step_encoding_and_bounds():
    p = LstmParams.init(3, 10, 1)
    x = np.random.default_rng(0).random((1, 3))
    zero = Tensor(np.zeros((1, 10)))
    h, _ = lstm_step(Tensor(x), zero, zero, p)
    np.testing.assert_allclose(encode_stream(x, p).data, h.data, atol=1e-15)
    out = encode_stream(np.random.default_rng(1).normal(size=(7, 3)) * 10, p).data
    assert out.shape == (7, 10) and np.all(np.abs(out) < 1)


def test_zero_input_zero_bias_is_fixed_point():
    p = LstmParams.init(3, 4, 2)
    for g in GATES:
        p.b[g].data[:] = 0
    np.testing.assert_array_equal(encode_stream(np.zeros((5, 3)), p).data, 0.0)


@given(st.integers(0, 10_000), st.integers(1, 8))
def test_prefix_property(seed, t):
    rng = np.random.default_rng(seed)
    p = LstmParams.init(3, 4, seed)
    x = rng.normal(size=(8, 3))
    full = encode_stream(x, p).data
    np.testing.assert_allclose(encode_stream(x[:t], p).data, full[:t], atol=1e-14)
    y = x.copy()
    y[t:] = rng.normal(size=y[t:].shape)
    np.testing.assert_array_equal(encode_stream(y, p).data[:t], full[:t])


def test_batched_equals_per_sequence():
    rng = np.random.default_rng(3)
    p = LstmParams.init(3, 4, 3)
    x = rng.normal(size=(5, 6, 3))
    batched = encode_stream(x, p).data
    for b in range(5):
        np.testing.assert_allclose(batched[b], encode_stream(x[b], p).data, atol=1e-14)


def test_encoder_gradient():
    rng = np.random.default_rng(4)
    p = LstmParams.init(3, 4, 4)
    x = rng.normal(size=(2, 5, 3))
    params = list(p.named().values())
    err = ad.grad_check(lambda: ad.total(ad.square(encode_stream(x, p))), params)
    assert err <= 1e-4


def test_checkpoint_roundtrip(tmp_path):
    p = LstmParams.init(5, 10, 7)
    p.save(tmp_path / "enc.json")
    q = LstmParams.load(tmp_path / "enc.json")
    for g in GATES:
        np.testing.assert_array_equal(p.W[g].data, q.W[g].data)
        np.testing.assert_array_equal(p.b[g].data, q.b[g].data)


def test_pretrain_zero_iterations_returns_init(small_dataset):
    cfg = PretrainConfig(iterations=0, seed=3)
    enc, _ = pretrain_encoder(small_dataset.part("train"), small_dataset.part("val"), "med", cfg)
    init = LstmParams.init(small_dataset.matrix.med_vocab_size, 10, 3)
    for g in GATES:
        np.testing.assert_array_equal(enc.W[g].data, init.W[g].data)


def test_pretrain_deterministic(small_dataset):
    cfg = PretrainConfig(iterations=5, batch_size=16, eval_every=5, seed=1)
    a, _ = pretrain_encoder(small_dataset.part("train"), small_dataset.part("val"), "diag", cfg)
    b, _ = pretrain_encoder(small_dataset.part("train"), small_dataset.part("val"), "diag", cfg)
    for g in GATES:
        np.testing.assert_array_equal(a.W[g].data, b.W[g].data)


def test_pretrain_learns_single_stream_signal():
    data = generate_dataset(GeneratorConfig(n_patients=600, rule="single-stream", strength=1.0, seed=2))
    cfg = PretrainConfig(iterations=300, eval_every=25, seed=0)
    _, log = pretrain_encoder(data.part("train"), data.part("val"), "med", cfg)
    best = min(log, key=lambda r: r["val_loss"])
    assert best["val_loss"] < log[0]["val_loss"]
    assert best["val_auc"] >= 0.9
