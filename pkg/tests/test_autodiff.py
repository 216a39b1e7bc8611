import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mupod import autodiff as ad
from mupod.autodiff import Tensor


def leaf(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def test_matmul_shapes_and_mismatch():
    a = Tensor(np.ones((2, 3)))
    b = Tensor(np.ones((3, 4)))
    assert ad.matmul(a, b).shape == (2, 4)
    with pytest.raises(ad.DimensionError) as err:
        ad.matmul(a, Tensor(np.ones((2, 4))))
    assert "2x3" in str(err.value) or "(2, 3)" in str(err.value)


def test_row_bias_broadcast_only():
    x = Tensor(np.ones((3, 4)))
    assert ad.add(x, Tensor(np.ones((1, 4)))).shape == (3, 4)
    with pytest.raises(ad.DimensionError):
        ad.add(x, Tensor(np.ones((3, 1))))


def test_sum_of_product_gradient():
    a = Tensor([[1.0, 2.0]], requires_grad=True)
    b = Tensor([[3.0, 4.0]], requires_grad=True)
    loss = ad.total(ad.mul(a, b))
    ad.backward(loss)
    np.testing.assert_array_equal(a.grad, [[3.0, 4.0]])
    np.testing.assert_array_equal(b.grad, [[1.0, 2.0]])


def test_reused_node_accumulates():
    x = Tensor([[2.0]], requires_grad=True)
    y = ad.mul(x, x)
    ad.backward(ad.total(ad.add(y, y)))
    assert x.grad[0, 0] == 8.0


def test_backward_twice_raises():
    x = Tensor([[1.0]], requires_grad=True)
    loss = ad.total(ad.square(x))
    ad.backward(loss)
    with pytest.raises(ad.GradientError):
        ad.backward(loss)


def test_backward_needs_scalar():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ad.GradientError):
        ad.backward(ad.square(x))


def test_softmax_masked_entries_are_zero():
    s = Tensor(np.random.default_rng(0).normal(size=(3, 4)), requires_grad=True)
    mask = np.array([[True, False, True, True]] * 3)
    p = ad.softmax_rows(s, mask)
    assert np.all(p.data[:, 1] == 0.0)
    np.testing.assert_allclose(p.data.sum(axis=1), 1.0)


def test_softmax_large_logits_finite():
    p = ad.softmax_rows(Tensor([[1000.0, 0.0, -1000.0]]))
    assert np.all(np.isfinite(p.data))
    assert p.data[0, 0] == pytest.approx(1.0)


def test_cross_entropy_clamps():
    probs = Tensor([[1.0, 0.0]], requires_grad=True)
    loss = ad.cross_entropy(probs, [1])
    assert loss.item() == pytest.approx(-math.log(ad.LOG_EPS))
    ad.backward(loss)
    assert np.all(np.isfinite(probs.grad))


def test_cross_entropy_label_count():
    with pytest.raises(ad.DimensionError):
        ad.cross_entropy(Tensor(np.full((2, 2), 0.5)), [0])


def test_batched_matmul_shares_weight_gradient():
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(size=(3, 4, 5)))
    w = leaf(rng, 5, 2)
    ad.backward(ad.total(ad.matmul(x, w)))
    expected = sum(x.data[b].T @ np.ones((4, 2)) for b in range(3))
    np.testing.assert_allclose(w.grad, expected)


def test_grad_check_catches_wrong_gradient():
    x = Tensor([[0.3, -0.2]], requires_grad=True)

    def f():
        out = ad.total(ad.square(x))
        out._backward = lambda g: ad._accumulate(x, 3.0 * x.data * g)  # wrong on purpose
        return out

    # the wrong backward is on the root node only; rebuild gives the same bad rule
    assert ad.grad_check(f, [x]) > 0.1


@given(st.integers(0, 10_000))
def test_grad_check_random_composition(seed):
    rng = np.random.default_rng(seed)
    x = leaf(rng, 3, 4)
    w = leaf(rng, 4, 2)
    b = leaf(rng, 1, 2)

    def f():
        h = ad.tanh(ad.add(ad.matmul(x, w), b))
        p = ad.softmax_rows(ad.mul(h, ad.sigmoid(h)))
        return ad.cross_entropy(p, [0, 1, 1])

    assert ad.grad_check(f, [x, w, b]) <= 1e-6


@given(st.integers(0, 10_000), st.floats(-50, 50))
def test_softmax_shift_invariance(seed, c):
    a = np.random.default_rng(seed).normal(size=(3, 5))
    p1 = ad.softmax_rows(Tensor(a)).data
    p2 = ad.softmax_rows(Tensor(a + c)).data
    np.testing.assert_allclose(p1, p2, atol=1e-12)


@given(st.integers(0, 10_000))
def test_matmul_associativity(seed):
    rng = np.random.default_rng(seed)
    a, b, c = (Tensor(rng.normal(size=s)) for s in ((2, 3), (3, 4), (4, 2)))
    left = ad.matmul(ad.matmul(a, b), c).data
    right = ad.matmul(a, ad.matmul(b, c)).data
    np.testing.assert_allclose(left, right, atol=1e-10)


@given(st.integers(0, 10_000))
def test_concat_slice_roundtrip(seed):
    rng = np.random.default_rng(seed)
    a, b = leaf(rng, 3, 2), leaf(rng, 3, 4)
    cat = ad.concat_cols([a, b])
    np.testing.assert_array_equal(ad.slice_cols(cat, 2, 6).data, b.data)

    def f():
        c = ad.concat_cols([a, b])
        return ad.total(ad.square(ad.slice_cols(c, 1, 4)))

    assert ad.grad_check(f, [a, b]) <= 1e-6


def test_stack_rows_and_flatten_batch():
    rng = np.random.default_rng(2)
    parts = [leaf(rng, 2, 1, 3) for _ in range(4)]
    s = ad.stack_rows(parts)
    assert s.shape == (2, 4, 3)
    np.testing.assert_array_equal(s.data[:, 2], parts[2].data[:, 0])
    flat = ad.flatten_batch(ad.row(s, 1))
    assert flat.shape == (2, 3)
