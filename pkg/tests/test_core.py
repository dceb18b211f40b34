"""Numerics primitives: stability, hand values, simplex contracts."""

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nuclass import (
    DimensionError,
    check_simplex,
    entropy,
    layer_norm,
    log_softmax,
    margin,
    normalized_entropy,
    sigmoid,
    softmax,
    top1,
)


def test_softmax_matches_direct_formula():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(40, 7)) * 3.0
    expected = np.exp(x - x.max(axis=1, keepdims=True))
    expected /= expected.sum(axis=1, keepdims=True)
    assert np.allclose(softmax(x), expected, atol=1e-12)


def test_softmax_extreme_logits_stay_finite():
    x = np.array([[1000.0, 0.0, -1000.0], [-1e6, -1e6, -1e6]])
    p = softmax(x)
    assert np.all(np.isfinite(p))
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-12)
    assert p[0, 0] == pytest.approx(1.0)
    assert np.allclose(p[1], 1.0 / 3.0)


def test_softmax_shift_invariance():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(5, 4))
    assert np.allclose(softmax(x), softmax(x + 123.456), atol=1e-12)


def test_log_softmax_against_mpmath():
    mpmath.mp.dps = 50
    x = [2.0, -1.0, 0.5, 7.25]
    exps = [mpmath.exp(v) for v in x]
    lse = mpmath.log(sum(exps))
    expected = np.array([float(v - lse) for v in x])
    assert np.allclose(log_softmax(np.array(x)), expected, atol=1e-14)


def test_log_softmax_is_log_of_softmax():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(10, 6)) * 2.0
    assert np.allclose(log_softmax(x), np.log(softmax(x)), atol=1e-12)


def test_sigmoid_values_and_symmetry():
    assert sigmoid(0.0) == pytest.approx(0.5)
    x = np.linspace(-8, 8, 33)
    assert np.allclose(sigmoid(x) + sigmoid(-x), 1.0, atol=1e-15)
    assert np.allclose(sigmoid(x), 1.0 / (1.0 + np.exp(-x)), atol=1e-15)
    assert sigmoid(1000.0) == 1.0
    assert sigmoid(-1000.0) == 0.0


def test_layer_norm_hand_case():
    x = np.array([1.0, 2.0, 3.0, 4.0])
    eps = 1e-5
    expected = (x - 2.5) / np.sqrt(1.25 + eps)
    assert np.allclose(layer_norm(x, eps=eps), expected, atol=1e-15)


def test_layer_norm_standardizes_rows():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(20, 16)) * 5 + 3
    out = layer_norm(x)
    assert np.allclose(out.mean(axis=-1), 0.0, atol=1e-12)
    assert np.allclose(out.var(axis=-1), 1.0, atol=1e-4)


def test_check_simplex_accepts_and_rejects():
    check_simplex(np.array([0.2, 0.3, 0.5]))
    check_simplex(np.full((4, 5), 0.2))
    with pytest.raises(ValueError):
        check_simplex(np.array([0.5, 0.6]))
    with pytest.raises(ValueError):
        check_simplex(np.array([1.2, -0.2]))


def test_entropy_hand_values():
    assert entropy(np.array([0.5, 0.5])) == pytest.approx(np.log(2.0))
    assert entropy(np.array([1.0, 0.0, 0.0])) == pytest.approx(0.0)
    assert entropy(np.full(8, 0.125)) == pytest.approx(np.log(8.0))


def test_normalized_entropy_bounds():
    assert normalized_entropy(np.full(5, 0.2)) == pytest.approx(1.0)
    assert normalized_entropy(np.array([1.0, 0.0])) == pytest.approx(0.0)
    batch = np.array([[0.25, 0.75], [0.5, 0.5]])
    out = normalized_entropy(batch)
    assert out.shape == (2,)
    assert out[1] == pytest.approx(1.0)


def test_margin_and_top1():
    p = np.array([0.7, 0.2, 0.1])
    assert margin(p) == pytest.approx(0.5)
    idx, val = top1(p)
    assert idx == 0 and val == pytest.approx(0.7)
    batch = np.array([[0.1, 0.9], [0.6, 0.4]])
    assert np.allclose(margin(batch), [0.8, 0.2])
    idxs, vals = top1(batch)
    assert np.array_equal(idxs, [1, 0])
    assert np.allclose(vals, [0.9, 0.6])


def test_entropy_rejects_non_simplex():
    with pytest.raises(ValueError):
        entropy(np.array([0.9, 0.9]))


def test_margin_needs_two_classes():
    with pytest.raises(DimensionError):
        margin(np.array([1.0]))


@settings(max_examples=200, deadline=None)
@given(
    st.lists(
        st.floats(min_value=-200.0, max_value=200.0, allow_nan=False),
        min_size=2,
        max_size=12,
    )
)
def test_softmax_always_lands_on_simplex(logits):
    p = softmax(np.array(logits))
    check_simplex(p, atol=1e-9)
    assert np.all(p >= 0.0) and np.all(p <= 1.0)
