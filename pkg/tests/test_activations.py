import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fedsi import autodiff as ad
from fedsi.activations import (
    ActivationKind, activate, baseline_activation, maxn, positive_homogeneity_ok, row_normalize,
    si_sigmoid, si_tanh, softmax,
)
from fedsi.autodiff import Graph, finite_difference_check

vectors = arrays(np.float64, st.integers(1, 256), elements=st.floats(-1e3, 1e3))
scales = st.sampled_from([0.5, 2.0, 10.0])


def test_maxn_examples():
    np.testing.assert_array_equal(maxn(np.array([2.0, 4.0, -8.0])), [0.25, 0.5, -1.0])
    np.testing.assert_array_equal(maxn(np.zeros(3), eps=1e-6), np.zeros(3))


def test_maxn_zero_vector_with_zero_eps():
    np.testing.assert_array_equal(maxn(np.zeros(4), eps=0.0), np.zeros(4))
    np.testing.assert_array_equal(si_sigmoid(-np.ones(3), eps=0.0), np.zeros(3))


def test_si_sigmoid_examples():
    np.testing.assert_array_equal(si_sigmoid(np.array([1.0, 2.0, 4.0])), [0.25, 0.5, 1.0])
    np.testing.assert_array_equal(si_sigmoid(np.array([-1.0, -2.0, -3.0])), [0.0, 0.0, 0.0])


def test_si_tanh_examples():
    np.testing.assert_array_equal(si_tanh(np.array([-2.0, 1.0])), [-1.0, 0.5])
    np.testing.assert_array_equal(si_tanh(np.zeros(2)), [0.0, 0.0])


def test_row_normalize_examples():
    np.testing.assert_array_equal(row_normalize(np.array([[1.0, 3.0], [2.0, 2.0]])), [[0.25, 0.75], [0.5, 0.5]])
    np.testing.assert_array_equal(row_normalize(np.array([[0.0, 0.0]])), [[0.0, 0.0]])
    stochastic = np.array([[0.25, 0.75], [1.0, 0.0]])
    np.testing.assert_array_equal(row_normalize(stochastic), stochastic)


def test_row_normalize_rejects_negative():
    with pytest.raises(ValueError, match="non-negative"):
        row_normalize(np.array([[1.0, -0.5]]))


def test_baseline_examples():
    assert baseline_activation(ActivationKind.SIGMOID, np.array([0.0]))[0] == 0.5
    np.testing.assert_array_equal(baseline_activation(ActivationKind.SOFTMAX, np.zeros(4)), [0.25] * 4)
    assert baseline_activation(ActivationKind.TANH, np.array([0.0]))[0] == 0.0
    np.testing.assert_array_equal(baseline_activation(ActivationKind.RELU, np.array([-1.0, 3.0])), [0.0, 3.0])


def test_baseline_rejects_si_kinds():
    with pytest.raises(ValueError):
        baseline_activation(ActivationKind.SI_TANH, np.ones(2))


def test_activate_dispatches_every_kind():
    x = np.array([-1.0, 0.5, 2.0])
    for kind in ActivationKind:
        out = activate(kind, x)
        assert out.shape == x.shape


@settings(max_examples=200, deadline=None)
@given(vectors, scales)
def test_maxn_and_si_tanh_scale_invariant(x, a):
    assume(positive_homogeneity_ok(x))
    np.testing.assert_allclose(maxn(a * x), maxn(x), rtol=0, atol=1e-12)
    np.testing.assert_allclose(si_tanh(a * x), si_tanh(x), rtol=0, atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(vectors, scales)
def test_si_sigmoid_scale_invariant(x, a):
    assume(positive_homogeneity_ok(np.maximum(x, 0.0)))
    np.testing.assert_allclose(si_sigmoid(a * x), si_sigmoid(x), rtol=0, atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(vectors)
def test_ranges(x):
    s = si_sigmoid(x)
    t = si_tanh(x)
    assert np.all((0.0 <= s) & (s <= 1.0))
    assert np.all((-1.0 <= t) & (t <= 1.0))


@settings(max_examples=200, deadline=None)
@given(vectors)
def test_unique_max_attains_unit_magnitude(x):
    mag = np.abs(x)
    top = mag.max()
    assume(top >= 1e-6 and np.sum(mag == top) == 1)
    assert np.sum(np.abs(si_tanh(x)) == 1.0) == 1
    r = np.maximum(x, 0.0)
    if r.max() >= 1e-6 and np.sum(r == r.max()) == 1:
        assert np.sum(si_sigmoid(x) == 1.0) == 1


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 8), st.integers(1, 16)), elements=st.floats(0, 1e3)))
def test_row_normalize_rows_sum_to_one(a):
    out = row_normalize(a)
    sums = a.sum(axis=1)
    big = sums >= 1e-6
    np.testing.assert_allclose(out.sum(axis=1)[big], 1.0, atol=1e-12)
    assert np.all(out[sums == 0] == 0)


def test_standard_activations_not_scale_invariant():
    x = np.random.default_rng(0).normal(size=16)
    for fn in (lambda v: baseline_activation(ActivationKind.SIGMOID, v),
               lambda v: baseline_activation(ActivationKind.TANH, v), softmax):
        assert np.max(np.abs(fn(2.0 * x) - fn(x))) > 1e-6


@pytest.mark.parametrize("fn", [maxn, si_sigmoid, si_tanh, softmax,
                                lambda x: ad.sigmoid(x), lambda x: ad.tanh(x)])
def test_activation_gradients_match_fd(fn):
    rng = np.random.default_rng(7)
    for _ in range(5):
        x0 = rng.normal(size=12)
        w = rng.normal(size=12)
        g = Graph()
        x = g.input("x", x0)
        g.output("y", (fn(x) * w).sum())
        rep = finite_difference_check(g, {"x": x0})
        assert rep.passed and not rep.suspect, rep


def test_row_normalize_gradient_matches_fd():
    rng = np.random.default_rng(8)
    a0 = rng.uniform(0.1, 1.0, size=(3, 5))
    w = rng.normal(size=(3, 5))
    g = Graph()
    a = g.input("a", a0)
    g.output("y", (row_normalize(a) * w).sum())
    rep = finite_difference_check(g, {"a": a0})
    assert rep.passed and not rep.suspect, rep


def test_positive_homogeneity_guard():
    assert positive_homogeneity_ok(np.array([1e-3]))
    assert not positive_homogeneity_ok(np.array([1e-6]))
