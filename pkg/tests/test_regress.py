import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize

from aggmarkov.regress import (
    PINNED_LOGIT,
    RankDeficientError,
    initial_mle,
    multinomial_fit,
    occurrence_exposure,
    poisson_fit,
)
from oracles import poisson_mle


def _softmax_ref(coef, X):
    L = np.concatenate([X @ coef.T, np.zeros((X.shape[0], 1))], axis=1)
    P = np.exp(L - L.max(axis=1, keepdims=True))
    return P / P.sum(axis=1, keepdims=True)


# -- Poisson -------------------------------------------------------------------

def test_intercept_only_closed_form():
    y, e = np.array([3.0, 5.0, 0.0]), np.array([2.0, 4.0, 1.5])
    fit = poisson_fit(y, e, np.ones((3, 1)))
    assert fit.converged
    assert fit.coef[0] == pytest.approx(math.log(8.0 / 7.5), rel=1e-12)


def test_saturated_fit_is_cell_rate():
    y, e = np.array([3.0, 7.5, 1.0]), np.array([2.0, 4.0, 0.5])
    fit = poisson_fit(y, e, np.eye(3))
    np.testing.assert_allclose(np.exp(fit.coef), y / e, rtol=1e-10)


def test_indicator_design_reproduces_occurrence_exposure():
    rng = np.random.default_rng(0)
    e = rng.uniform(1, 10, 6)
    y = rng.poisson(2 * e).astype(float) + 0.5
    np.testing.assert_allclose(np.exp(poisson_fit(y, e, np.eye(6)).coef),
                               occurrence_exposure(y, e), rtol=1e-9)


def test_linear_log_rate_recovery_and_oracle():
    rng = np.random.default_rng(1)
    t = np.linspace(30, 90, 61)
    e = np.full(t.size, 500.0)
    X = np.column_stack([np.ones_like(t), t])
    y = rng.poisson(e * np.exp(-2 + 0.05 * t)).astype(float)
    assert y.sum() >= 1e5
    fit = poisson_fit(y, e, X)
    mu = e * np.exp(X @ fit.coef)
    cov = np.linalg.inv(X.T @ (mu[:, None] * X))
    se = np.sqrt(np.diag(cov))
    assert np.all(np.abs(fit.coef - [-2.0, 0.05]) <= 3 * se)
    np.testing.assert_allclose(fit.coef, poisson_mle(y, e, X), rtol=1e-6)
    assert np.all(np.diff(fit.trace) >= -1e-13 * abs(fit.trace[-1]))


def test_all_zero_counts_pin_rate():
    fit = poisson_fit(np.zeros(3), np.ones(3), np.ones((3, 1)))
    assert fit.zero


def test_zero_exposure_rows_dropped():
    y, e = np.array([2.0, 0.0, 4.0]), np.array([1.0, 0.0, 2.0])
    X = np.column_stack([np.ones(3), [0.0, 1e6, 1.0]])
    fit = poisson_fit(y, e, X)
    assert fit.converged
    np.testing.assert_allclose(np.exp(fit.coef[0]), 2.0, rtol=1e-9)


def test_invalid_inputs():
    with pytest.raises(ValueError):
        poisson_fit([1.0], [0.0], [[1.0]])
    with pytest.raises(ValueError):
        poisson_fit([-1.0], [1.0], [[1.0]])
    with pytest.raises(ValueError):
        poisson_fit([1.0, 2.0], [1.0], [[1.0]])
    with pytest.raises(RankDeficientError):
        poisson_fit([1.0, 2.0], [1.0, 1.0], [[1.0, 2.0], [2.0, 4.0]])


def test_fractional_counts_are_continuous():
    rng = np.random.default_rng(2)
    t = np.linspace(0, 1, 8)
    X = np.column_stack([np.ones_like(t), t])
    e = np.ones(8) * 5
    y = rng.uniform(1, 6, 8)
    base = poisson_fit(y, e, X).coef
    for eps in (1e-4, 1e-6):
        moved = poisson_fit(y + eps, e, X).coef
        assert np.max(np.abs(moved - base)) <= 10 * eps


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6))
def test_objective_never_decreases(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 12))
    X = np.column_stack([np.ones(n), rng.uniform(-2, 2, n)])
    e = rng.uniform(0.1, 5, n)
    y = rng.uniform(0, 4, n)
    y[0] += 0.1
    fit = poisson_fit(y, e, X, init=rng.normal(0, 2, 2))
    tr = np.array(fit.trace)
    assert np.all(np.diff(tr) >= -1e-12 * max(1.0, abs(tr[-1])))


def test_warm_start_from_optimum_takes_no_steps():
    y, e = np.array([3.0, 5.0]), np.array([2.0, 4.0])
    X = np.column_stack([np.ones(2), [0.0, 1.0]])
    fit = poisson_fit(y, e, X)
    again = poisson_fit(y, e, X, init=fit.coef)
    assert again.n_iter == 0
    np.testing.assert_array_equal(again.coef, fit.coef)


# -- multinomial -------------------------------------------------------------

def test_multinomial_intercept_proportions():
    fit = multinomial_fit([[30.0, 10.0]], [[1.0]])
    np.testing.assert_allclose(_softmax_ref(fit.coef, np.ones((1, 1))), [[0.75, 0.25]], rtol=1e-10)


def test_multinomial_single_row_saturation():
    counts = np.array([[2.0, 5.0, 3.0]])
    fit = multinomial_fit(counts, [[1.0]])
    np.testing.assert_allclose(_softmax_ref(fit.coef, np.ones((1, 1)))[0], counts[0] / 10, rtol=1e-10)


def test_multinomial_single_category():
    fit = multinomial_fit([[4.0], [2.0]], [[1.0], [1.0]])
    assert fit.coef.shape == (0, 1)


def test_multinomial_empty_category_pinned():
    with pytest.warns(RuntimeWarning):
        fit = multinomial_fit([[0.0, 6.0, 2.0]], [[1.0]])
    assert fit.pinned == [0]
    P = _softmax_ref(fit.coef, np.ones((1, 1)))[0]
    assert P[0] == pytest.approx(math.exp(PINNED_LOGIT) / (1 + math.exp(PINNED_LOGIT)) * 0.75, rel=1e-3)
    np.testing.assert_allclose(P[1:] / P[1:].sum(), [0.75, 0.25], rtol=1e-10)


def test_multinomial_empty_reference():
    with pytest.warns(RuntimeWarning):
        fit = multinomial_fit([[3.0, 1.0, 0.0]], [[1.0]])
    assert fit.pinned == [2]
    P = _softmax_ref(fit.coef, np.ones((1, 1)))[0]
    np.testing.assert_allclose(P[:2] / P[:2].sum(), [0.75, 0.25], rtol=1e-10)
    assert P[2] < 1e-12


def test_multinomial_recovery_and_oracle():
    rng = np.random.default_rng(3)
    t = np.linspace(-1, 1, 21)
    X = np.column_stack([np.ones_like(t), t])
    true = np.array([[0.5, 1.0], [-0.3, -0.8]])
    P = _softmax_ref(true, X)
    Y = np.array([rng.multinomial(2000, p) for p in P]).astype(float)
    fit = multinomial_fit(Y, X)
    assert fit.converged
    tr = np.array(fit.trace)
    assert np.all(np.diff(tr) >= -1e-13 * abs(tr[-1]))

    def nll(b):
        Pm = _softmax_ref(b.reshape(2, 2), X)
        return -float(np.sum(Y * np.log(Pm)))

    ref = minimize(nll, np.zeros(4), method="BFGS", options={"gtol": 1e-9}).x.reshape(2, 2)
    assert abs(nll(fit.coef.ravel()) - nll(ref.ravel())) <= 1e-6 * abs(nll(ref.ravel()))
    np.testing.assert_allclose(fit.coef, ref, atol=1e-4)
    # information-based standard errors for the recovery check
    n = Y.sum(axis=1)
    Pf = _softmax_ref(fit.coef, X)[:, :2]
    H = np.zeros((4, 4))
    for a in range(2):
        for b in range(2):
            w = n * Pf[:, a] * ((a == b) - Pf[:, b])
            H[2 * a:2 * a + 2, 2 * b:2 * b + 2] = X.T @ (w[:, None] * X)
    se = np.sqrt(np.diag(np.linalg.inv(H))).reshape(2, 2)
    assert np.all(np.abs(fit.coef - true) <= 3 * se)


def test_multinomial_separated_data_does_not_break():
    # category 0 only before t = 1.5: the MLE sits at infinity and the Hessian saturates
    X = np.column_stack([np.ones(4), [0.0, 1.0, 2.0, 3.0]])
    Y = np.array([[5.0, 0.0], [5.0, 0.0], [0.0, 5.0], [0.0, 5.0]])
    fit = multinomial_fit(Y, X, init=[[900.0, -600.0]])
    tr = np.array(fit.trace)
    assert np.all(np.diff(tr) >= -1e-13 * max(1.0, abs(tr[-1])))
    P = _softmax_ref(fit.coef, X)
    np.testing.assert_allclose(P[:, 0], [1, 1, 0, 0], atol=1e-12)


def test_multinomial_accepts_fractional_counts():
    fit = multinomial_fit([[0.3, 0.7], [1.2, 0.8]], [[1.0], [1.0]])
    P = _softmax_ref(fit.coef, np.ones((1, 1)))[0]
    np.testing.assert_allclose(P, [1.5 / 3, 1.5 / 3], rtol=1e-10)


# -- crude estimators ----------------------------------------------------------

def test_occurrence_exposure_examples():
    assert occurrence_exposure(3.0, 1.5) == 2.0
    assert occurrence_exposure(0.0, 2.0) == 0.0
    assert np.isnan(occurrence_exposure(0.0, 0.0))
    with pytest.raises(ValueError):
        occurrence_exposure(1.0, 0.0)


def test_occurrence_exposure_monte_carlo():
    rng = np.random.default_rng(4)
    E = rng.uniform(50, 200, 30)
    O = rng.poisson(0.7 * E)
    rates = occurrence_exposure(O, E)
    assert np.all(np.abs(rates - 0.7) <= 3 * np.sqrt(0.7 / E))


def test_initial_mle_examples():
    np.testing.assert_allclose(initial_mle([10.0, 0.0], 10), [1.0, 0.0])
    np.testing.assert_allclose(initial_mle([5.0, 5.0], 10), [0.5, 0.5])
    p = initial_mle([[0.3, 2.7], [4.1, 0.9]])
    np.testing.assert_allclose(p.sum(axis=1), 1.0)
