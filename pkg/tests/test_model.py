import math

import numpy as np
import pytest
from scipy.integrate import quad

from aggmarkov.data import MacroPath
from aggmarkov.model import (
    Basis,
    InitParams,
    MicroLayout,
    RateParams,
    ResetModel,
    TimeGrid,
    alpha,
    default_covariate_times,
    load_model,
    macro_loglik,
    model_from_dict,
    model_to_dict,
    path_logliks,
    save_model,
    sojourn_log_density,
)
from helpers import constant_model, random_model


# -- grid and layout ---------------------------------------------------------

def test_grid_left_open_convention():
    g = TimeGrid([0.0, 2.0, 5.0])
    assert g.K == 3
    assert g.k_of(0.0) == 0
    assert g.k_of(2.0) == 1
    assert g.k_of(2.0000001) == 2
    assert g.k_of(100.0) == 3
    assert g.segment_of(2.0) == 2
    assert g.segment_of(0.0) == 1
    assert g.bounds(3) == (5.0, math.inf)
    np.testing.assert_allclose(g.overlaps(1.0, 6.0), [1.0, 3.0, 1.0])


@pytest.mark.parametrize("pts", [[], [0.0, 0.0], [1.0, 0.5], [0.0, np.inf]])
def test_grid_rejects_bad_points(pts):
    with pytest.raises(ValueError):
        TimeGrid(pts)


def test_grid_rejects_time_before_origin():
    with pytest.raises(ValueError):
        TimeGrid([1.0, 2.0]).k_of(0.5)


def test_layout_indexing():
    lay = MicroLayout((1, 3, 1), absorbing=(3,))
    assert lay.total == 5
    assert lay.flat(2, 0) == 1 and lay.flat(3, 0) == 4
    assert lay.unflat(3) == (2, 2)
    assert lay.transitions == ((1, 2), (1, 3), (2, 1), (2, 3))
    assert lay.exits(2) == [1, 3]
    assert MicroLayout.from_dict(lay.to_dict()) == lay
    with pytest.raises(IndexError):
        lay.flat(2, 3)


def test_layout_validation():
    with pytest.raises(ValueError):
        MicroLayout((1, 2), absorbing=(2,))
    with pytest.raises(ValueError):
        MicroLayout((1, 1), absorbing=(2,), transitions=[(2, 1)])
    with pytest.raises(ValueError):
        MicroLayout((1, 0))


def test_default_covariate_times():
    g = TimeGrid([0.0, 1.0, 3.0, 4.0])
    np.testing.assert_allclose(default_covariate_times(g), [0.0, 0.5, 2.0, 3.5, 4.5])
    np.testing.assert_allclose(default_covariate_times(TimeGrid([2.0])), [2.0, 2.5])


# -- rate evaluation ---------------------------------------------------------

def test_log_linear_rate_direct_evaluation():
    lay = MicroLayout((1, 1))
    grid = TimeGrid([0.0])
    theta = RateParams.zeros(lay, 2)
    theta.exit[(1, 2)][0] = [-1.0, 0.1]
    m = ResetModel(lay, grid, Basis("poly", 1), theta, InitParams.zeros(lay, 2),
                   covariate_times=[0.0, 10.0])
    assert m.exit[(1, 2)][0, 0] == pytest.approx(1.0, rel=1e-15)


def test_initial_distribution_closed_forms():
    lay = MicroLayout((1, 2, 3))
    grid = TimeGrid([0.0, 1.0])
    eta = InitParams.zeros(lay, 2)
    eta.eta[2][0] = [math.log(2.0), 0.0]
    m = ResetModel(lay, grid, Basis("poly", 1), eta=eta)
    for k in range(3):
        np.testing.assert_allclose(m.initial_distribution(k, 1), [1.0])
        np.testing.assert_allclose(m.initial_distribution(k, 2), [2 / 3, 1 / 3], rtol=1e-15)
        np.testing.assert_allclose(m.initial_distribution(k, 3), [1 / 3] * 3, rtol=1e-15)


def test_pinned_exit_rates_leave_within_diagonal():
    lay = MicroLayout((2, 1))
    grid = TimeGrid([0.0, 1.0])
    m = random_model(lay, grid, np.random.default_rng(1))
    theta = m.theta.copy()
    for key in theta.exit_zero:
        theta.exit_zero[key][:] = True
    z = m.with_params(theta, m.eta)
    for k in range(grid.K):
        np.testing.assert_array_equal(z.exit[(1, 2)][k], 0.0)
        W = z.within[1][k]
        np.testing.assert_allclose(np.diag(z.sub[1][k]), -W.sum(axis=1), rtol=1e-15)


def test_full_generator_rows_sum_to_zero():
    lay = MicroLayout((2, 3, 1), absorbing=(3,))
    grid = TimeGrid([0.0, 1.0, 2.5])
    m = random_model(lay, grid, np.random.default_rng(2))
    for k in range(1, grid.K + 1):
        M = m.full_generator(k)
        assert np.abs(M.sum(axis=1)).max() <= 1e-12
        np.testing.assert_array_equal(M[lay.block(3)], 0.0)


def test_unit_layout_is_plain_markov_chain():
    lay = MicroLayout((1, 1, 1), absorbing=(3,))
    grid = TimeGrid([0.0])
    m = constant_model(lay, grid, {1: [[0]], 2: [[0]]},
                       {(1, 2): [0.3], (1, 3): [0.1], (2, 1): [0.5], (2, 3): [0.2]})
    M = m.full_generator(1)
    np.testing.assert_allclose(M, [[-0.4, 0.3, 0.1], [0.5, -0.7, 0.2], [0, 0, 0]], rtol=1e-15)
    for i in (1, 2, 3):
        np.testing.assert_array_equal(m.initial_distribution(1, i), [1.0])


def test_model_arrays_are_read_only():
    m = random_model(MicroLayout((2, 1)), TimeGrid([0.0]), np.random.default_rng(0))
    with pytest.raises(ValueError):
        m.sub[1][0, 0, 0] = 1.0


def test_rejects_wrong_shapes_and_nonfinite():
    lay = MicroLayout((2, 1))
    grid = TimeGrid([0.0])
    theta = RateParams.zeros(lay, 2)
    theta.exit[(1, 2)] = np.zeros((3, 2))
    with pytest.raises(ValueError):
        ResetModel(lay, grid, Basis(), theta)
    theta = RateParams.zeros(lay, 2)
    theta.within[1][0, 1, 0] = np.nan
    with pytest.raises(ValueError):
        ResetModel(lay, grid, Basis(), theta)


# -- likelihood ---------------------------------------------------------------

def test_alpha_without_jumps_is_initial_distribution():
    m = random_model(MicroLayout((3, 1)), TimeGrid([0.0, 1.0]), np.random.default_rng(3))
    np.testing.assert_allclose(alpha(m, [0.0], [1]), m.initial_distribution(0, 1))


def test_alpha_unit_layout_exponential_product():
    lay = MicroLayout((1, 1, 1), absorbing=(3,))
    grid = TimeGrid([0.0, 2.0])
    m = constant_model(lay, grid, {1: [[0]], 2: [[0]]},
                       {(1, 2): [0.3], (1, 3): [0.1], (2, 1): [0.5], (2, 3): [0.2]})
    val = alpha(m, [0.0, 1.5, 4.0, 4.5], [1, 2, 1, 3]).sum()
    hand = (math.exp(-0.4 * 1.5) * 0.3) * (math.exp(-0.7 * 2.5) * 0.5) * (math.exp(-0.4 * 0.5) * 0.1)
    assert val == pytest.approx(hand, rel=1e-13)


def test_alpha_factorises_over_sojourns():
    lay = MicroLayout((2, 3, 1), absorbing=(3,))
    grid = TimeGrid([0.0, 1.0, 2.0, 3.5])
    m = random_model(lay, grid, np.random.default_rng(4))
    times, states = [0.0, 0.7, 2.0, 2.9, 5.1], [1, 2, 1, 2, 3]
    total = alpha(m, times, states).sum()
    prod = 1.0
    for a, b, i, j in zip(times, times[1:], states, states[1:]):
        prod *= math.exp(sojourn_log_density(m, a, i, b, j))
    assert total == pytest.approx(prod, rel=1e-12)
    path = MacroPath("p", tuple(zip(times[1:], states[1:])))
    assert macro_loglik(m, [path]) == pytest.approx(math.log(total), rel=1e-12)


def test_alpha_extension_factor_nonnegative():
    lay = MicroLayout((2, 2))
    grid = TimeGrid([0.0, 1.0])
    m = random_model(lay, grid, np.random.default_rng(5))
    short = alpha(m, [0.0, 0.4], [1, 2])
    longer = alpha(m, [0.0, 0.4, 1.3], [1, 2, 1])
    assert short.min() >= 0 and longer.min() >= 0
    assert longer.sum() / short.sum() >= 0


def test_alpha_rejects_bad_paths():
    m = random_model(MicroLayout((2, 2)), TimeGrid([0.0]), np.random.default_rng(0))
    with pytest.raises(ValueError):
        alpha(m, [0.0, 1.0], [1, 1])
    with pytest.raises(ValueError):
        alpha(m, [0.0, 0.0], [1, 2])


def test_exponential_sojourn_log_density():
    lay = MicroLayout((1, 1, 1), absorbing=(3,))
    m = constant_model(lay, TimeGrid([0.0]), {1: [[0]], 2: [[0]]},
                       {(1, 2): [0.25], (1, 3): [0.5], (2, 1): [1.0], (2, 3): [1.0]})
    assert sojourn_log_density(m, 1.0, 1, 3.0, 2) == pytest.approx(math.log(0.25) - 0.75 * 2.0, rel=1e-14)
    assert sojourn_log_density(m, 1.0, 1, 3.0, None) == pytest.approx(-1.5, rel=1e-14)


def test_macro_loglik_empty_and_impossible():
    lay = MicroLayout((1, 1, 1), absorbing=(3,))
    m = constant_model(lay, TimeGrid([0.0]), {1: [[0]], 2: [[0]]},
                       {(1, 2): [0.25], (1, 3): [0.0], (2, 1): [1.0], (2, 3): [1.0]})
    assert macro_loglik(m, []) == 0.0
    with pytest.warns(RuntimeWarning, match="zero likelihood"):
        assert macro_loglik(m, [MacroPath("x", ((1.0, 3),))]) == -math.inf


def test_unit_layout_loglik_equals_occurrence_exposure_form():
    lay = MicroLayout((1, 1, 1), absorbing=(3,))
    grid = TimeGrid([0.0, 1.0, 2.0])
    m = random_model(lay, grid, np.random.default_rng(6))
    paths = [
        MacroPath("a", ((0.5, 2), (1.7, 1), (2.6, 3))),
        MacroPath("b", ((1.2, 2),), censor_time=3.0),
        MacroPath("c", (), censor_time=2.2),
    ]
    from aggmarkov.data import macro_stats

    _, E, O = macro_stats(paths, grid, 3)
    direct = 0.0
    for (i, j), rate in m.exit.items():
        lam = rate[:, 0]
        direct += np.sum(O[:, i - 1, j - 1] * np.log(lam)) - np.sum(lam * E[:, i - 1])
    assert macro_loglik(m, paths) == pytest.approx(direct, rel=1e-10)


def test_loglik_invariant_under_relabelling():
    lay = MicroLayout((3, 2, 1), absorbing=(3,))
    grid = TimeGrid([0.0, 1.0, 2.0])
    m = random_model(lay, grid, np.random.default_rng(7))
    paths = [MacroPath("a", ((0.4, 2), (1.5, 1), (2.5, 3))), MacroPath("b", ((1.1, 2),), 3.3)]
    base = macro_loglik(m, paths)
    for i, perm in ((1, [2, 0, 1]), (2, [1, 0])):
        assert macro_loglik(m.permuted(i, perm), paths) == pytest.approx(base, rel=1e-10, abs=1e-10)


def test_sojourn_density_matches_monte_carlo():
    # macrostate 1 with two microstates, exits only to 2
    lay = MicroLayout((2, 1))
    W = np.array([[0.0, 0.8], [0.3, 0.0]])
    beta = np.array([0.2, 1.5])
    pi = np.array([0.6, 0.4])
    m = constant_model(lay, TimeGrid([0.0]), {1: W, 2: [[0]]}, {(1, 2): beta, (2, 1): [1.0]}, {1: pi})

    rng = np.random.default_rng(2024)
    n = 1_000_000
    state = (rng.random(n) < pi[1]).astype(int)
    t = np.zeros(n)
    alive = np.ones(n, dtype=bool)
    q = W.sum(axis=1) + beta
    while alive.any():
        idx = np.flatnonzero(alive)
        s = state[idx]
        t[idx] += rng.exponential(1.0 / q[s])
        leave = rng.random(idx.size) < beta[s] / q[s]
        alive[idx[leave]] = False
        state[idx[~leave]] = 1 - s[~leave]
    a, b = 1.0, 1.1
    p_mc = np.mean((t > a) & (t <= b))
    se = math.sqrt(p_mc * (1 - p_mc) / n)
    p_model = quad(lambda x: math.exp(sojourn_log_density(m, 0.0, 1, x, 2)), a, b, epsabs=1e-13)[0]
    assert abs(p_mc - p_model) <= 3 * se


# -- serialisation -----------------------------------------------------------

def test_json_round_trip_is_exact(tmp_path):
    lay = MicroLayout((2, 3, 1), absorbing=(3,))
    grid = TimeGrid([30.0, 40.0, 55.5])
    m = random_model(lay, grid, np.random.default_rng(8), basis=Basis("poly", 2))
    theta = m.theta.copy()
    theta.exit_zero[(2, 1)][1] = True
    m = m.with_params(theta, m.eta)
    save_model(m, tmp_path / "m.json")
    m2 = load_model(tmp_path / "m.json")
    assert m2.layout == lay and m2.grid == grid and m2.basis == m.basis
    for key in m.theta.within:
        np.testing.assert_array_equal(m2.theta.within[key][~np.eye(lay.dim(key), dtype=bool)],
                                      m.theta.within[key][~np.eye(lay.dim(key), dtype=bool)])
    for key in m.theta.exit:
        np.testing.assert_array_equal(m2.theta.exit[key], m.theta.exit[key])
        np.testing.assert_array_equal(m2.theta.exit_zero[key], m.theta.exit_zero[key])
    for key in m.eta.eta:
        np.testing.assert_array_equal(m2.eta.eta[key], m.eta.eta[key])
    assert model_to_dict(m2) == model_to_dict(m)


def test_json_keeps_explicit_covariates():
    lay = MicroLayout((2, 1))
    grid = TimeGrid([0.0, 1.0])
    m = ResetModel(lay, grid, covariate_times=[0.0, 0.25, 3.0])
    m2 = model_from_dict(model_to_dict(m))
    np.testing.assert_array_equal(m2.covariate_times, [0.0, 0.25, 3.0])
    assert m2.covariate_policy == "explicit"


def test_path_logliks_per_path():
    lay = MicroLayout((2, 1))
    grid = TimeGrid([0.0])
    m = random_model(lay, grid, np.random.default_rng(9))
    paths = [MacroPath("a", ((0.5, 2),), 1.0), MacroPath("b", (), 2.0)]
    ll = path_logliks(m, paths)
    assert ll.shape == (2,)
    assert ll.sum() == pytest.approx(macro_loglik(m, paths))
