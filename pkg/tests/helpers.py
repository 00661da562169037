"""Shared builders for tests."""

import numpy as np

from aggmarkov.model import Basis, InitParams, MicroLayout, RateParams, ResetModel


def random_subintensity(rng, d, scale=1.0):
    """Random sub-intensity: nonnegative off-diagonal, rows summing to <= 0."""
    A = rng.uniform(0, scale, (d, d))
    np.fill_diagonal(A, 0.0)
    exit_ = rng.uniform(0, scale, d)
    np.fill_diagonal(A, -(A.sum(axis=1) + exit_))
    return A


def random_model(layout, grid, rng, basis=None, lo=0.2, hi=2.0, eta_scale=1.0):
    """Reset model with log-rates drawn uniformly in ``[log lo, log hi]`` per column."""
    basis = basis if basis is not None else Basis.indicator_for(grid)
    p = basis.n_params
    theta = RateParams.zeros(layout, p)
    eta = InitParams.zeros(layout, p)
    X = ResetModel(layout, grid, basis).design[1:]
    for i in theta.within:
        d = layout.dim(i)
        target = rng.uniform(np.log(lo), np.log(hi), (d, d, X.shape[0]))
        theta.within[i] = np.linalg.lstsq(X, target.reshape(-1, X.shape[0]).T, rcond=None)[0].T.reshape(d, d, p)
    for key in theta.exit:
        d = layout.dim(key[0])
        target = rng.uniform(np.log(lo), np.log(hi), (d, X.shape[0]))
        theta.exit[key] = np.linalg.lstsq(X, target.T, rcond=None)[0].T
    for i in eta.eta:
        eta.eta[i] = eta_scale * rng.standard_normal(eta.eta[i].shape)
    return ResetModel(layout, grid, basis, theta, eta)


def constant_model(layout, grid, within, exits, pis=None):
    """Intercept-only model; ``within[i]`` (d,d) rates, ``exits[(i,j)]`` (d,) rates."""
    basis = Basis("poly", 0)
    theta = RateParams.zeros(layout, 1)
    eta = InitParams.zeros(layout, 1)
    for i, W in within.items():
        W = np.asarray(W, float)
        with np.errstate(divide="ignore"):
            theta.within[i] = np.where(W > 0, np.log(np.where(W > 0, W, 1)), 0.0)[:, :, None]
        theta.within_zero[i] = (W <= 0) | np.eye(W.shape[0], dtype=bool)
    for key, b in exits.items():
        b = np.asarray(b, float)
        with np.errstate(divide="ignore"):
            theta.exit[key] = np.where(b > 0, np.log(np.where(b > 0, b, 1)), 0.0)[:, None]
        theta.exit_zero[key] = b <= 0
    for i, p in (pis or {}).items():
        p = np.asarray(p, float)
        eta.eta[i] = (np.log(p[:-1]) - np.log(p[-1]))[:, None]
    return ResetModel(layout, grid, basis, theta, eta)


def two_state_layout(d2):
    return MicroLayout((1, d2, 1), absorbing=(3,))

