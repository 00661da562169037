"""Poisson and multinomial regression for the M-step, and crude rates.

Both solvers run Newton steps on a QR-whitened design with step halving,
so the objective never decreases.  That keeps EM monotone when they are
warm-started from the previous iterate.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np

# logit assigned to categories with no observations
PINNED_LOGIT = -30.0
MAX_STEP = 20.0  # bound on one Newton step in whitened coordinates


class RankDeficientError(ValueError):
    """Design matrix does not have full column rank on the used rows."""


@dataclass
class PoissonFit:
    coef: np.ndarray
    zero: bool = False
    converged: bool = True
    n_iter: int = 0
    loglik: float = 0.0
    deviance: float = 0.0
    excluded: list = field(default_factory=list)
    trace: list = field(default_factory=list)


def _whiten(X):
    Q, R = np.linalg.qr(X)
    d = np.abs(np.diag(R))
    if d.size and d.min() <= 1e-10 * max(1.0, d.max()):
        raise RankDeficientError("design matrix is rank deficient")
    return Q, R


def _poisson_obj(y, off, eta):
    lin = off + eta
    with np.errstate(over="ignore"):
        return float(np.dot(y, lin) - np.exp(lin).sum())


def _round_tol(y, lin):
    """Size of floating-point noise in the objective; smaller changes are ties."""
    return 1e-13 * float(np.abs(y * lin).sum() + np.exp(lin).sum())


def _newton_step(H, g, max_norm=MAX_STEP):
    """Newton step ``H^{-1} g`` capped at ``max_norm``.

    On the whitened design a step of norm ``r`` moves any linear predictor
    by at most ``r``; the cap keeps near-singular systems (saturated fitted
    probabilities) from producing steps that lose all precision.
    """
    try:
        x = np.linalg.solve(H, g)
        if not np.all(np.isfinite(x)):
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        x = np.linalg.lstsq(H, g, rcond=None)[0]
    norm = float(np.linalg.norm(x))
    return x * (max_norm / norm) if norm > max_norm else x


def poisson_fit(counts, exposure, X, init=None, tol=1e-10, max_iter=100):
    """Maximise ``sum y log(mu) - mu`` with ``mu = exposure * exp(X coef)``.

    Rows with zero exposure are dropped.  If every count is zero the rate
    is pinned to zero (``zero=True``).  Columns that vanish on the used
    rows are excluded and their coefficients kept at 0 (or at ``init``).
    The score criterion is ``max|X^T (y - mu)| <= tol * max(1, sum y)``.
    """
    y = np.asarray(counts, dtype=float).ravel()
    e = np.asarray(exposure, dtype=float).ravel()
    X = np.atleast_2d(np.asarray(X, dtype=float))
    p = X.shape[1]
    if y.shape != e.shape or X.shape[0] != y.size:
        raise ValueError("counts, exposure and X must have matching rows")
    if np.any(y < 0) or np.any(e < 0) or not np.all(np.isfinite(y)) or not np.all(np.isfinite(e)):
        raise ValueError("counts and exposures must be finite and nonnegative")
    if np.any((e <= 0) & (y > 0)):
        raise ValueError("positive count with zero exposure")
    coef = np.zeros(p) if init is None else np.array(init, dtype=float)
    used = e > 0
    if y.sum() <= 0 or not used.any():
        return PoissonFit(coef, zero=True)
    y, e, X = y[used], e[used], X[used]
    active = np.any(X != 0, axis=0)
    excluded = [int(c) for c in np.flatnonzero(~active)]
    Xa = X[:, active]
    Q, R = _whiten(Xa)
    off = np.log(e)
    if init is None:
        # least-squares projection of the crude log rate onto the design
        crude = np.log(y.sum() / e.sum())
        gamma = Q.T @ np.full(y.size, crude)
    else:
        gamma = R @ coef[active]
    obj = _poisson_obj(y, off, Q @ gamma)
    scale = max(1.0, y.sum())
    trace = [obj]
    converged = False
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        mu = np.exp(off + Q @ gamma)
        score = Q.T @ (y - mu)
        if np.max(np.abs(score)) <= tol * scale:
            converged = True
            n_iter -= 1
            break
        info = Q.T @ (mu[:, None] * Q)
        step = _newton_step(info, score)
        t = 1.0
        while True:
            cand = gamma + t * step
            new = _poisson_obj(y, off, Q @ cand)
            if np.isfinite(new) and new >= obj - _round_tol(y, off + Q @ gamma):
                break
            t *= 0.5
            if t < 1e-12:
                cand, new = gamma, obj
                break
        if cand is gamma:
            # no ascent possible at machine precision
            converged = np.max(np.abs(score)) <= 1e-6 * scale
            break
        gamma, obj = cand, new
        trace.append(obj)
    coef = coef.copy()
    coef[active] = np.linalg.solve(R, gamma)
    mu = e * np.exp(X @ coef)
    with np.errstate(divide="ignore", invalid="ignore"):
        term = np.where(y > 0, y * np.log(y / mu), 0.0)
    dev = float(2 * np.sum(term - (y - mu)))
    if not converged:
        warnings.warn("Poisson regression did not converge", RuntimeWarning)
    return PoissonFit(coef, False, converged, n_iter, obj, dev, excluded, trace)


@dataclass
class MultinomialFit:
    coef: np.ndarray  # (d-1, p), last category is the reference
    converged: bool = True
    n_iter: int = 0
    loglik: float = 0.0
    pinned: list = field(default_factory=list)
    trace: list = field(default_factory=list)


def _pinned_coef(X):
    """Coefficients giving logit ``PINNED_LOGIT`` on every row (least squares)."""
    return np.linalg.lstsq(X, np.full(X.shape[0], PINNED_LOGIT), rcond=None)[0]


def _mn_obj(Y, logits):
    if not np.all(np.isfinite(logits)):
        return -np.inf
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    return float(np.sum(Y * logits) - np.sum(Y.sum(axis=1) * lse))


def multinomial_fit(counts, X, init=None, tol=1e-10, max_iter=100):
    """Multinomial logit with the last category as reference.

    ``counts`` is (n, d) (possibly fractional), ``X`` is (n, p).  Categories
    with zero total count get logit ``PINNED_LOGIT`` and are listed in
    ``pinned``.  If the reference itself is empty the fit uses the first
    non-empty category internally and converts back.
    """
    Y = np.atleast_2d(np.asarray(counts, dtype=float))
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n, d = Y.shape
    p = X.shape[1]
    if X.shape[0] != n:
        raise ValueError("counts and X must have matching rows")
    if np.any(Y < 0) or not np.all(np.isfinite(Y)):
        raise ValueError("counts must be finite and nonnegative")
    if d == 1:
        return MultinomialFit(np.zeros((0, p)))
    used = Y.sum(axis=1) > 0
    start = np.zeros((d - 1, p)) if init is None else np.array(init, dtype=float)
    if not used.any():
        return MultinomialFit(start, pinned=list(range(d)))
    Y, X = Y[used], X[used]
    tot = Y.sum(axis=0)
    empty = tot <= 0
    pinned = [int(c) for c in np.flatnonzero(empty)]
    if pinned:
        warnings.warn(f"empty initial categories {pinned} pinned", RuntimeWarning)
    ref = d - 1 if not empty[d - 1] else int(np.flatnonzero(~empty)[0])
    free = [c for c in range(d) if c != ref and not empty[c]]
    active = np.any(X != 0, axis=0)
    Xa = X[:, active]
    Q, R = _whiten(Xa)
    pin_gamma = R @ _pinned_coef(Xa)

    # internal coefficients relative to `ref`
    full0 = np.vstack([start, np.zeros((1, p))])
    full0 = full0 - full0[ref]
    G = np.array([R @ full0[c, active] for c in free]).reshape(len(free), -1)
    if init is None:
        G[:] = 0.0
        for m, c in enumerate(free):
            # start at the pooled log odds
            G[m] = Q.T @ np.full(Y.shape[0], np.log(tot[c] / tot[ref]))

    def logits_of(G):
        L = np.zeros((Y.shape[0], d))
        for m, c in enumerate(free):
            L[:, c] = Q @ G[m]
        for c in pinned:
            L[:, c] = Q @ pin_gamma
        return L

    obj = _mn_obj(Y, logits_of(G))
    trace = [obj]
    scale = max(1.0, Y.sum())
    converged = not free
    n_iter = 0
    nf, q = len(free), Q.shape[1]
    for n_iter in range(1, max_iter + 1 if free else 1):
        L = logits_of(G)
        P = np.exp(L - L.max(axis=1, keepdims=True))
        P /= P.sum(axis=1, keepdims=True)
        nrow = Y.sum(axis=1)
        Pf = P[:, free]
        resid = Y[:, free] - nrow[:, None] * Pf
        score = (Q.T @ resid).T  # (nf, q)
        if np.max(np.abs(score)) <= tol * scale:
            converged = True
            n_iter -= 1
            break
        H = np.zeros((nf, q, nf, q))
        for a in range(nf):
            for b in range(nf):
                w = nrow * (Pf[:, a] * ((a == b) - Pf[:, b]))
                H[a, :, b, :] = Q.T @ (w[:, None] * Q)
        step = _newton_step(H.reshape(nf * q, nf * q), score.ravel()).reshape(nf, q)
        t = 1.0
        while True:
            cand = G + t * step
            new = _mn_obj(Y, logits_of(cand))
            if np.isfinite(new) and new >= obj - 1e-13 * float(np.abs(Y * L).sum() + Y.sum()):
                break
            t *= 0.5
            if t < 1e-12:
                cand, new = G, obj
                break
        if cand is G:
            converged = np.max(np.abs(score)) <= 1e-6 * scale
            break
        G, obj = cand, new
        trace.append(obj)
    full = np.zeros((d, p))
    for m, c in enumerate(free):
        full[c, active] = np.linalg.solve(R, G[m])
    for c in pinned:
        full[c, active] = np.linalg.solve(R, pin_gamma)
    coef = full[: d - 1] - full[d - 1]
    if not converged:
        warnings.warn("multinomial regression did not converge", RuntimeWarning)
    return MultinomialFit(coef, converged, n_iter, obj, pinned, trace)


def occurrence_exposure(O, E):
    """Crude rates ``O / E``; NaN where both are zero."""
    O = np.asarray(O, dtype=float)
    E = np.asarray(E, dtype=float)
    if np.any((E <= 0) & (O > 0)):
        raise ValueError("occurrences with zero exposure")
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(E > 0, O / np.where(E > 0, E, 1.0), np.nan)


def initial_mle(B, N=None):
    """Crude initial distribution ``B / N`` (``N`` defaults to ``B.sum()``)."""
    B = np.asarray(B, dtype=float)
    N = B.sum(axis=-1, keepdims=True) if N is None else N
    with np.errstate(divide="ignore", invalid="ignore"):
        return B / N
