"""Small dense matrix kernels.

Matrix exponentials, products of exponentials over piecewise-constant
generators, and the Van Loan block construction for integrals of the form

    int_0^D exp(A (D - u)) C exp(A u) du.
"""

import numpy as np
from scipy.linalg import expm

# durations below this are treated as exactly zero (grid-point jitter)
DURATION_EPS = 1e-14


def _clamp_duration(t):
    t = float(t)
    if abs(t) < DURATION_EPS:
        return 0.0
    return t


def _as_square(A, name="A"):
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[0] == 0:
        raise ValueError(f"{name} must be a non-empty square matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ValueError(f"{name} has non-finite entries")
    return A


def matrix_exp(A, t=1.0):
    """Return ``exp(A t)``.

    Scaling and squaring with a degree-13 diagonal Padé approximant
    (``scipy.linalg.expm``).
    """
    A = _as_square(A)
    t = _clamp_duration(t)
    if not np.isfinite(t):
        raise ValueError("t must be finite")
    if t == 0.0:
        return np.eye(A.shape[0])
    if A.shape[0] == 1:
        return np.exp(A * t)
    return expm(A * t)


def expm_batch(A):
    """``exp`` of a stack of square matrices with shape (n, d, d)."""
    A = np.asarray(A, dtype=float)
    if A.shape[0] == 0:
        return A.copy()
    if A.shape[-1] == 1:
        return np.exp(A)
    return expm(A)


def product_integral(blocks, s, t):
    """Product of matrix exponentials of piecewise-constant generators.

    Parameters
    ----------
    blocks : sequence of (matrix, (lo, hi))
        Generator ``matrix`` is in force on ``(lo, hi]``. Intervals must be
        contiguous and sorted; ``hi`` may be ``inf``.
    s, t : float
        Integration limits, ``s <= t``.

    Returns
    -------
    ndarray
        ``P(s, t)``; the identity when ``s == t``.
    """
    s, t = float(s), float(t)
    if t < s - DURATION_EPS:
        raise ValueError(f"t={t} < s={s}")
    blocks = list(blocks)
    if not blocks:
        raise ValueError("no blocks supplied")
    d = _as_square(blocks[0][0], "block").shape[0]
    if t <= s:
        return np.eye(d)
    prev_hi = None
    covered_lo, covered_hi = blocks[0][1][0], blocks[-1][1][1]
    if s < covered_lo - DURATION_EPS or t > covered_hi + DURATION_EPS:
        raise ValueError(f"blocks cover ({covered_lo}, {covered_hi}], not [{s}, {t}]")
    P = np.eye(d)
    for M, (lo, hi) in blocks:
        if prev_hi is not None and abs(lo - prev_hi) > DURATION_EPS:
            raise ValueError("blocks are not contiguous")
        prev_hi = hi
        a, b = max(lo, s), min(hi, t)
        if b <= a:
            continue
        M = _as_square(M, "block")
        if M.shape[0] != d:
            raise ValueError("blocks have inconsistent dimensions")
        P = P @ matrix_exp(M, b - a)
    return P


def van_loan(A, C, delta):
    """Return ``(exp(A delta), int_0^delta exp(A (delta-u)) C exp(A u) du)``.

    Both come out of one exponential of the block matrix ``[[A, C], [0, A]]``.
    """
    A = _as_square(A)
    C = np.asarray(C, dtype=float)
    d = A.shape[0]
    if C.shape != (d, d):
        raise ValueError(f"C has shape {C.shape}, expected {(d, d)}")
    delta = _clamp_duration(delta)
    if delta < 0:
        raise ValueError("delta must be nonnegative")
    if delta == 0.0:
        return np.eye(d), np.zeros((d, d))
    if d == 1:
        e = np.exp(A[0, 0] * delta)
        return np.array([[e]]), C * (delta * e)
    big = np.zeros((2 * d, 2 * d))
    big[:d, :d] = A
    big[:d, d:] = C
    big[d:, d:] = A
    E = expm(big * delta)
    return E[:d, :d], E[:d, d:]


def van_loan_batch(A, C, delta):
    """Batched :func:`van_loan`; ``A``, ``C`` are (n, d, d), ``delta`` is (n,)."""
    A = np.asarray(A, dtype=float)
    C = np.asarray(C, dtype=float)
    delta = np.asarray(delta, dtype=float)
    n, d, _ = A.shape
    if n == 0:
        return np.zeros((0, d, d)), np.zeros((0, d, d))
    delta = np.where(np.abs(delta) < DURATION_EPS, 0.0, delta)
    if np.any(delta < 0):
        raise ValueError("delta must be nonnegative")
    if d == 1:
        e = np.exp(A * delta[:, None, None])
        return e, C * delta[:, None, None] * e
    big = np.zeros((n, 2 * d, 2 * d))
    big[:, :d, :d] = A
    big[:, :d, d:] = C
    big[:, d:, d:] = A
    E = expm(big * delta[:, None, None])
    return E[:, :d, :d], E[:, :d, d:]


def rank_one_convolution(A, v, w, delta):
    """``int_0^delta exp(A (delta-u)) v w exp(A u) du`` for column ``v``, row ``w``."""
    A = _as_square(A)
    v = np.asarray(v, dtype=float).ravel()
    w = np.asarray(w, dtype=float).ravel()
    d = A.shape[0]
    if v.shape != (d,) or w.shape != (d,):
        raise ValueError("v and w must have the dimension of A")
    if _clamp_duration(delta) < 0:
        raise ValueError("delta must be nonnegative")
    return van_loan(A, np.outer(v, w), delta)[1]
