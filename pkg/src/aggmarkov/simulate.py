"""Path simulation.

Semi-Markov paths are drawn by inverting the cumulative hazard of the
total exit rate; aggregate Markov paths are drawn exactly, interval by
interval, restarting the exponential clock at each grid point.  Every path
gets its own generator seeded with ``(seed, path_index)``, so results do
not depend on the number of workers.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .data import MacroPath, MicroPath
from .model import ResetModel

# Gauss-Legendre rule used inside accepted Simpson leaves
_GL_X, _GL_W = np.polynomial.legendre.leggauss(8)


def path_rng(seed, index):
    return np.random.default_rng([int(seed), int(index)])


def _adaptive_simpson(f, a, b, tol=1e-13, max_depth=40, f_right=None):
    """Adaptive Simpson on each panel ``(a[n], b[n]]``.

    Returns the accepted leaves ``(lo, hi, integral)`` sorted by ``lo``.
    ``f`` must accept arrays.  ``f_right`` gives right limits and is used at
    the panel left ends, so a left-continuous integrand is read from the
    panel's own piece.
    """
    lo = np.asarray(a, dtype=float)
    hi = np.asarray(b, dtype=float)
    keep = hi > lo
    lo, hi = lo[keep], hi[keep]
    fa = (f_right or f)(lo)
    fb = f(hi)
    mid = 0.5 * (lo + hi)
    fm = f(mid)
    whole = (hi - lo) / 6.0 * (fa + 4 * fm + fb)
    out_lo, out_hi, out_val = [], [], []
    for _ in range(max_depth):
        if lo.size == 0:
            break
        lm, rm = 0.5 * (lo + mid), 0.5 * (mid + hi)
        flm, frm = f(lm), f(rm)
        left = (mid - lo) / 6.0 * (fa + 4 * flm + fm)
        right = (hi - mid) / 6.0 * (fm + 4 * frm + fb)
        err = left + right - whole
        if not np.all(np.isfinite(err)):
            raise FloatingPointError("non-finite hazard")
        ok = np.abs(err) <= 15 * tol * np.maximum(hi - lo, 1e-3)
        out_lo.append(lo[ok])
        out_hi.append(hi[ok])
        out_val.append(left[ok] + right[ok] + err[ok] / 15.0)
        bad = ~ok
        lo, mid_b, hi = lo[bad], mid[bad], hi[bad]
        fa, fm_b, fb = fa[bad], fm[bad], fb[bad]
        flm, frm = flm[bad], frm[bad]
        left, right = left[bad], right[bad]
        # children: (lo, mid) and (mid, hi)
        lo, hi = np.concatenate([lo, mid_b]), np.concatenate([mid_b, hi])
        fa, fb = np.concatenate([fa, fm_b]), np.concatenate([fm_b, fb])
        fm = np.concatenate([flm, frm])
        whole = np.concatenate([left, right])
        mid = 0.5 * (lo + hi)
    else:
        if lo.size:
            out_lo.append(lo)
            out_hi.append(hi)
            out_val.append(whole)
    L = np.concatenate(out_lo) if out_lo else np.zeros(0)
    H = np.concatenate(out_hi) if out_hi else np.zeros(0)
    V = np.concatenate(out_val) if out_val else np.zeros(0)
    order = np.argsort(L, kind="stable")
    return L[order], H[order], V[order]


def _gl_integral(f, a, b):
    if b <= a:
        return 0.0
    x = 0.5 * (b - a) * _GL_X + 0.5 * (a + b)
    return float(0.5 * (b - a) * np.dot(_GL_W, f(x)))


@dataclass
class SemiMarkovRates:
    """Transition rates ``nu_ij(t, u)`` of a semi-Markov process.

    ``rates[(i, j)]`` is a vectorised callable of calendar time ``t`` and
    duration ``u``.  ``t_breaks`` and ``u_breaks`` list known
    discontinuities so the hazard mesh can split there.
    """

    J: int
    rates: dict
    absorbing: frozenset = frozenset()
    t_breaks: tuple = ()
    u_breaks: tuple = ()
    labels: dict = field(default_factory=dict)
    start_time: float = 0.0
    horizon: float = math.inf
    mesh_step: float = 1.0

    def exits(self, i):
        return sorted(j for (a, j) in self.rates if a == i)

    def rate(self, i, j, t, u):
        v = np.asarray(self.rates[(i, j)](np.asarray(t, float), np.asarray(u, float)), dtype=float)
        if np.any(~np.isfinite(v)) or np.any(v < 0):
            raise ValueError(f"rate {(i, j)} is negative or non-finite")
        return v

    def total(self, i, t, u):
        t = np.asarray(t, float)
        u = np.asarray(u, float)
        out = np.zeros(np.broadcast(t, u).shape)
        for j in self.exits(i):
            out = out + self.rate(i, j, t, u)
        return out

    def _mesh(self, entry, length):
        nodes = [0.0, length]
        nodes += [b for b in self.u_breaks if 0 < b < length]
        nodes += [b - entry for b in self.t_breaks if 0 < b - entry < length]
        nodes += list(np.arange(self.mesh_step, length, self.mesh_step))
        return np.unique(np.asarray(nodes, dtype=float))

    def hazard_leaves(self, i, entry, length):
        """Leaves of the adaptive quadrature of the total exit rate on ``(0, length]``."""
        nodes = self._mesh(entry, length)

        def f(u):
            return self.total(i, entry + u, u)

        def f_right(u):
            return self.total(i, np.nextafter(entry + u, np.inf), np.nextafter(u, np.inf))

        return _adaptive_simpson(f, nodes[:-1], nodes[1:], f_right=f_right)

    def cumulative_hazard(self, i, entry, u):
        """``int_0^u sum_j nu_ij(entry + v, v) dv`` at each value of ``u``."""
        u = np.atleast_1d(np.asarray(u, dtype=float))
        umax = float(u.max())
        if umax <= 0:
            return np.zeros_like(u)
        lo, hi, val = self.hazard_leaves(i, entry, umax)
        cum = np.concatenate([[0.0], np.cumsum(val)])
        out = np.empty_like(u)

        def f(x):
            return self.total(i, entry + x, x)

        for n, x in enumerate(u):
            if x <= 0:
                out[n] = 0.0
                continue
            m = int(np.searchsorted(hi, x, side="left"))
            m = min(m, lo.size - 1)
            out[n] = cum[m] + _gl_integral(f, lo[m], x)
        return out

    def sojourn_survival(self, i, entry, u):
        return np.exp(-self.cumulative_hazard(i, entry, u))

    def sample_sojourn(self, i, entry, length, rng):
        """Draw ``(duration, destination)``; destination is None past ``length``."""
        e = rng.exponential()
        if length <= 0:
            return length, None
        lo, hi, val = self.hazard_leaves(i, entry, length)
        cum = np.cumsum(val)
        if cum.size == 0 or cum[-1] < e:
            return length, None
        m = int(np.searchsorted(cum, e, side="left"))
        base = cum[m - 1] if m > 0 else 0.0
        a, b = lo[m], hi[m]

        def f(x):
            return self.total(i, entry + x, x)

        def g(x):
            return base + _gl_integral(f, a, x) - e

        ga, gb = g(a), g(b)
        if ga >= 0:
            u = a
        elif gb <= 0:
            u = b
        else:
            u = brentq(g, a, b, xtol=1e-10)
        js = self.exits(i)
        w = np.array([float(self.rate(i, j, entry + u, u)) for j in js])
        if w.sum() <= 0:
            # crossing exactly at a discontinuity; read the rates just inside
            uu = np.nextafter(u, -np.inf)
            w = np.array([float(self.rate(i, j, entry + uu, uu)) for j in js])
        j = js[int(rng.choice(len(js), p=w / w.sum()))]
        return u, j


# -- disability benchmark ---------------------------------------------------

def _nu12(t, u):
    t = np.asarray(t, float)
    poly = (72.53851 - 10.66927 * t + 0.53371 * t**2 - 0.012798 * t**3
            + 1.4922e-4 * t**4 - 6.8007e-7 * t**5)
    out = np.where(t <= 67, np.exp(np.minimum(poly, 700.0)), 0.0009687435)
    return out * np.ones(np.broadcast(t, np.asarray(u)).shape)


def _nu21(t, u):
    t, u = np.broadcast_arrays(np.asarray(t, float), np.asarray(u, float))
    return np.select(
        [u <= 0.2291667, u <= 2, u <= 5],
        [
            np.exp(-0.9148875 - 0.0309126 * t + 4.8715347 * u),
            np.exp(0.3766531 - 0.0309126 * t - 0.7642786 * u),
            np.exp(-0.4808001 - 0.0309126 * t - 0.335552 * u),
        ],
        np.exp(-0.042168 - 0.092455 * t),
    )


def _nu23(t, u):
    t, u = np.broadcast_arrays(np.asarray(t, float), np.asarray(u, float))
    return np.where(
        u <= 5,
        np.exp(-6.1057464 + 0.0635736 * t - 0.2891195 * u),
        np.exp(-11.9169277 + 0.1356766 * t),
    )


def _nu13(t, u):
    t = np.asarray(t, float)
    return (0.0005 + 0.000075 * 1.09**t) * np.ones(np.broadcast(t, np.asarray(u)).shape)


def disability_preset():
    """Active (1), disabled (2), dead (3); ages 30 to 110.

    Recovery and disabled mortality depend on age and duration of
    disability.  The active mortality ``nu13`` is a synthetic
    Gompertz-Makeham curve.
    """
    return SemiMarkovRates(
        J=3,
        rates={(1, 2): _nu12, (1, 3): _nu13, (2, 1): _nu21, (2, 3): _nu23},
        absorbing=frozenset({3}),
        t_breaks=(67.0,),
        u_breaks=(0.2291667, 2.0, 5.0),
        labels={(1, 3): "synthetic-benchmark"},
        start_time=30.0,
        horizon=110.0,
    )


DISABILITY_FIT_GRID = tuple([30.0] + [float(a) for a in range(36, 89)] + [110.0])


def _semi_markov_path(rates, idx, seed, initial_state, start, horizon):
    rng = path_rng(seed, idx)
    t, s = start, initial_state
    jumps = []
    while True:
        if s in rates.absorbing or not rates.exits(s):
            return MacroPath(str(idx), tuple(jumps), None, initial_state, start)
        u, dest = rates.sample_sojourn(s, t, horizon - t, rng)
        if dest is None:
            return MacroPath(str(idx), tuple(jumps), horizon, initial_state, start)
        t = t + u
        if t >= horizon:
            return MacroPath(str(idx), tuple(jumps), horizon, initial_state, start)
        jumps.append((t, dest))
        s = dest


def simulate_semi_markov(rates, n, seed, initial_state=1, start=None, horizon=None, workers=1):
    """Simulate ``n`` semi-Markov macro paths, censored at ``horizon``."""
    if n < 0:
        raise ValueError("n must be nonnegative")
    start = rates.start_time if start is None else float(start)
    horizon = rates.horizon if horizon is None else float(horizon)
    if not math.isfinite(horizon) or horizon <= start:
        raise ValueError("horizon must be finite and after the start")

    def one(idx):
        return _semi_markov_path(rates, idx, seed, initial_state, start, horizon)

    if workers <= 1:
        return [one(i) for i in range(n)]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(one, range(n)))


# -- aggregate Markov -------------------------------------------------------

def _aggregate_path(gens, bounds, init, layout, idx, seed, initial_state, start, horizon):
    rng = path_rng(seed, idx)
    grid_lo, grid_hi = bounds
    dbar = layout.total
    a = int(rng.choice(init.size, p=init / init.sum()))
    cur = layout.flat(initial_state, a)
    jumps = []
    t = start
    while True:
        if layout.unflat(cur)[0] in layout.absorbing:
            return MicroPath(str(idx), start, (initial_state, a), jumps, t, False)
        k = int(np.searchsorted(grid_lo, t, side="right"))  # interval in force after t
        M = gens[k - 1]
        q = -M[cur, cur]
        seg_end = min(grid_hi[k - 1], horizon)
        if q <= 0:
            if seg_end >= horizon:
                return MicroPath(str(idx), start, (initial_state, a), jumps, horizon, True)
            t = seg_end
            continue
        h = rng.exponential(1.0 / q)
        if t + h > seg_end:
            t = seg_end
            if t >= horizon:
                return MicroPath(str(idx), start, (initial_state, a), jumps, horizon, True)
            continue
        t = t + h
        p = M[cur].copy()
        p[cur] = 0.0
        nxt = int(rng.choice(dbar, p=p / p.sum()))
        jumps.append((t, layout.unflat(nxt)))
        cur = nxt


def simulate_aggregate(model, n, seed, start=None, horizon=None, initial_state=None, workers=1):
    """Simulate ``n`` micro paths of an aggregate model.

    ``model`` is a :class:`ResetModel` or a general piecewise model.  Returns
    ``(micro_paths, macro_paths)``; paths are censored at ``horizon`` unless
    absorbed first.
    """
    grid = model.grid
    start = grid.origin if start is None else float(start)
    if horizon is None or not math.isfinite(horizon) or horizon <= start:
        raise ValueError("a finite horizon after the start is required")
    initial_state = model.start_state if initial_state is None else int(initial_state)
    if isinstance(model, ResetModel):
        pm = model.to_piecewise()
        init = model.initial_distribution(grid.k_of(start), initial_state)
    else:
        pm = model
        init = pm.initial[initial_state]
    gens = pm.generators
    bounds = (grid.lower, grid.upper)

    def one(idx):
        return _aggregate_path(gens, bounds, init, pm.layout, idx, seed, initial_state, start, horizon)

    if workers <= 1:
        micro = [one(i) for i in range(n)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            micro = list(ex.map(one, range(n)))
    macro = [m.to_macro() for m in micro]
    return micro, macro
