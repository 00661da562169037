"""Aggregate Markov models with piecewise-constant rates.

Macrostates are labelled ``1..J``.  Microstates inside macrostate ``i`` are
0-based array positions ``0..d_i-1``.  Grid intervals are labelled ``1..K``
as ``(s_{k-1}, s_k]`` with ``s_K = inf``; per-interval arrays are stored
0-based, so interval ``k`` lives at index ``k-1``.  Initial distributions
have an extra slot: ``pi[i][0]`` is the distribution at the grid origin and
``pi[i][k]`` the one used for entries in interval ``k``.
"""

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .numerics import expm_batch, matrix_exp


class TimeGrid:
    """Grid ``s_0 < s_1 < ... < s_{K-1}``; the last interval is unbounded."""

    def __init__(self, points):
        pts = np.asarray(points, dtype=float).ravel()
        if pts.size == 0:
            raise ValueError("grid needs at least one point")
        if not np.all(np.isfinite(pts)):
            raise ValueError("grid points must be finite")
        if np.any(np.diff(pts) <= 0):
            raise ValueError("grid points must be strictly increasing")
        self.points = pts
        self.points.flags.writeable = False

    @property
    def K(self):
        return self.points.size

    @property
    def origin(self):
        return float(self.points[0])

    def __repr__(self):
        return f"TimeGrid(K={self.K}, origin={self.origin})"

    def __eq__(self, other):
        return isinstance(other, TimeGrid) and np.array_equal(self.points, other.points)

    def bounds(self, k):
        """``(s_{k-1}, s_k)`` for interval ``k`` in ``1..K``."""
        if not 1 <= k <= self.K:
            raise IndexError(f"interval {k} outside 1..{self.K}")
        hi = self.points[k] if k < self.K else math.inf
        return float(self.points[k - 1]), float(hi)

    @property
    def lower(self):
        return self.points.copy()

    @property
    def upper(self):
        return np.append(self.points[1:], np.inf)

    @property
    def widths(self):
        return self.upper - self.lower

    def k_of(self, x):
        """Interval ``k`` with ``x`` in ``(s_{k-1}, s_k]``; 0 at the origin."""
        x_arr = np.asarray(x, dtype=float)
        if np.any(x_arr < self.points[0]):
            raise ValueError("time before grid origin")
        k = np.searchsorted(self.points, x_arr, side="left")
        return int(k) if k.ndim == 0 else k

    def segment_of(self, x):
        """Interval ``k`` with ``s_{k-1} <= x < s_k`` (the one in force just after ``x``)."""
        x_arr = np.asarray(x, dtype=float)
        if np.any(x_arr < self.points[0]):
            raise ValueError("time before grid origin")
        k = np.searchsorted(self.points, x_arr, side="right")
        return int(k) if k.ndim == 0 else k

    def overlaps(self, a, b):
        """Length of ``(a, b]`` falling in each interval, shape (K,)."""
        lo = np.maximum(self.lower, a)
        hi = np.minimum(self.upper, b)
        return np.clip(hi - lo, 0.0, None)


class MicroLayout:
    """Macrostate count, microstate counts and allowed macro transitions."""

    def __init__(self, d, absorbing=(), transitions=None):
        d = tuple(int(x) for x in d)
        if not d or any(x < 1 for x in d):
            raise ValueError("microstate counts must be >= 1")
        self.d = d
        self.J = len(d)
        self.absorbing = frozenset(int(a) for a in absorbing)
        for a in self.absorbing:
            if not 1 <= a <= self.J:
                raise ValueError(f"absorbing state {a} out of range")
            if d[a - 1] != 1:
                raise ValueError(f"absorbing state {a} must have a single microstate")
        if transitions is None:
            transitions = [
                (i, j)
                for i in self.states
                for j in self.states
                if i != j and i not in self.absorbing
            ]
        trans = []
        for i, j in transitions:
            i, j = int(i), int(j)
            if i == j or not (1 <= i <= self.J and 1 <= j <= self.J):
                raise ValueError(f"invalid transition {(i, j)}")
            if i in self.absorbing:
                raise ValueError(f"transition {(i, j)} leaves an absorbing state")
            trans.append((i, j))
        self.transitions = tuple(sorted(set(trans)))
        self.offsets = np.concatenate([[0], np.cumsum(d)]).astype(int)

    @property
    def states(self):
        return range(1, self.J + 1)

    @property
    def total(self):
        return int(self.offsets[-1])

    def dim(self, i):
        return self.d[i - 1]

    def flat(self, i, a):
        """Flat index of microstate ``a`` (0-based) in macrostate ``i``."""
        if not 0 <= a < self.d[i - 1]:
            raise IndexError(f"microstate {a} outside macrostate {i}")
        return int(self.offsets[i - 1] + a)

    def unflat(self, idx):
        i = int(np.searchsorted(self.offsets, idx, side="right"))
        return i, int(idx - self.offsets[i - 1])

    def block(self, i):
        return slice(self.offsets[i - 1], self.offsets[i])

    def exits(self, i):
        return [j for (a, j) in self.transitions if a == i]

    def __eq__(self, other):
        return (
            isinstance(other, MicroLayout)
            and self.d == other.d
            and self.absorbing == other.absorbing
            and self.transitions == other.transitions
        )

    def __repr__(self):
        return f"MicroLayout(d={self.d}, absorbing={sorted(self.absorbing)})"

    def to_dict(self):
        return {
            "d": list(self.d),
            "absorbing": sorted(self.absorbing),
            "transitions": [list(t) for t in self.transitions],
        }

    @classmethod
    def from_dict(cls, obj):
        return cls(obj["d"], obj.get("absorbing", ()), obj.get("transitions"))


@dataclass(frozen=True)
class Basis:
    """Time basis ``g^(0), ..., g^(q)`` of the log-linear rate form.

    ``kind="poly"`` gives ``g^(r)(s) = s^r`` for ``r <= degree``;
    ``kind="indicator"`` gives one indicator per cell of ``breakpoints``
    (cell ``c`` is ``(b_{c-1}, b_c]``, with open ends).
    """

    kind: str = "poly"
    degree: int = 1
    breakpoints: tuple = ()

    def __post_init__(self):
        if self.kind not in ("poly", "indicator"):
            raise ValueError(f"unknown basis kind {self.kind!r}")
        if self.kind == "poly" and self.degree < 0:
            raise ValueError("degree must be >= 0")
        object.__setattr__(self, "breakpoints", tuple(float(b) for b in self.breakpoints))

    @classmethod
    def indicator_for(cls, grid):
        return cls(kind="indicator", degree=0, breakpoints=tuple(grid.points))

    @property
    def n_params(self):
        if self.kind == "poly":
            return self.degree + 1
        return len(self.breakpoints) + 1

    def design(self, t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        if self.kind == "poly":
            return np.vander(t, self.degree + 1, increasing=True)
        col = np.searchsorted(np.asarray(self.breakpoints), t, side="left")
        X = np.zeros((t.size, self.n_params))
        X[np.arange(t.size), col] = 1.0
        return X

    def to_dict(self):
        return {"kind": self.kind, "degree": self.degree, "breakpoints": list(self.breakpoints)}

    @classmethod
    def from_dict(cls, obj):
        return cls(obj.get("kind", "poly"), int(obj.get("degree", 1)), tuple(obj.get("breakpoints", ())))


@dataclass
class RateParams:
    """Log-linear coefficients for every micro transition.

    ``within[i]`` has shape (d_i, d_i, p) (diagonal unused); ``exit[(i, j)]``
    has shape (d_i, p).  The ``*_zero`` masks pin a rate to exactly zero.
    """

    within: dict = field(default_factory=dict)
    within_zero: dict = field(default_factory=dict)
    exit: dict = field(default_factory=dict)
    exit_zero: dict = field(default_factory=dict)

    @classmethod
    def zeros(cls, layout, n_params):
        p = cls()
        for i in layout.states:
            if i in layout.absorbing:
                continue
            d = layout.dim(i)
            p.within[i] = np.zeros((d, d, n_params))
            p.within_zero[i] = np.eye(d, dtype=bool)
        for i, j in layout.transitions:
            p.exit[(i, j)] = np.zeros((layout.dim(i), n_params))
            p.exit_zero[(i, j)] = np.zeros(layout.dim(i), dtype=bool)
        return p

    def copy(self):
        return RateParams(
            {k: v.copy() for k, v in self.within.items()},
            {k: v.copy() for k, v in self.within_zero.items()},
            {k: v.copy() for k, v in self.exit.items()},
            {k: v.copy() for k, v in self.exit_zero.items()},
        )

    def permuted(self, i, perm):
        """Relabel microstates of macrostate ``i``: new index ``a`` is old ``perm[a]``."""
        out = self.copy()
        perm = np.asarray(perm)
        if i in out.within:
            out.within[i] = self.within[i][np.ix_(perm, perm)]
            out.within_zero[i] = self.within_zero[i][np.ix_(perm, perm)]
        for (a, j) in self.exit:
            if a == i:
                out.exit[(a, j)] = self.exit[(a, j)][perm]
                out.exit_zero[(a, j)] = self.exit_zero[(a, j)][perm]
        return out


@dataclass
class InitParams:
    """Multinomial-logit coefficients; ``eta[i]`` has shape (d_i - 1, p).

    The last microstate is the reference category with implicit zeros.
    """

    eta: dict = field(default_factory=dict)

    @classmethod
    def zeros(cls, layout, n_params):
        return cls({i: np.zeros((layout.dim(i) - 1, n_params)) for i in layout.states})

    def copy(self):
        return InitParams({k: v.copy() for k, v in self.eta.items()})

    def permuted(self, i, perm):
        out = self.copy()
        d = self.eta[i].shape[0] + 1
        full = np.vstack([self.eta[i], np.zeros((1, self.eta[i].shape[1]))])
        full = full[np.asarray(perm)]
        # re-express relative to the new last category
        out.eta[i] = full[: d - 1] - full[d - 1]
        return out


def softmax_reference(logits):
    """Softmax over the last axis with logits for all categories."""
    m = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=-1, keepdims=True)


def default_covariate_times(grid):
    """Interval midpoints; the unbounded last interval gets half a median width."""
    pts = grid.points
    times = np.empty(grid.K + 1)
    times[0] = pts[0]
    if grid.K > 1:
        times[1:grid.K] = 0.5 * (pts[:-1] + pts[1:])
        half = 0.5 * float(np.median(np.diff(pts)))
    else:
        half = 0.5
    times[grid.K] = pts[-1] + half
    return times


class ResetModel:
    """Aggregate Markov model with the reset property and piecewise-constant rates.

    Rates are evaluated once per interval at ``covariate_times`` and cached:

    ``within[i]``  (K, d_i, d_i) off-diagonal micro rates, zero diagonal
    ``exit[(i,j)]`` (K, d_i) exit-rate vectors beta_ij
    ``sub[i]``     (K, d_i, d_i) sub-intensity matrices M_ii
    ``pi[i]``      (K+1, d_i) initial distributions
    """

    def __init__(self, layout, grid, basis=None, theta=None, eta=None,
                 covariate_times=None, start_state=1):
        self.layout = layout
        self.grid = grid
        self.basis = basis if basis is not None else Basis()
        p = self.basis.n_params
        self.theta = theta if theta is not None else RateParams.zeros(layout, p)
        self.eta = eta if eta is not None else InitParams.zeros(layout, p)
        if covariate_times is None:
            self.covariate_policy = "midpoint"
            covariate_times = default_covariate_times(grid)
        else:
            self.covariate_policy = "explicit"
        ct = np.asarray(covariate_times, dtype=float)
        if ct.shape != (grid.K + 1,):
            raise ValueError(f"covariate_times must have length K+1={grid.K + 1}")
        self.covariate_times = ct
        self.start_state = int(start_state)
        self._check_params()
        self._build_cache()

    def _check_params(self):
        p = self.basis.n_params
        lay = self.layout
        for i in lay.states:
            if i in lay.absorbing:
                continue
            d = lay.dim(i)
            w = self.theta.within.get(i)
            if w is None or w.shape != (d, d, p):
                raise ValueError(f"within coefficients for state {i} must have shape {(d, d, p)}")
            if not np.all(np.isfinite(w)):
                raise ValueError("non-finite rate coefficients")
        for t in lay.transitions:
            e = self.theta.exit.get(t)
            if e is None or e.shape != (lay.dim(t[0]), p):
                raise ValueError(f"exit coefficients for {t} have wrong shape")
            if not np.all(np.isfinite(e)):
                raise ValueError("non-finite rate coefficients")
        for i in lay.states:
            e = self.eta.eta.get(i)
            if e is None or e.shape != (lay.dim(i) - 1, p):
                raise ValueError(f"eta for state {i} must have shape {(lay.dim(i) - 1, p)}")
            if not np.all(np.isfinite(e)):
                raise ValueError("non-finite eta coefficients")

    def _build_cache(self):
        lay, K = self.layout, self.grid.K
        X = self.basis.design(self.covariate_times)  # (K+1, p)
        Xk = X[1:]
        self.design = X
        self.within, self.exit, self.sub, self.pi = {}, {}, {}, {}
        for (i, j), coef in self.theta.exit.items():
            rate = np.exp(Xk @ coef.T)  # (K, d_i)
            rate[:, self.theta.exit_zero[(i, j)]] = 0.0
            self.exit[(i, j)] = rate
        for i in lay.states:
            d = lay.dim(i)
            if i in lay.absorbing:
                W = np.zeros((K, 1, 1))
            else:
                W = np.exp(np.einsum("kp,abp->kab", Xk, self.theta.within[i]))
                W[:, self.theta.within_zero[i]] = 0.0
                W[:, np.arange(d), np.arange(d)] = 0.0
            self.within[i] = W
            out = W.sum(axis=2)
            for j in lay.exits(i):
                out = out + self.exit[(i, j)]
            M = W.copy()
            M[:, np.arange(d), np.arange(d)] = -out
            self.sub[i] = M
            logits = np.concatenate(
                [X @ self.eta.eta[i].T, np.zeros((K + 1, 1))], axis=1
            )
            self.pi[i] = softmax_reference(logits)
        for arr in (*self.within.values(), *self.exit.values(), *self.sub.values(), *self.pi.values()):
            arr.flags.writeable = False
        self._full_exp = {}

    def with_params(self, theta, eta):
        return ResetModel(
            self.layout, self.grid, self.basis, theta, eta,
            None if self.covariate_policy == "midpoint" else self.covariate_times,
            self.start_state,
        )

    def permuted(self, i, perm):
        """Same model with the microstates of macrostate ``i`` relabelled."""
        return self.with_params(self.theta.permuted(i, perm), self.eta.permuted(i, perm))

    # -- rate access -------------------------------------------------------

    def rates_at(self, k):
        """Blocks in force on interval ``k`` (1-based)."""
        if not 1 <= k <= self.grid.K:
            raise IndexError(f"interval {k} outside 1..{self.grid.K}")
        return {
            "sub": {i: np.array(m[k - 1]) for i, m in self.sub.items()},
            "exit": {t: np.array(b[k - 1]) for t, b in self.exit.items()},
            "pi": {j: np.array(p[k]) for j, p in self.pi.items()},
        }

    def initial_distribution(self, k, i):
        if not 0 <= k <= self.grid.K:
            raise IndexError(f"index {k} outside 0..{self.grid.K}")
        return np.array(self.pi[i][k])

    def full_generator(self, k):
        """Assembled intensity matrix ``M^k`` over all microstates."""
        lay = self.layout
        M = np.zeros((lay.total, lay.total))
        for i in lay.states:
            M[lay.block(i), lay.block(i)] = self.sub[i][k - 1]
        for (i, j), beta in self.exit.items():
            M[lay.block(i), lay.block(j)] = np.outer(beta[k - 1], self.pi[j][k])
        return M

    def full_exp(self, i):
        """``exp(M_ii^k (s_k - s_{k-1}))`` for every bounded interval, cached."""
        if i not in self._full_exp:
            w = self.grid.widths[:-1]
            self._full_exp[i] = expm_batch(self.sub[i][:-1] * w[:, None, None])
        return self._full_exp[i]

    def within_product(self, i, s, t):
        """Sub-transition matrix ``P_i(s, t)`` within macrostate ``i``."""
        return _grid_product(self.grid, self.sub[i], s, t)

    def to_piecewise(self):
        gens = np.stack([self.full_generator(k) for k in range(1, self.grid.K + 1)])
        init = {i: np.array(self.pi[i][0]) for i in self.layout.states}
        return PiecewiseModel(self.layout, self.grid, gens, init, self.start_state)


def _grid_product(grid, mats, s, t):
    """Product of ``exp(mats[k] * overlap_k)`` over the grid cells of ``[s, t]``."""
    s, t = float(s), float(t)
    if t < s:
        raise ValueError(f"t={t} < s={s}")
    d = mats.shape[1]
    P = np.eye(d)
    if t == s:
        return P
    k0 = grid.segment_of(s)
    k1 = grid.k_of(t)
    for k in range(k0, k1 + 1):
        lo, hi = grid.bounds(k)
        a, b = max(lo, s), min(hi, t)
        if b > a:
            P = P @ matrix_exp(mats[k - 1], b - a)
    return P


class PiecewiseModel:
    """General (not necessarily reset) aggregate model with piecewise-constant rates.

    ``generators`` has shape (K, dbar, dbar); ``initial[i]`` is the micro
    distribution used when a path starts in macrostate ``i``.
    """

    def __init__(self, layout, grid, generators, initial, start_state=1):
        G = np.asarray(generators, dtype=float)
        if G.shape != (grid.K, layout.total, layout.total):
            raise ValueError("generators have wrong shape")
        off = G.copy()
        idx = np.arange(layout.total)
        off[:, idx, idx] = 0
        if np.any(off < 0):
            raise ValueError("negative off-diagonal rates")
        if np.any(np.abs(G.sum(axis=2)) > 1e-9 * (1 + np.abs(G).max())):
            raise ValueError("generator rows must sum to zero")
        self.layout = layout
        self.grid = grid
        self.generators = G
        self.initial = {int(k): np.asarray(v, dtype=float) for k, v in initial.items()}
        self.start_state = int(start_state)

    def block(self, k, i, j):
        lay = self.layout
        return self.generators[k - 1][lay.block(i), lay.block(j)]

    def sub(self, i):
        lay = self.layout
        return self.generators[:, lay.block(i), lay.block(i)]

    def within_product(self, i, s, t):
        return _grid_product(self.grid, self.sub(i), s, t)


def alpha(model, times, states):
    """Defective distribution after the macro jumps ``(times[l], states[l])``.

    ``times[0]``/``states[0]`` give the start; the result has length
    ``d_{states[-1]}`` and its sum is the path density.
    """
    pm = model.to_piecewise() if isinstance(model, ResetModel) else model
    times = [float(x) for x in times]
    states = [int(x) for x in states]
    if len(times) != len(states) or not times:
        raise ValueError("times and states must have equal, nonzero length")
    for a, b in zip(times, times[1:]):
        if b <= a:
            raise ValueError("jump times must be strictly increasing")
    for a, b in zip(states, states[1:]):
        if a == b:
            raise ValueError("self-transition in macro path")
    grid = pm.grid
    if isinstance(model, ResetModel):
        vec = model.initial_distribution(grid.k_of(times[0]), states[0])
    else:
        vec = pm.initial[states[0]].copy()
    for ell in range(len(times) - 1):
        i, j = states[ell], states[ell + 1]
        vec = vec @ pm.within_product(i, times[ell], times[ell + 1])
        vec = vec @ pm.block(grid.k_of(times[ell + 1]), i, j)
    return vec


def sojourn_log_density(model, entry, state, exit_time, dest=None):
    """``log(pi_i(r) P_i(r, tau) beta_{i dest}(tau))``; survival if ``dest`` is None."""
    grid = model.grid
    f = model.initial_distribution(grid.k_of(entry), state)
    f = f @ model.within_product(state, entry, exit_time)
    if dest is None:
        val = f.sum()
    else:
        val = f @ model.exit[(state, dest)][grid.k_of(exit_time) - 1]
    with np.errstate(divide="ignore"):
        return float(np.log(val)) if val > 0 else -math.inf


def path_logliks(model, paths):
    """Per-path macro log-likelihoods via the per-sojourn factorisation."""
    from .data import extract_sojourns

    out = np.zeros(len(paths))
    for n, path in enumerate(paths):
        sj = extract_sojourns([path], model.layout.absorbing)
        total = 0.0
        for recs in sj.values():
            for rec in recs:
                total += sojourn_log_density(
                    model, rec.entry_time, rec.state, rec.exit_time, rec.destination
                )
        out[n] = total
    return out


def macro_loglik(model, paths):
    """Total macro log-likelihood; ``-inf`` (with a warning) if a path is impossible."""
    if not paths:
        return 0.0
    ll = path_logliks(model, paths)
    bad = [p.path_id for p, v in zip(paths, ll) if not np.isfinite(v)]
    if bad:
        warnings.warn(f"paths with zero likelihood: {bad[:20]}", RuntimeWarning)
        return -math.inf
    return float(ll.sum())


# -- serialisation ----------------------------------------------------------

def model_to_dict(model):
    th = model.theta
    within = {}
    for i, w in th.within.items():
        d = w.shape[0]
        for a in range(d):
            for b in range(d):
                if a != b:
                    within[f"{i}:{a + 1}:{b + 1}"] = {
                        "coef": w[a, b].tolist(),
                        "zero": bool(th.within_zero[i][a, b]),
                    }
    exits = {}
    for (i, j), e in th.exit.items():
        for a in range(e.shape[0]):
            exits[f"{i}:{a + 1}:{j}"] = {
                "coef": e[a].tolist(),
                "zero": bool(th.exit_zero[(i, j)][a]),
            }
    eta = {}
    for i, e in model.eta.eta.items():
        for a in range(e.shape[0]):
            eta[f"{i}:{a + 1}"] = e[a].tolist()
    cov = {"policy": model.covariate_policy}
    if model.covariate_policy == "explicit":
        cov["times"] = model.covariate_times.tolist()
    return {
        "format": "aggmarkov.reset_model/1",
        "layout": model.layout.to_dict(),
        "grid": model.grid.points.tolist(),
        "basis": model.basis.to_dict(),
        "covariates": cov,
        "start_state": model.start_state,
        "theta": {"within": within, "exit": exits},
        "eta": eta,
    }


def model_from_dict(obj):
    layout = MicroLayout.from_dict(obj["layout"])
    grid = TimeGrid(obj["grid"])
    basis = Basis.from_dict(obj["basis"])
    p = basis.n_params
    theta = RateParams.zeros(layout, p)
    for key, val in obj["theta"]["within"].items():
        i, a, b = (int(x) for x in key.split(":"))
        theta.within[i][a - 1, b - 1] = val["coef"]
        theta.within_zero[i][a - 1, b - 1] = val["zero"]
    for key, val in obj["theta"]["exit"].items():
        i, a, j = (int(x) for x in key.split(":"))
        theta.exit[(i, j)][a - 1] = val["coef"]
        theta.exit_zero[(i, j)][a - 1] = val["zero"]
    eta = InitParams.zeros(layout, p)
    for key, val in obj["eta"].items():
        i, a = (int(x) for x in key.split(":"))
        eta.eta[i][a - 1] = val
    cov = obj.get("covariates", {"policy": "midpoint"})
    times = cov.get("times") if cov.get("policy") == "explicit" else None
    return ResetModel(layout, grid, basis, theta, eta, times, obj.get("start_state", 1))


def save_model(model, path):
    with open(path, "w") as fh:
        json.dump(model_to_dict(model), fh, indent=1)
        fh.write("\n")


def load_model(path):
    with open(path) as fh:
        return model_from_dict(json.load(fh))
