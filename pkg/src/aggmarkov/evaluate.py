"""Model functionals, empirical comparators and the semi-Markov GLM benchmark."""

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .data import extract_sojourns
from .regress import poisson_fit

PRESET_DURATION_SEGMENTS = (0.2291667, 2.0, 5.0)


@dataclass
class CurveTable:
    """Curves sharing one abscissa; written in long format ``series,x,y``."""

    x: np.ndarray
    columns: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        for name, col in self.columns.items():
            col = np.asarray(col, dtype=float)
            if col.shape != self.x.shape:
                raise ValueError(f"column {name!r} has length {col.size}, expected {self.x.size}")
            self.columns[name] = col

    def add(self, name, values):
        values = np.asarray(values, dtype=float)
        if values.shape != self.x.shape:
            raise ValueError(f"column {name!r} has wrong length")
        self.columns[name] = values

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            for key in sorted(self.meta):
                fh.write(f"# {key}={self.meta[key]}\n")
            w.writerow(("series", "x", "y"))
            for name, col in self.columns.items():
                for x, y in zip(self.x, col):
                    w.writerow((name, repr(float(x)), repr(float(y))))

    @classmethod
    def from_csv(cls, path):
        meta, rows = {}, []
        with open(path, newline="") as fh:
            for line in fh:
                if line.startswith("# "):
                    k, _, v = line[2:].rstrip("\n").partition("=")
                    meta[k] = v
                else:
                    rows.append(line)
        reader = csv.reader(rows)
        next(reader)
        cols = {}
        for name, x, y in reader:
            cols.setdefault(name, ([], []))
            cols[name][0].append(float(x))
            cols[name][1].append(float(y))
        if not cols:
            return cls(np.zeros(0), {}, meta)
        xs = next(iter(cols.values()))[0]
        return cls(np.array(xs), {k: np.array(v[1]) for k, v in cols.items()}, meta)


def _forward_rows(model, state, s, t_grid):
    """Rows ``pi_i(s) P_i(s, t)`` for sorted ``t`` values (incremental products)."""
    grid = model.grid
    t_grid = np.asarray(t_grid, dtype=float)
    if s < grid.origin:
        raise ValueError(f"entry time {s} before grid origin {grid.origin}")
    if np.any(t_grid < s):
        raise ValueError("evaluation times must be >= entry time")
    order = np.argsort(t_grid, kind="stable")
    row = model.initial_distribution(grid.k_of(s), state)
    out = np.empty((t_grid.size, row.size))
    cur = s
    for n in order:
        t = t_grid[n]
        if t > cur:
            row = row @ model.within_product(state, cur, t)
            cur = t
        out[n] = row
    return out


def _exit_total(model, state, t):
    """Summed exit vector ``sum_j beta_ij`` at the interval containing ``t``."""
    k = model.grid.k_of(t)
    k = np.maximum(k, 1)
    tot = 0.0
    for j in model.layout.exits(state):
        tot = tot + model.exit[(state, j)][k - 1]
    return tot


def conditional_survival(model, s, t_grid, state):
    """``S(t) = pi_i(s) P_i(s, t) 1`` for a sojourn in ``state`` entered at ``s``."""
    return _forward_rows(model, state, s, t_grid).sum(axis=1)


def conditional_density(model, s, t_grid, state, dest=None):
    """``f(t) = pi_i(s) P_i(s, t) beta(t)``, summed over exits unless ``dest`` is given."""
    rows = _forward_rows(model, state, s, t_grid)
    t_grid = np.asarray(t_grid, dtype=float)
    if dest is None:
        beta = np.stack([_exit_total(model, state, t) for t in t_grid])
    else:
        k = np.maximum(np.asarray(model.grid.k_of(t_grid)), 1)
        beta = model.exit[(state, dest)][k - 1]
    return np.einsum("nd,nd->n", rows, beta)


def fitted_semimarkov_rate(model, t, u, j, state):
    """Fitted intensity from ``state`` to ``j`` at age ``t`` and duration ``u``."""
    t, u = float(t), float(u)
    if u < 0 or t - u < model.grid.origin - 1e-12:
        raise ValueError("need 0 <= u <= t - grid origin")
    s = t - u
    row = _forward_rows(model, state, s, [t])[0]
    den = row.sum()
    if not den > 0:
        raise FloatingPointError(f"survival underflow at t={t}, u={u}")
    k = max(model.grid.k_of(t), 1)
    return float(row @ model.exit[(state, j)][k - 1] / den)


def true_rate_eval(preset, t, u, i, j):
    """Exact evaluation of a semi-Markov rate ``nu_ij(t, u)``."""
    return preset.rate(i, j, t, u)


def open_partition(a, b, n, avoid=()):
    """``n`` abscissae in ``[a, b]`` nudged off the points in ``avoid``."""
    x = np.linspace(a, b, n)
    avoid = np.asarray(avoid, dtype=float)
    if avoid.size:
        hit = np.isin(x, avoid)
        x[hit] += 1e-7 * (b - a)
    return x


# -- empirical ---------------------------------------------------------------

@dataclass
class OETable:
    age_breaks: np.ndarray
    duration_breaks: np.ndarray
    occurrences: np.ndarray  # (n_age, n_dur)
    exposure: np.ndarray
    mean_age: np.ndarray
    mean_duration: np.ndarray

    @property
    def rates(self):
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.exposure > 0, self.occurrences / np.where(self.exposure > 0, self.exposure, 1), np.nan)


def _cell_pieces(r, tau, age_breaks, dur_breaks):
    """Split the diagonal ``(t, t - r)``, ``t`` in ``(r, tau]``, at cell boundaries."""
    cuts = [r, tau]
    cuts += [a for a in age_breaks if r < a < tau]
    cuts += [r + b for b in dur_breaks if r < r + b < tau]
    return np.unique(np.asarray(cuts, dtype=float))


def empirical_oe_rates(paths, state, dest, age_breaks, duration_breaks=(0.0, math.inf), absorbing=()):
    """Occurrence-exposure table over (age band, duration band) cells.

    Cells are left-open, right-closed.  Exposure-weighted mean age and
    duration per cell are returned for use as regression covariates.
    """
    ab = np.asarray(age_breaks, dtype=float)
    db = np.asarray(duration_breaks, dtype=float)
    na, nd = ab.size - 1, db.size - 1
    O = np.zeros((na, nd))
    E = np.zeros((na, nd))
    St = np.zeros((na, nd))
    Su = np.zeros((na, nd))
    for rec in extract_sojourns(paths, absorbing).get(state, []):
        r, tau = rec.entry_time, rec.exit_time
        cuts = _cell_pieces(r, tau, ab, db)
        lo, hi = cuts[:-1], cuts[1:]
        mid = 0.5 * (lo + hi)
        ia = np.searchsorted(ab, mid, side="left") - 1
        iu = np.searchsorted(db, mid - r, side="left") - 1
        ok = (ia >= 0) & (ia < na) & (iu >= 0) & (iu < nd)
        ln = (hi - lo)[ok]
        np.add.at(E, (ia[ok], iu[ok]), ln)
        np.add.at(St, (ia[ok], iu[ok]), ln * mid[ok])
        np.add.at(Su, (ia[ok], iu[ok]), ln * (mid[ok] - r))
        if rec.destination == dest:
            a = np.searchsorted(ab, tau, side="left") - 1
            b = np.searchsorted(db, tau - r, side="left") - 1
            if 0 <= a < na and 0 <= b < nd:
                O[a, b] += 1
    with np.errstate(divide="ignore", invalid="ignore"):
        mt = np.where(E > 0, St / np.where(E > 0, E, 1), np.nan)
        mu = np.where(E > 0, Su / np.where(E > 0, E, 1), np.nan)
    return OETable(ab, db, O, E, mt, mu)


def product_limit(durations, events, x):
    """Kaplan-Meier survival of ``durations`` (``events`` False = censored) at ``x``."""
    d = np.asarray(durations, dtype=float)
    ev = np.asarray(events, dtype=bool)
    x = np.asarray(x, dtype=float)
    times = np.unique(d[ev])
    surv = np.ones(times.size)
    s = 1.0
    for n, t in enumerate(times):
        at_risk = np.sum(d >= t)
        deaths = np.sum((d == t) & ev)
        s *= 1.0 - deaths / at_risk
        surv[n] = s
    idx = np.searchsorted(times, x, side="right") - 1
    return np.where(idx >= 0, surv[np.clip(idx, 0, None)] if times.size else 1.0, 1.0)


def empirical_sojourn_curves(paths, state, s, u_grid, h=0.5, absorbing=(), bin_width=None):
    """Product-limit survival and a histogram density of sojourn durations.

    Uses sojourns in ``state`` entered within ``[s - h, s + h]``.  The
    density is the Kaplan-Meier mass per bin of width ``bin_width``
    (default: the spacing of ``u_grid``), reported at each ``u``.
    """
    recs = [r for r in extract_sojourns(paths, absorbing).get(state, [])
            if s - h <= r.entry_time <= s + h]
    u = np.asarray(u_grid, dtype=float)
    dur = np.array([r.duration for r in recs])
    ev = np.array([not r.censored for r in recs], dtype=bool)
    if not recs:
        return np.ones_like(u), np.zeros_like(u), 0
    surv = product_limit(dur, ev, u)
    bw = bin_width if bin_width is not None else (float(np.median(np.diff(u))) if u.size > 1 else 1.0)
    lo = np.maximum(u - bw / 2, 0.0)
    hi = lo + bw
    dens = (product_limit(dur, ev, lo) - product_limit(dur, ev, hi)) / bw
    return surv, dens, len(recs)


# -- GLM benchmark ----------------------------------------------------------

@dataclass(frozen=True)
class GLMShape:
    """Design of a duration-segmented log-linear rate.

    On segment ``m`` (cut at ``breaks``) the log rate is
    ``a_m + b_{g(m)} t + c_m u``, where ``g = age_group`` lets segments share
    an age slope (``None`` drops the age term) and ``duration_slope[m]``
    switches the ``u`` term on.
    """

    breaks: tuple = PRESET_DURATION_SEGMENTS
    duration_slope: tuple = None
    age_group: tuple = None

    def __post_init__(self):
        n = len(self.breaks) + 1
        object.__setattr__(self, "breaks", tuple(float(b) for b in self.breaks))
        if self.duration_slope is None:
            object.__setattr__(self, "duration_slope", (True,) * n)
        if self.age_group is None:
            object.__setattr__(self, "age_group", tuple(range(n)))
        if len(self.duration_slope) != n or len(self.age_group) != n:
            raise ValueError("duration_slope and age_group need one entry per segment")

    @property
    def n_segments(self):
        return len(self.breaks) + 1

    def columns(self):
        """Column layout: intercepts, then age slopes per group, then duration slopes."""
        n = self.n_segments
        groups = sorted({g for g in self.age_group if g is not None})
        dur = [m for m in range(n) if self.duration_slope[m]]
        return n, groups, dur

    def design(self, seg, t, u):
        n, groups, dur = self.columns()
        seg = np.asarray(seg)
        X = np.zeros((seg.size, n + len(groups) + len(dur)))
        X[np.arange(seg.size), seg] = 1.0
        t = np.broadcast_to(np.asarray(t, dtype=float), seg.shape)
        for m, g in enumerate(self.age_group):
            if g is not None:
                X[seg == m, n + groups.index(g)] = t[seg == m]
        for c, m in enumerate(dur):
            X[seg == m, n + len(groups) + c] = np.asarray(u)[seg == m]
        return X

    def to_dict(self):
        return {"breaks": list(self.breaks), "duration_slope": list(self.duration_slope),
                "age_group": list(self.age_group)}

    @classmethod
    def from_dict(cls, obj):
        return cls(tuple(obj["breaks"]), tuple(obj["duration_slope"]), tuple(obj["age_group"]))


# shapes of the disability benchmark rates out of the disabled state
PRESET_GLM_SHAPES = {
    (2, 1): GLMShape((0.2291667, 2.0, 5.0), (True, True, True, False), (0, 0, 0, 1)),
    (2, 3): GLMShape((5.0,), (True, False), (0, 1)),
}


@dataclass
class GLMBenchmark:
    """Fitted duration-segmented Poisson GLM for one transition."""

    state: int
    dest: int
    shape: GLMShape
    coef: np.ndarray
    zero: bool = False
    converged: bool = True
    deviance: float = 0.0

    def __call__(self, t, u):
        t, u = np.broadcast_arrays(np.asarray(t, float), np.asarray(u, float))
        if self.zero:
            return np.zeros(t.shape)
        seg = np.searchsorted(np.asarray(self.shape.breaks), u.ravel(), side="left")
        X = self.shape.design(seg, t.ravel(), u.ravel())
        return np.exp(X @ self.coef).reshape(t.shape)

    def to_dict(self):
        return {
            "state": self.state, "dest": self.dest, "shape": self.shape.to_dict(),
            "coef": self.coef.tolist(), "zero": self.zero,
            "converged": self.converged, "deviance": self.deviance,
        }

    @classmethod
    def from_dict(cls, obj):
        return cls(obj["state"], obj["dest"], GLMShape.from_dict(obj["shape"]),
                   np.asarray(obj["coef"], dtype=float), obj["zero"],
                   obj.get("converged", True), obj.get("deviance", 0.0))


def glm_benchmark(paths, state, dest, age_breaks, shape=None, duration_step=0.25,
                  max_duration=None, absorbing=()):
    """Fit one transition by a duration-segmented Poisson GLM.

    Occurrences and exposures are binned on ``age_breaks`` x duration bands
    of width ``duration_step`` (cut at the segment breaks as well) and
    regressed on the exposure-weighted cell means of age and duration.
    ``shape`` defaults to the preset shape for known transitions and
    otherwise to independent ``[1, t, u]`` fits on the default segments.
    """
    if shape is None:
        shape = PRESET_GLM_SHAPES.get((state, dest), GLMShape())
    ab = np.asarray(age_breaks, dtype=float)
    top = float(ab[-1] - ab[0]) if max_duration is None else float(max_duration)
    bands = np.arange(0.0, top + duration_step, duration_step)
    db = np.unique(np.concatenate([bands, shape.breaks, [math.inf]]))
    tab = empirical_oe_rates(paths, state, dest, ab, db, absorbing)
    used = tab.exposure > 0
    a_idx, band = np.nonzero(used)
    # segment of each band from its upper edge (bands never straddle a break)
    seg = np.searchsorted(np.asarray(shape.breaks), db[band + 1], side="left")
    X = shape.design(seg, tab.mean_age[used], tab.mean_duration[used])
    fit = poisson_fit(tab.occurrences[used], tab.exposure[used], X)
    return GLMBenchmark(state, dest, shape, fit.coef, fit.zero, fit.converged, fit.deviance)
