"""EM estimation for reset aggregate Markov models.

Under the reset property the macro likelihood factorises over sojourns, so
the E-step runs sojourn by sojourn.  For a sojourn in macrostate ``i``
entered at ``r`` and left at ``tau`` for ``z``, with
``a = pi_i(r) P_i(r, tau) beta_iz(tau)``:

* entry mass ``pi_a(r) [P beta]_a / a``;
* on each grid segment the occupancy integral
  ``J = int exp(A (D - x)) v w exp(A x) dx`` (forward row ``w`` at the
  segment start, backward column ``v`` at its end) gives expected time
  ``J[a, a] / a`` and within transitions ``mu_ab J[b, a] / a``;
* exit mass ``[pi P]_a beta_az / a``.

Censored sojourns use a vector of ones instead of ``beta`` and add no exit.
Forward and backward passes are rescaled at every step and carried on a
log scale.  Full grid intervals share one Van Loan exponential per
interval because the integral is linear in ``v w``.
"""

import logging
import math
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import SojournBatch, SufficientStats, extract_sojourns, macro_stats, sojourn_batches
from .model import Basis, InitParams, RateParams, ResetModel
from .numerics import expm_batch, matrix_exp, rank_one_convolution, van_loan_batch
from .regress import multinomial_fit, poisson_fit

log = logging.getLogger(__name__)


class NumericalFailure(RuntimeError):
    """Raised when EM cannot proceed (e.g. every sojourn is infeasible)."""


@dataclass
class EMConfig:
    max_iterations: int = 500
    loglik_rel_tolerance: float = 1e-8
    param_abs_tolerance: float = 1e-10
    init: str = "default"  # "default", "random" or "model"
    seed: int = 0
    jitter: float = 0.1
    inner_tol: float = 1e-10
    inner_max_iter: int = 100
    chunk_size: int = 2048

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        for name in ("loglik_rel_tolerance", "param_abs_tolerance", "inner_tol"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if self.init not in ("default", "random", "model"):
            raise ValueError(f"unknown init strategy {self.init!r}")
        if not 0 <= self.jitter < 1:
            raise ValueError("jitter must be in [0, 1)")
        if self.chunk_size < 1:
            raise ValueError("chunk_size must be >= 1")


@dataclass
class StateStats:
    """Expected statistics of one macrostate (micro indices local to it)."""

    B: np.ndarray  # (K+1, d)
    E: np.ndarray  # (K, d)
    O_within: np.ndarray  # (K, d, d)
    O_exit: np.ndarray  # (K, d, J)
    C_full: np.ndarray  # (K, d, d) pending occupancy weights of full intervals
    loglik: float = 0.0
    n_skipped: int = 0

    @classmethod
    def zeros(cls, K, d, J):
        return cls(np.zeros((K + 1, d)), np.zeros((K, d)), np.zeros((K, d, d)),
                   np.zeros((K, d, J)), np.zeros((K, d, d)))

    def __iadd__(self, other):
        self.B += other.B
        self.E += other.E
        self.O_within += other.O_within
        self.O_exit += other.O_exit
        self.C_full += other.C_full
        self.loglik += other.loglik
        self.n_skipped += other.n_skipped
        return self


def _exit_vectors(model, i, k_last, dest):
    """Terminal column per sojourn: ``beta_iz`` at ``k_last`` or ones if censored."""
    d = model.layout.dim(i)
    out = np.ones((dest.size, d))
    for j in model.layout.exits(i):
        m = dest == j
        if m.any():
            out[m] = model.exit[(i, j)][k_last[m] - 1]
    bad = (dest != 0) & ~np.isin(dest, model.layout.exits(i))
    if bad.any():
        raise ValueError(f"sojourns in state {i} exit to disallowed states {np.unique(dest[bad])}")
    return out


def _estep_chunk(model, batch):
    """Expected statistics for a batch of sojourns of one macrostate."""
    i = batch.state
    grid, lay = model.grid, model.layout
    K, d, J = grid.K, lay.dim(i), lay.J
    out = StateStats.zeros(K, d, J)
    n = len(batch)
    if n == 0:
        return out, np.zeros(0)
    r, tau, dest = batch.entry, batch.exit, batch.dest
    if np.any(tau <= r):
        raise ValueError("sojourn exit times must exceed entry times")
    A = model.sub[i]
    lower, upper = grid.lower, grid.upper
    k_first = np.asarray(grid.segment_of(r))
    k_last = np.asarray(grid.k_of(tau))
    nseg = k_last - k_first + 1
    seg_off = np.concatenate([[0], np.cumsum(nseg)[:-1]])
    S = int(nseg.sum())
    sid = np.repeat(np.arange(n), nseg)
    pos = np.arange(S) - seg_off[sid]
    k = k_first[sid] + pos
    start = np.maximum(lower[k - 1], r[sid])
    end = np.minimum(upper[k - 1], tau[sid])
    length = end - start
    full = (start == lower[k - 1]) & (end == upper[k - 1])
    part = ~full

    Ex = np.empty((S, d, d))
    if full.any():
        Ex[full] = model.full_exp(i)[k[full] - 1]
    if part.any():
        Ex[part] = expm_batch(A[k[part] - 1] * length[part, None, None])

    k0 = np.asarray(grid.k_of(r))
    pi0 = model.pi[i][k0]
    beta = _exit_vectors(model, i, k_last, dest)

    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        # forward
        f = pi0.copy()
        lf = np.zeros(n)
        f_start = np.empty((S, d))
        lf_start = np.empty(S)
        for p in range(int(nseg.max())):
            s_ids = np.flatnonzero(nseg > p)
            idx = seg_off[s_ids] + p
            f_start[idx] = f[s_ids]
            lf_start[idx] = lf[s_ids]
            nv = np.einsum("nd,nde->ne", f[s_ids], Ex[idx])
            tot = nv.sum(axis=1)
            safe = np.where(tot > 0, tot, 1.0)
            f[s_ids] = nv / safe[:, None]
            lf[s_ids] += np.log(tot)
        num = np.einsum("nd,nd->n", f, beta)
        loga = lf + np.log(num)

        # backward
        tot = beta.sum(axis=1)
        b = beta / np.where(tot > 0, tot, 1.0)[:, None]
        lb = np.log(tot)
        b_end = np.empty((S, d))
        lb_end = np.empty(S)
        for q in range(int(nseg.max())):
            s_ids = np.flatnonzero(nseg > q)
            idx = seg_off[s_ids] + nseg[s_ids] - 1 - q
            b_end[idx] = b[s_ids]
            lb_end[idx] = lb[s_ids]
            nv = np.einsum("nde,ne->nd", Ex[idx], b[s_ids])
            tot = nv.sum(axis=1)
            safe = np.where(tot > 0, tot, 1.0)
            b[s_ids] = nv / safe[:, None]
            lb[s_ids] += np.log(tot)

        good = np.isfinite(loga)
        n_bad = int((~good).sum())
        loga_g = np.where(good, loga, 0.0)
        w = np.exp(lb_end + lf_start - loga_g[sid])
        w = np.where(good[sid] & np.isfinite(w), w, 0.0)

        # entries
        ent = pi0 * b
        ent_tot = ent.sum(axis=1, keepdims=True)
        ent = np.where(good[:, None], ent / np.where(ent_tot > 0, ent_tot, 1.0), 0.0)
        np.add.at(out.B, k0, ent)

        # exits
        unc = good & (dest != 0)
        if unc.any():
            ex = f[unc] * beta[unc]
            ex /= ex.sum(axis=1, keepdims=True)
            np.add.at(out.O_exit, (k_last[unc] - 1, slice(None), dest[unc] - 1), ex)

    C = w[:, None, None] * np.einsum("sa,sb->sab", b_end, f_start)
    if full.any():
        np.add.at(out.C_full, k[full] - 1, C[full])
    if part.any():
        kp = k[part] - 1
        _, Jp = van_loan_batch(A[kp], C[part], length[part])
        Jsum = np.zeros((K, d, d))
        np.add.at(Jsum, kp, Jp)
        _add_occupancy(out, model.within[i], Jsum)
    out.loglik = float(loga[good].sum())
    out.n_skipped = n_bad
    return out, np.where(good, loga, -np.inf)


def _add_occupancy(out, W, Jsum):
    d = Jsum.shape[1]
    out.E += Jsum[:, np.arange(d), np.arange(d)]
    out.O_within += W * np.transpose(Jsum, (0, 2, 1))


def _finish(model, i, acc):
    """Integrate the pooled weights of full intervals."""
    K = model.grid.K
    ks = np.flatnonzero(np.any(acc.C_full[: K - 1] != 0, axis=(1, 2)))
    if ks.size:
        widths = model.grid.widths[ks]
        _, Jk = van_loan_batch(model.sub[i][ks], acc.C_full[ks], widths)
        Jsum = np.zeros_like(acc.C_full)
        Jsum[ks] = Jk
        _add_occupancy(acc, model.within[i], Jsum)
    acc.C_full[:] = 0.0
    return acc


def estep_sojourn(model, record):
    """Expected statistics of a single sojourn (a :class:`SojournRecord`)."""
    batch = SojournBatch.from_records(record.state, [record])
    acc, _ = _estep_chunk(model, batch)
    return _finish(model, record.state, acc)


def estep_state(model, batch, chunk_size=2048, workers=1):
    """Expected statistics for all sojourns of one macrostate.

    Chunks are summed in a fixed order, so the result is the same for any
    number of workers.
    """
    n = len(batch)
    chunks = [batch.subset(slice(a, min(a + chunk_size, n))) for a in range(0, n, chunk_size)]
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(lambda c: _estep_chunk(model, c)[0], chunks))
    else:
        parts = [_estep_chunk(model, c)[0] for c in chunks]
    acc = StateStats.zeros(model.grid.K, model.layout.dim(batch.state), model.layout.J)
    for part in parts:
        acc += part
    return _finish(model, batch.state, acc)


@dataclass
class EStepResult:
    stats: SufficientStats
    per_state: dict
    loglik: float
    n_skipped: int


def estep_total(model, batches, chunk_size=2048, workers=1):
    """Run the E-step over ``{state: SojournBatch}`` and assemble flat statistics."""
    lay = model.layout
    st = SufficientStats.zeros(model.grid.K, lay.total, lay.J)
    per_state = {}
    ll, skipped = 0.0, 0
    for i in sorted(batches):
        if i in lay.absorbing:
            continue
        acc = estep_state(model, batches[i], chunk_size, workers)
        per_state[i] = acc
        blk = lay.block(i)
        st.B[:, blk] += acc.B
        st.E[:, blk] += acc.E
        st.O_within[:, blk, blk] += acc.O_within
        st.O_exit[:, blk, :] += acc.O_exit
        ll += acc.loglik
        skipped += acc.n_skipped
    return EStepResult(st, per_state, ll, skipped)


def mstep(model, per_state, tol=1e-10, max_iter=100):
    """Regression updates of every rate and initial distribution.

    Each fit is warm-started from the current coefficients; returns the
    new model and a list of fits that did not converge.
    """
    lay = model.layout
    X = model.design
    Xk = X[1:]
    theta = model.theta.copy()
    eta = model.eta.copy()
    issues = []
    for i in lay.states:
        if i in lay.absorbing:
            continue
        acc = per_state.get(i)
        d = lay.dim(i)
        if acc is None:
            continue
        for a in range(d):
            for b in range(d):
                if a == b or theta.within_zero[i][a, b]:
                    continue
                fit = poisson_fit(acc.O_within[:, a, b], acc.E[:, a], Xk,
                                  init=theta.within[i][a, b], tol=tol, max_iter=max_iter)
                theta.within[i][a, b] = fit.coef
                theta.within_zero[i][a, b] = fit.zero
                if not fit.converged:
                    issues.append(("within", i, a, b))
        for j in lay.exits(i):
            for a in range(d):
                if theta.exit_zero[(i, j)][a]:
                    continue
                fit = poisson_fit(acc.O_exit[:, a, j - 1], acc.E[:, a], Xk,
                                  init=theta.exit[(i, j)][a], tol=tol, max_iter=max_iter)
                theta.exit[(i, j)][a] = fit.coef
                theta.exit_zero[(i, j)][a] = fit.zero
                if not fit.converged:
                    issues.append(("exit", i, a, j))
        if d > 1:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                mfit = multinomial_fit(acc.B, X, init=eta.eta[i], tol=tol, max_iter=max_iter)
            eta.eta[i] = mfit.coef
            if not mfit.converged:
                issues.append(("initial", i))
    return model.with_params(theta, eta), issues


def _const_coef(basis, X):
    """Coefficients with ``X @ c == 1`` (least squares)."""
    return np.linalg.lstsq(X, np.ones(X.shape[0]), rcond=None)[0]


def initial_model(paths, layout, grid, basis=None, seed=0, jitter=0.1, spread=0.0):
    """Starting values from crude macro occurrence-exposure rates.

    Every microstate of ``i`` gets the crude exit rate ``O_ij / E_i`` and
    within rates ``1 / (mean sojourn length)``; multiplicative jitter in
    ``[1 - jitter, 1 + jitter]`` breaks the symmetry between microstates.
    ``spread`` adds a lognormal perturbation (random restarts).
    """
    basis = basis if basis is not None else Basis()
    model = ResetModel(layout, grid, basis)
    Xk = model.design[1:]
    c1 = _const_coef(basis, Xk)
    _, E, O = macro_stats(paths, grid, layout.J)
    Etot = E.sum(axis=0)
    Otot = O.sum(axis=0)
    sj = extract_sojourns(paths, layout.absorbing)
    rng = np.random.default_rng(seed)
    theta = RateParams.zeros(layout, basis.n_params)
    eta = InitParams.zeros(layout, basis.n_params)

    def factor(size, d):
        f = np.ones(size)
        if d > 1:
            f = f * rng.uniform(1 - jitter, 1 + jitter, size)
        if spread > 0:
            f = f * np.exp(spread * rng.standard_normal(size))
        return f

    for i in layout.states:
        if i in layout.absorbing:
            continue
        d = layout.dim(i)
        nsoj = len(sj.get(i, []))
        within = nsoj / Etot[i - 1] if Etot[i - 1] > 0 and nsoj > 0 else 1.0
        rates = within * factor(d * d, d).reshape(d, d)
        theta.within[i] = np.log(rates)[:, :, None] * c1
        for j in layout.exits(i):
            o, e = Otot[i - 1, j - 1], Etot[i - 1]
            if o <= 0 or e <= 0:
                theta.exit_zero[(i, j)][:] = True
                continue
            rates = (o / e) * factor(d, d)
            theta.exit[(i, j)] = np.log(rates)[:, None] * c1
    return model.with_params(theta, eta)


@dataclass
class EMResult:
    model: ResetModel
    loglik: float
    trace: list
    iterations: int
    converged: bool
    diagnostics: list = field(default_factory=list)
    n_skipped: int = 0
    n_sojourns: int = 0


def _param_change(m0, m1):
    diffs = [0.0]
    for key in m0.theta.within:
        diffs.append(np.max(np.abs(m0.theta.within[key] - m1.theta.within[key]), initial=0.0))
    for key in m0.theta.exit:
        diffs.append(np.max(np.abs(m0.theta.exit[key] - m1.theta.exit[key]), initial=0.0))
    for key in m0.eta.eta:
        diffs.append(np.max(np.abs(m0.eta.eta[key] - m1.eta.eta[key]), initial=0.0))
    return float(max(diffs))


def em_fit(paths, layout, grid, basis=None, config=None, init_model=None, workers=1, callback=None):
    """Fit a reset model to macro paths by EM.

    Stops when the relative log-likelihood gain drops below
    ``config.loglik_rel_tolerance``, when no coefficient moves more than
    ``config.param_abs_tolerance``, or after ``config.max_iterations`` M-steps.
    The returned model is the last one whose log-likelihood was evaluated.
    """
    config = config if config is not None else EMConfig()
    basis = basis if basis is not None else (init_model.basis if init_model else Basis())
    if init_model is not None:
        if init_model.layout != layout or init_model.grid != grid:
            raise ValueError("init_model layout/grid differ from the requested ones")
        model = init_model
    elif config.init == "model":
        raise ValueError("init='model' needs init_model")
    else:
        spread = 0.5 if config.init == "random" else 0.0
        model = initial_model(paths, layout, grid, basis, config.seed, config.jitter, spread)
    batches = sojourn_batches(paths, layout.absorbing)
    n_soj = sum(len(b) for b in batches.values())
    trace, diags = [], []
    converged = False
    res = None
    last_change = math.inf
    for it in range(config.max_iterations + 1):
        t0 = time.perf_counter()
        res = estep_total(model, batches, config.chunk_size, workers)
        if res.n_skipped == n_soj and n_soj > 0:
            raise NumericalFailure("every sojourn has zero likelihood under the current model")
        if res.n_skipped:
            log.warning("iteration %d: skipped %d infeasible sojourns", it, res.n_skipped)
        ll = res.loglik
        trace.append(ll)
        diag = {"iteration": it, "loglik": ll, "skipped": res.n_skipped}
        if it > 0:
            gain = (ll - trace[-2]) / max(abs(trace[-2]), 1e-300)
            diag["rel_gain"] = gain
            diag["param_change"] = last_change
            if gain < config.loglik_rel_tolerance or last_change < config.param_abs_tolerance:
                converged = True
        if converged or it == config.max_iterations:
            diag["seconds"] = time.perf_counter() - t0
            diags.append(diag)
            if callback:
                callback(diag)
            break
        new_model, issues = mstep(model, res.per_state, config.inner_tol, config.inner_max_iter)
        if issues:
            diag["inner_not_converged"] = len(issues)
        last_change = _param_change(model, new_model)
        model = new_model
        diag["seconds"] = time.perf_counter() - t0
        diags.append(diag)
        if callback:
            callback(diag)
    return EMResult(model, trace[-1], trace, len(trace) - 1, converged, diags,
                    res.n_skipped if res else 0, n_soj)


# -- general models (verification path) ------------------------------------

@dataclass
class GeneralStats:
    """Expected statistics of one path under a general piecewise model."""

    loglik: float
    B0: np.ndarray  # (d_start,)
    E: np.ndarray  # (K, dbar)
    O_within: np.ndarray  # (K, dbar, dbar)
    jumps: list  # [(time, k, i, j, mass matrix d_i x d_j)]

    def reset_form(self, layout, K):
        """Collapse jump masses to the exit and entry statistics of the reset E-step."""
        B = np.zeros((K + 1, layout.total))
        Ox = np.zeros((K, layout.total, layout.J))
        for _, k, i, j, mass in self.jumps:
            Ox[k - 1, layout.block(i), j - 1] += mass.sum(axis=1)
            B[k, layout.block(j)] += mass.sum(axis=0)
        return B, Ox


def _path_vectors(pm, path):
    if path.censor_time is not None:
        raise ValueError("general E-step expects an uncensored path")
    times, states = path.times, path.states
    grid = pm.grid
    n = len(times) - 1
    init = pm.initial[states[0]]
    pre, fwd = [None], [init]
    Ps = [None]
    for ell in range(1, n + 1):
        i, j = states[ell - 1], states[ell]
        P = pm.within_product(i, times[ell - 1], times[ell])
        Ps.append(P)
        pre.append(fwd[-1] @ P)
        fwd.append(pre[-1] @ pm.block(grid.k_of(times[ell]), i, j))
    g = [None] * (n + 1)
    h = [None] * (n + 1)
    g[n] = np.ones(pm.layout.dim(states[n]))
    for ell in range(n, 0, -1):
        i, j = states[ell - 1], states[ell]
        h[ell] = pm.block(grid.k_of(times[ell]), i, j) @ g[ell]
        g[ell - 1] = Ps[ell] @ h[ell]
    L = float(init @ g[0])
    return times, states, pre, fwd, g, h, L


def general_expected_stats(pm, path):
    """Conditional expectations of micro statistics given one macro path.

    Works for any :class:`PiecewiseModel`, reset or not; used to check the
    sojourn-level E-step.
    """
    if isinstance(pm, ResetModel):
        pm = pm.to_piecewise()
    times, states, pre, fwd, g, h, L = _path_vectors(pm, path)
    lay, grid = pm.layout, pm.grid
    K, dbar = grid.K, lay.total
    if not L > 0:
        raise NumericalFailure("path has zero likelihood")
    E = np.zeros((K, dbar))
    Ow = np.zeros((K, dbar, dbar))
    jumps = []
    for ell in range(1, len(times)):
        i, j = states[ell - 1], states[ell]
        blk = lay.block(i)
        Asub = pm.sub(i)
        a, b = times[ell - 1], times[ell]
        # forward row at each segment start, backward column at each end
        w = fwd[ell - 1]
        segs = []
        for k in range(grid.segment_of(a), grid.k_of(b) + 1):
            lo, hi = grid.bounds(k)
            s0, s1 = max(lo, a), min(hi, b)
            if s1 > s0:
                segs.append((k, s0, s1))
        starts = []
        for k, s0, s1 in segs:
            starts.append(w)
            w = w @ matrix_exp(Asub[k - 1], s1 - s0)
        v = h[ell]
        for (k, s0, s1), w0 in zip(reversed(segs), reversed(starts)):
            Jm = rank_one_convolution(Asub[k - 1], v, w0, s1 - s0) / L
            d = Jm.shape[0]
            E[k - 1, blk] += np.diag(Jm)
            Wk = Asub[k - 1].copy()
            Wk[np.arange(d), np.arange(d)] = 0.0
            Ow[k - 1, blk, blk] += Wk * Jm.T
            v = matrix_exp(Asub[k - 1], s1 - s0) @ v
        kj = grid.k_of(b)
        mass = pre[ell][:, None] * pm.block(kj, i, j) * g[ell][None, :] / L
        jumps.append((b, kj, i, j, mass))
    B0 = pm.initial[states[0]] * g[0] / L
    return GeneralStats(math.log(L), B0, E, Ow, jumps)


def conditional_sojourn_law(pm, path, ell, t, s):
    """Micro law of the ``ell``-th sojourn (1-based) given the whole macro path.

    With ``h(x) = P_i(x, T_ell) alpha_ell`` the conditional process inside
    the sojourn is Markov with

    * ``pi_tilde = alpha_{ell-1} * h(T_{ell-1}) / L``,
    * ``p_tilde(t, s)[a, b] = P_i(t, s)[a, b] h_b(s) / h_a(t)``,
    * ``mu_tilde(t)[a, b] = mu_ab(t) h_b(t) / h_a(t)`` off the diagonal.

    Returns ``(pi_tilde, p_tilde(t, s), mu_tilde(t))``.
    """
    if isinstance(pm, ResetModel):
        pm = pm.to_piecewise()
    times, states, pre, fwd, g, h, L = _path_vectors(pm, path)
    n = len(times) - 1
    if not 1 <= ell <= n:
        raise IndexError(f"sojourn {ell} outside 1..{n}")
    i = states[ell - 1]
    t_in, t_out = times[ell - 1], times[ell]
    if not t_in <= t <= s < t_out:
        raise ValueError("need T_{ell-1} <= t <= s < T_ell")

    def hvec(x):
        return pm.within_product(i, x, t_out) @ h[ell]

    pi_t = fwd[ell - 1] * g[ell - 1] / L
    ht, hs = hvec(t), hvec(s)
    p_t = pm.within_product(i, t, s) * hs[None, :] / ht[:, None]
    A = pm.sub(i)[pm.grid.segment_of(t) - 1]
    d = A.shape[0]
    mu_t = A * ht[None, :] / ht[:, None]
    mu_t[np.arange(d), np.arange(d)] = 0.0
    mu_t[np.arange(d), np.arange(d)] = -mu_t.sum(axis=1)
    return pi_t, p_t, mu_t


def identify_labels(reference, fitted, state):
    """Permutation of ``fitted`` microstates in ``state`` best matching ``reference``.

    Matches by total exit rate over all intervals (label switching).
    """
    from itertools import permutations

    lay = reference.layout
    d = lay.dim(state)
    ref = -np.stack([reference.sub[state][:, a, a] for a in range(d)])
    fit = -np.stack([fitted.sub[state][:, a, a] for a in range(d)])
    if d > 7:
        order_ref = np.argsort(ref.mean(axis=1))
        order_fit = np.argsort(fit.mean(axis=1))
        perm = np.empty(d, dtype=int)
        perm[order_ref] = order_fit
        return perm
    best, best_perm = math.inf, None
    for perm in permutations(range(d)):
        err = np.sum((np.log(ref + 1e-300) - np.log(fit[list(perm)] + 1e-300)) ** 2)
        if err < best:
            best, best_perm = err, np.array(perm)
    return best_perm
