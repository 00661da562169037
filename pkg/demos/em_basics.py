"""
EM for an aggregate Markov model in a few steps
===============================================

A two-state process (healthy <-> sick) is observed only at the macro level,
but the sick state hides two microstates: a short-stay one and a long-stay
one.  We simulate from that truth, fit models with one and two microstates,
and look at what the E-step recovers.

Run with ``python demos/em_basics.py``.
"""

import numpy as np

from aggmarkov import Basis, EMConfig, MicroLayout, TimeGrid, em_fit, estep_sojourn, simulate_aggregate
from aggmarkov.data import SojournRecord
from aggmarkov.evaluate import conditional_survival
from aggmarkov.model import InitParams, RateParams, ResetModel

# Truth: macrostate 1 has one microstate, macrostate 2 has two.
layout = MicroLayout((1, 2))
grid = TimeGrid([0.0, 2.0, 4.0, 6.0])
basis = Basis("poly", 0)  # constant rates, one coefficient each

theta = RateParams.zeros(layout, 1)
theta.exit[(1, 2)][:] = np.log(0.5)
# sick microstate 1 recovers fast, microstate 2 slowly; no moves between them
theta.exit[(2, 1)][:, 0] = [np.log(2.0), np.log(0.2)]
theta.within_zero[2][:] = True
eta = InitParams.zeros(layout, 1)
eta.eta[2][:] = np.log(0.6 / 0.4)  # 60% of sick spells start in the fast microstate
truth = ResetModel(layout, grid, basis, theta, eta)

_, paths = simulate_aggregate(truth, 3000, seed=1, horizon=8.0)
print(f"simulated {len(paths)} macro paths, {sum(len(p.jumps) for p in paths)} jumps")

# Fit a plain Markov chain (d = 1) and the two-microstate model.
fits = {}
for d2 in (1, 2):
    res = em_fit(paths, MicroLayout((1, d2)), grid, basis, EMConfig(max_iterations=300))
    fits[d2] = res
    print(f"d2={d2}: log-likelihood {res.loglik:.2f} after {res.iterations} iterations")

# The trace never decreases.
tr = np.asarray(fits[2].trace)
print("largest step down in the trace:", max(0.0, float(np.max(tr[:-1] - tr[1:]))))

# Microstate labels and even the split into microstates are not unique: many
# phase-type representations give the same sojourn law.  Compare the laws.
m = fits[2].model
u = np.array([0.5, 1.0, 2.0, 4.0])
for name, model in (("truth", truth), ("d2=1", fits[1].model), ("d2=2", m)):
    S = conditional_survival(model, 0.5, 0.5 + u, 2)
    print(f"{name:6s} sick-spell survival at u={u.tolist()}: {np.round(S, 3)}")

# E-step for one sick spell of length 3: a long spell points to the slow microstate.
st = estep_sojourn(m, SojournRecord("demo", 2, 1.0, 4.0, 1))
slow = int(np.argmin(m.exit[(2, 1)][0]))
print(f"prior probability of the slow-exit microstate: {m.pi[2][grid.k_of(1.0)][slow]:.3f}, "
      f"posterior after a 3-year spell: {st.B[grid.k_of(1.0)][slow]:.3f}")
