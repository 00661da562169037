"""
Disability model: microstates versus a semi-Markov truth
========================================================

Paths are simulated from a semi-Markov disability model (active, disabled,
dead) whose recovery and death rates depend on the time spent disabled.
Aggregate Markov models with d2 = 1, 2, 3 microstates in the disabled state
are fitted by EM, and the duration effect they recover is compared with the
truth and a segmented Poisson GLM.

Run with ``python demos/disability_study.py [N]`` (default N = 2000; the
full-size study uses 10000 and takes much longer).
"""

import sys

import numpy as np

from aggmarkov import Basis, EMConfig, MicroLayout, TimeGrid, em_fit, simulate_semi_markov
from aggmarkov.evaluate import conditional_survival, fitted_semimarkov_rate, glm_benchmark, open_partition
from aggmarkov.simulate import DISABILITY_FIT_GRID, disability_preset

n = int(sys.argv[1]) if len(sys.argv) > 1 else 2000
preset = disability_preset()
paths = simulate_semi_markov(preset, n, seed=2024)
n_dis = sum(1 for p in paths for _, s in p.jumps if s == 2)
print(f"{n} paths from age 30 to 110, {n_dis} disability onsets")

grid = TimeGrid(DISABILITY_FIT_GRID)
fits = {}
for d2 in (1, 2, 3):
    layout = MicroLayout((1, d2, 1), absorbing=(3,))
    fits[d2] = em_fit(paths, layout, grid, Basis("poly", 1), EMConfig())
    r = fits[d2]
    print(f"d2={d2}: log-likelihood {r.loglik:.2f} ({r.iterations} iterations, converged={r.converged})")

# Conditional survival of a disability spell that starts at age 60.5.
s = 60.5
u = open_partition(0.0, 20.0, 81, [p - s for p in DISABILITY_FIT_GRID])
true = preset.sojourn_survival(2, s, u)
print("\nsup distance to the true disability-spell survival (entry at 60.5):")
for d2, r in fits.items():
    S = conditional_survival(r.model, s, s + u, 2)
    print(f"  d2={d2}: {np.max(np.abs(S - true)):.4f}")

# Recovery rate one year into a spell: d2 = 1 cannot see the duration effect.
ages = np.array([45.0, 55.0, 65.0])
glm = glm_benchmark(paths, 2, 1, np.arange(30.0, 111.0), absorbing=(3,))
print("\nrecovery rate at duration 0.5 and 3 years:")
for t in ages:
    row = [f"age {t:.0f}"]
    for uu in (0.5, 3.0):
        fit = [fitted_semimarkov_rate(fits[d].model, t, uu, 1, 2) for d in (1, 3)]
        row.append(f"u={uu}: true {float(preset.rate(2, 1, t, uu)):.3f} "
                   f"d2=1 {fit[0]:.3f} d2=3 {fit[1]:.3f} glm {float(glm(t, uu)):.3f}")
    print("  " + " | ".join(row))
