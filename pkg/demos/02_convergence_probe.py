"""
Gradient-norm bound on a noisy quadratic
========================================

SGD with step eta/sqrt(T) on f = 0.5 theta^T A theta, observed through
uniform gradient noise.  All constants are known exactly, so the bound can
be checked directly and the average gradient norm should fall like T^-1/2.
"""

import numpy as np

from imachsr import convergence

Ts = [100, 400, 1600, 6400]
problem = convergence.make_quadratic(seed=0)
print("L =", round(problem.smoothness, 4), " G =", round(problem.gradient_bound, 4),
      " sigma =", round(problem.noise_std, 4))

report = convergence.probe_quadratic(Ts, seed=0)
for e in report.entries:
    print(f"T={e.T:5d}  avg={e.average:9.4f}  bound={e.bound:9.4f}  holds={e.holds}")
print("log-log slope:", round(report.slope, 3), "window", report.slope_window)

# the bound itself scales like 1/sqrt(T): four times the steps, half the bound
print("ratio of bounds T=100 / T=400:", report.entries[0].bound / report.entries[1].bound)

# plug-in constants from a trace come out close to the exact ones
trace = []
convergence.run_quadratic_sgd(convergence.make_quadratic(0, start="top"), 1000, 1.0, seed=0,
                              n_samples=8, trace=trace)
est = convergence.estimate_constants_from_trace(trace).ce
print("estimated L, G, sigma:", np.round([est.L, est.G, est.sigma], 4))

# across seeds the worst case stays well under the bound
worst = max(max(e.average / e.bound for e in convergence.probe_quadratic(Ts, s).entries) for s in range(20))
print("worst average/bound over 20 seeds:", round(worst, 4))
