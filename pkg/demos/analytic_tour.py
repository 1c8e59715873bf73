"""Closed-form checks that need no training.

Run with ``python3 demos/analytic_tour.py``. Takes a few seconds.
"""
import math

import numpy as np

from sbflow import analytic
from sbflow.bridge import InterpolantSchedule, optimal_eps_star, precond_coeffs

# %% Entropic OT between two unit Gaussians, against a Sinkhorn solve
for eps in (0.1, 0.25, 1.0):
    exact = analytic.gaussian_eot_cross_cov(1.0, 1.0, eps)
    print(f"eps={eps:<5} closed form {exact:.6f}")
print("sinkhorn at eps=0.25:", round(analytic.sinkhorn_1d_oracle(1.0, 1.0, 0.25), 6))

# %% Iterated Markovian fitting on Gaussians with a biased drift
for mode in analytic.MODES:
    for e in (0.0, 0.2):
        states = analytic.run_imf_gaussian(mode, e, 200, stop_if_inadmissible=True)
        dev = max(abs(s.c11 - 1) for s in states)
        tag = "" if len(states) == 201 else f"  (left admissible set at n={len(states)})"
        print(f"{mode:17s} eps_err={e}: max|c11-1| = {dev:.3g}{tag}")
print("fixed point sqrt(2)-1 =", analytic.SQRT2_M1)

# %% Two-set projection toy: the flow and the relaxed iterates
flow = analytic.toy_flow(1.0, 0.5, np.array([0.0, 1.0, 5.0]))
print("flow x:", np.round(flow.x, 4), " y:", np.round(flow.y, 4))
for a in (0.1, 0.5, 1.0):
    it = analytic.toy_iterate(1.0, 0.5, a, 20)
    print(f"alpha={a}: y_20 = {it[-1].y:.6f}, summed form {analytic.toy_y_sum(1.0, 0.5, a, 20):.6f}")

# %% Preconditioning and the diffusivity of the Brownian interpolant
pc = precond_coeffs(0.5, 2.0)
print("precond at t=0.5, eps=2:", pc)
sched = InterpolantSchedule.brownian(1.5)
print("eps* along t:", [round(optimal_eps_star(sched, t), 6) for t in (0.1, 0.5, 0.9)],
      "vs sigma0 =", 1.5, "and sqrt(2) sigma0 =", round(1.5 * math.sqrt(2), 6))
