"""Winding of the angle diffusion conditioned to exit in a late time window.

The angle alpha_t of g_t(z) - zeta_t (in the log-CR clock) is a diffusion on
(0, 2 pi).  Given that it survives to time T and exits before T + 1, the
accumulated winding looks Gaussian, and its variance grows at rate kappa / 4
in T (plus an offset from the start and the final exit).
"""
import math

import numpy as np

from slekpz import diffusion, spectral
from slekpz.core import RandomStream

kappa = 2.0
sys_ = spectral.eigen_solve(kappa, 2000)
print("lambda_0 =", sys_.eigenvalues[0], "expected", 1 - kappa / 8)

# %% how rare is the event?  Past T ~ 6 rejection sampling becomes expensive.
for T in (4.0, 6.0, 8.0, 10.0):
    p = spectral.window_probability(sys_, math.pi, T, 1.0)
    print(f"P(tau in ({T:g}, {T + 1:g}]) = {p:.2e}")

# %% sample with the h-transform and look at the variance
Ts, vs = [], []
for i, T in enumerate((4.0, 6.0, 8.0)):
    W = diffusion.conditioned_windings(RandomStream(1, i), kappa, diffusion.ConditioningWindow(T, 1.0),
                                       4000, sampler="htransform", spectral_system=sys_)
    Ts.append(T)
    vs.append(W.var())
    print(f"T = {T:g}: Var W = {W.var():.3f}")

slope = np.polyfit(Ts, vs, 1)[0]
print(f"slope {slope:.3f}, expected {kappa / 4}")
