"""KPZ for a deterministic set: a horizontal segment in the unit disc.

Each level gets independent circle-average fields sampled at the centers of
the hit cells.  The quantum content sum mu(S)^q decays like 2^(n theta(q))
and the root of theta is the quantum dimension, which KPZ ties to the
Euclidean dimension 1.
"""
import numpy as np

from slekpz import dimension, kpz_forward, kpz_inverse
from slekpz.core import RandomStream

gamma = 1.0
segment = np.linspace(-0.25, 0.25 - 1e-9, 4000) + 0.1j
reports = dimension.liouville_cover_reports(RandomStream(3), segment, range(3, 9), gamma, 200)

for q in (0.0, 0.25, 0.5, 0.75):
    theta, se = dimension.exponent_fit(reports, q, n_boot=100)
    print(f"theta({q:.2f}) = {theta:+.3f} +- {se:.3f}")

q_star = dimension.dimension_estimate(reports)
print(f"q* = {q_star:.4f}   KPZ prediction {kpz_inverse(1.0, gamma):.4f}   "
      f"kpz_forward(q*) = {kpz_forward(q_star, gamma):.3f}")
