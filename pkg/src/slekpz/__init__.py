"""Numerics for SLE windings, Liouville measures and quantum Minkowski dimensions.

Modules: core (parameters, KPZ calculators, dyadic squares, random streams),
spectral, diffusion, loewner, field, dimension, experiments and cli.
"""
from .core import (DomainError, DyadicSquare, GammaParams, InfeasibleError, KappaParams,
                   RandomStream, flowline_inverse, flowline_relation, kpz_ds, kpz_ds_inverse,
                   kpz_forward, kpz_inverse)

__version__ = "0.1.0"
