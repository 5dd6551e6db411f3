"""Circle-average Gaussian free fields on point grids and Liouville masses.

The covariance of h_delta(x), h_delta(y) is  A_delta(x, y) + tildeG(x, y)  where
tildeG is the regular (harmonic) part of the Dirichlet Green's function and
A_delta is the double circle average of log 1/|z - w|.  For |x - y| >= 2 delta
the circles are disjoint and A_delta = log 1/|x - y|; closer pairs need the
overlap integral.  The shortcut log 1/max(delta, |x - y|) agrees on the
diagonal and beyond 2 delta but is not positive definite on a grid of
spacing delta, so it is only available as short_range="cap".
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import integrate, linalg

from .core import DomainError, _gamma, _kappa, as_generator, cell_centers


class FactorizationError(np.linalg.LinAlgError):
    def __init__(self, msg, min_eig):
        super().__init__(msg)
        self.min_eig = min_eig


MAX_POINTS = 96 * 96


# ---------------------------------------------------------------- kernels

@lru_cache(maxsize=4096)
def _overlap(rho: float) -> float:
    """Mean over |u| = 1 of log 1/max(|rho + u|, 1), for 0 <= rho < 2.

    The circle average of log 1/|z - w| over |w - y| = 1 is
    log 1/max(|z - y|, 1); this averages it once more over the other circle.
    """
    if rho == 0.0:
        return 0.0
    # |rho + e^{it}| < 1 exactly when cos t < -rho/2
    t0 = math.acos(-rho / 2.0)

    def f(t):
        return -0.5 * math.log(rho * rho + 1.0 + 2.0 * rho * math.cos(t))

    val, _ = integrate.quad(f, 0.0, t0, epsabs=1e-14, epsrel=1e-13, limit=200)
    return val / math.pi


def short_range_part(r, delta, mode="circle"):
    """The log 1/|x - y| part of the regularized covariance at distance r."""
    r = np.asarray(r, float)
    shape = r.shape
    r = r.ravel()
    out = -np.log(np.maximum(r, delta))
    if mode == "cap":
        return out.reshape(shape)
    if mode != "circle":
        raise ValueError(f"unknown short-range mode {mode!r}")
    rho = r / delta
    near = rho < 2.0
    if np.any(near):
        keys = np.round(rho[near], 12)
        uniq, inv = np.unique(keys, return_inverse=True)
        vals = np.array([_overlap(float(u)) for u in uniq])
        out[near] = -math.log(delta) + vals[inv.ravel()]
    return out.reshape(shape)


# g - conj(g') and g - g' are only known to ~1e-16 |g|; below this relative
# height the pairwise regular part is rounding noise
RESOLVED_HEIGHT = 1e-8


def resolved(g, alive=None) -> np.ndarray:
    """Mapped points whose pairwise kernel values are numerically meaningful.

    Points in nearly pinched-off regions keep an accurate CR but sit so
    close to the real line after mapping that differences of g lose all
    digits of their imaginary part.
    """
    g = np.asarray(g, complex)
    ok = g.imag > RESOLVED_HEIGHT * np.maximum(np.abs(g), 1.0)
    return ok if alive is None else ok & np.asarray(alive, bool)


def _tilde_disc(x, y):
    return np.log(np.abs(1.0 - np.conj(x) * y))


def _tilde_slit(x, y, gx, gy, Lx, Ly):
    """Regular part for H minus a hull, from mapped points g and log g'."""
    d = np.abs(x - y)
    same = d == 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        off = np.log(np.abs(gx - np.conj(gy))) - np.log(np.abs(gx - gy)) + np.log(d)
    diag = np.log(2.0 * gx.imag) - Lx.real
    return np.where(same, diag, off)


@dataclass
class CovarianceModel:
    """Covariance of circle averages at radius delta in a fixed domain.

    domain "unit_disc", "half_plane", or "half_plane_slit" with `chain` giving the
    Loewner map (any object with a track(z) method returning g, log_deriv
    and alive arrays).  A slit model without a chain works on map data
    passed explicitly as `mapped=(g, log_deriv, alive)`.
    """

    delta: float
    domain: str = "unit_disc"
    chain: object = None
    short_range: str = "circle"

    def __post_init__(self):
        if not self.delta > 0:
            raise DomainError("delta must be positive")
        if self.domain not in ("unit_disc", "half_plane", "half_plane_slit"):
            raise ValueError(f"unknown domain {self.domain!r}")

    @classmethod
    def unit_disc(cls, delta, short_range="circle"):
        return cls(delta, "unit_disc", None, short_range)

    @classmethod
    def half_plane(cls, delta, short_range="circle"):
        return cls(delta, "half_plane", None, short_range)

    @classmethod
    def half_plane_slit(cls, chain, delta, short_range="circle"):
        return cls(delta, "half_plane_slit", chain, short_range)

    def conformal_data(self, z):
        """(g, log g', alive) at z: the map to the reference domain."""
        z = np.atleast_1d(np.asarray(z, complex))
        if self.domain == "unit_disc":
            return z, np.zeros(len(z), complex), np.abs(z) < 1.0
        if self.domain == "half_plane":
            return z, np.zeros(len(z), complex), z.imag > 0
        if self.chain is None:
            raise ValueError("slit model without a chain needs precomputed map data")
        pts = self.chain.track(z)
        return pts.g, pts.log_deriv, pts.alive

    def cr(self, z, mapped=None):
        z = np.atleast_1d(np.asarray(z, complex))
        if self.domain == "unit_disc":
            return 1.0 - np.abs(z) ** 2
        g, L, alive = mapped if mapped is not None else self.conformal_data(z)
        return np.where(alive, 2.0 * g.imag * np.exp(-L.real), 0.0)

    def near_boundary(self, z, mapped=None):
        """Points whose circles of radius delta may leave the domain (CR < 4 delta)."""
        return self.cr(z, mapped) < 4.0 * self.delta

    def tilde_g(self, x, y, mapped_x=None, mapped_y=None):
        x = np.asarray(x, complex)
        y = np.asarray(y, complex)
        if self.domain == "unit_disc":
            return _tilde_disc(x, y)
        gx, Lx, ax = mapped_x if mapped_x is not None else self.conformal_data(x.ravel())
        gy, Ly, ay = mapped_y if mapped_y is not None else self.conformal_data(y.ravel())
        if not (np.all(ax) and np.all(ay)):
            raise DomainError("covariance evaluated at a swallowed point")
        if not (np.all(resolved(gx)) and np.all(resolved(gy))):
            raise DomainError("covariance evaluated at an unresolved point")
        shp = np.broadcast(x, y).shape
        return _tilde_slit(x, y, gx.reshape(x.shape), gy.reshape(y.shape),
                           Lx.reshape(x.shape), Ly.reshape(y.shape)).reshape(shp)

    def matrix(self, z, mapped=None) -> np.ndarray:
        z = np.atleast_1d(np.asarray(z, complex))
        if self.domain != "unit_disc":
            g, L, alive = mapped if mapped is not None else self.conformal_data(z)
            if not np.all(alive):
                raise DomainError(f"{np.sum(~alive)} grid points were swallowed")
            if not np.all(resolved(g)):
                raise DomainError(f"{np.sum(~resolved(g))} grid points are unresolved "
                                  "(nearly pinched off); filter them with field.resolved")
            T = _tilde_slit(z[:, None], z[None, :], g[:, None], g[None, :], L[:, None], L[None, :])
        else:
            if np.any(np.abs(z) >= 1.0):
                raise DomainError("points must lie inside the unit disc")
            T = _tilde_disc(z[:, None], z[None, :])
        K = short_range_part(np.abs(z[:, None] - z[None, :]), self.delta, self.short_range) + T
        return 0.5 * (K + K.T)


def covariance(model: CovarianceModel, x, y):
    """Kernel value(s) K(x, y); broadcasts over x and y."""
    x = np.asarray(x, complex)
    y = np.asarray(y, complex)
    r = np.abs(x - y)
    out = short_range_part(r, model.delta, model.short_range) + model.tilde_g(x, y)
    return out if out.ndim else float(out)


# ---------------------------------------------------------------- sampling

class GaussianSampler:
    """Draws N(0, K) vectors from a dense lower Cholesky factor."""

    def __init__(self, K, max_jitter=1e-10):
        K = np.asarray(K, float)
        n = len(K)
        if n > MAX_POINTS:
            raise ValueError(f"{n} points exceed the dense budget of {MAX_POINTS}")
        scale = max(float(np.max(np.abs(np.diag(K)))), 1.0)
        jitter = 0.0
        while True:
            try:
                self.L = linalg.cholesky(K + jitter * scale * np.eye(n), lower=True,
                                         check_finite=False)
                break
            except linalg.LinAlgError:
                if jitter >= max_jitter:
                    lo = float(linalg.eigvalsh(K, subset_by_index=[0, 0])[0])
                    raise FactorizationError(
                        f"covariance not positive definite (min eigenvalue {lo:.3e})", lo)
                jitter = 1e-14 if jitter == 0.0 else jitter * 10.0
        self.jitter = jitter * scale
        self.n = n

    def draw(self, rng, n_fields=1) -> np.ndarray:
        """Array of shape (n_fields, n)."""
        gen = as_generator(rng)
        Z = gen.standard_normal((self.n, n_fields))
        return (self.L @ Z).T


@dataclass
class CircleAverageField:
    """Field values h (n_fields x M) at points z, regularized at radius delta."""

    z: np.ndarray
    h: np.ndarray
    delta: float
    level: int | None = None
    cells: tuple | None = None
    flagged: np.ndarray | None = None


def grid_points(region, level):
    """(I, J, centers) of the dyadic cells of the given level tiling region."""
    return cell_centers(region, level)


def sample_field(rng, model: CovarianceModel, grid, n_fields=1, sampler=None,
                 mapped=None) -> CircleAverageField:
    """Exact Gaussian draws of the circle-average field at the grid points.

    grid is either an array of points or a pair (region, level) of dyadic
    cells whose centers are used.
    """
    level, cells = None, None
    if isinstance(grid, tuple) and len(grid) == 2 and np.ndim(grid[0]) == 1 and len(grid[0]) == 4:
        region, level = grid
        I, J, z = grid_points(region, level)
        cells = (I, J)
    else:
        z = np.atleast_1d(np.asarray(grid, complex))
    if mapped is None and model.domain != "unit_disc":
        mapped = model.conformal_data(z)
    if sampler is None:
        sampler = GaussianSampler(model.matrix(z, mapped))
    h = sampler.draw(rng, n_fields)
    return CircleAverageField(z, h, model.delta, level, cells, model.near_boundary(z, mapped))


# ---------------------------------------------------------------- measures

@dataclass
class MeasureGrid:
    level: int | None
    delta: float
    masses: np.ndarray
    weighted: np.ndarray | None = None
    z: np.ndarray | None = None
    cells: tuple | None = None

    def total(self, weighted=False) -> np.ndarray:
        m = self.weighted if weighted else self.masses
        return m.sum(axis=-1)

    def to_csv(self, path, h=None, field_index=0):
        n = self.masses.shape[-1]
        mu = np.atleast_2d(self.masses)[field_index]
        mt = None if self.weighted is None else np.atleast_2d(self.weighted)[field_index]
        hh = None if h is None else np.atleast_2d(h)[field_index]
        I, J = self.cells if self.cells is not None else (np.arange(n), np.zeros(n, int))
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["i", "j", "h", "mu", "mu_tilde"])
            for k in range(n):
                w.writerow([int(I[k]), int(J[k]),
                            "" if hh is None else repr(float(hh[k])),
                            repr(float(mu[k])),
                            "" if mt is None else repr(float(mt[k]))])


def liouville_masses(field: CircleAverageField, gamma, cell_area=None) -> MeasureGrid:
    """mu(S) = delta^{g^2/2} e^{g h} |S| with one sample point per cell.

    The cell area defaults to delta^2, the square of the regularization radius.
    """
    gp = _gamma(gamma)
    d = field.delta
    area = d * d if cell_area is None else cell_area
    mu = d ** gp.gamma_sq_half * np.exp(gp.gamma * field.h) * area
    return MeasureGrid(field.level, d, mu, None, field.z, field.cells)


def winding_weighted_masses(measure: MeasureGrid, windings, kappa, gamma) -> MeasureGrid:
    """mu~(S) = mu(S) exp(-gamma chi w(center))."""
    w = np.asarray(windings, float)
    if w.shape[-1] != measure.masses.shape[-1]:
        raise ValueError("one winding per cell is required")
    if np.any(np.isnan(w)):
        raise ValueError(f"{int(np.isnan(w).sum())} cells have no winding")
    chi = _kappa(kappa).chi
    g = _gamma(gamma).gamma
    wt = measure.masses if chi == 0.0 else measure.masses * np.exp(-g * chi * w)
    return MeasureGrid(measure.level, measure.delta, measure.masses, wt, measure.z, measure.cells)
