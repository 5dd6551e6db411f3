"""Spectral theory of the angle diffusion on (0, 2pi).

The generator is (k/2) f'' + ((k-4)/2) cot(x/2) f'.  Its speed density is
m(x) = sin(x/2)^(2-8/k) and its scale function s(x) = int_0^x sin(u/2)^(8/k-2) du.
We discretize the Green operator f -> int G(x,y) f(y) m(y) dy on a grid
graded toward both endpoints.  The Nystrom extension of the discrete
eigenvectors then gives phi_i and phi_i' at arbitrary points.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, special

from .core import DomainError, KappaParams, _kappa

TWO_PI = 2.0 * math.pi
CACHE_VERSION = 1
_MAGIC = b"SLESPEC\x00"


class DiscretizationError(RuntimeError):
    pass


class SeriesDomainError(ValueError):
    """The eigen-series is only used for T > 0.5."""


def _betas(kappa: float):
    a = 8.0 / kappa - 2.0
    p = (a + 1.0) / 2.0
    return a, p, special.beta(p, 0.5)


def scale_function(x, kappa):
    """s(x) = int_0^x sin(u/2)^(8/k - 2) du.

    With t = sin^2(u/2) this becomes an incomplete beta integral
    B(sin^2(x/2); (a+1)/2, 1/2), a = 8/k - 2, for x <= pi.  The other half
    follows from the symmetry u -> 2pi - u.
    """
    k = _kappa(kappa).kappa
    x = np.asarray(x, dtype=float)
    if np.any((x < 0) | (x > TWO_PI)):
        raise DomainError("x must lie in [0, 2pi]")
    _, p, half = _betas(k)
    xl = np.minimum(x, TWO_PI - x)
    lower = half * special.betainc(p, 0.5, np.sin(xl / 2.0) ** 2)
    out = np.where(x <= math.pi, lower, 2.0 * half - lower)
    return out if out.ndim else float(out)


def scale_total(kappa) -> float:
    return 2.0 * _betas(_kappa(kappa).kappa)[2]


def scale_derivative(x, kappa):
    k = _kappa(kappa).kappa
    return np.sin(np.asarray(x, dtype=float) / 2.0) ** (8.0 / k - 2.0)


def speed_density(x, kappa):
    k = _kappa(kappa).kappa
    return np.sin(np.asarray(x, dtype=float) / 2.0) ** (2.0 - 8.0 / k)


def greens_function(x, y, kappa):
    """G(x, y) = s(x ^ y) (s(2pi) - s(x v y)) / s(2pi)."""
    k = _kappa(kappa).kappa
    x, y = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float))
    S = scale_total(k)
    lo = scale_function(np.minimum(x, y), k)
    hi = scale_function(TWO_PI - np.maximum(x, y), k)
    out = lo * hi / S
    return out if np.ndim(out) else float(out)


def _scale_pair(x, kappa):
    x = np.clip(x, 0.0, TWO_PI)
    return scale_function(x, kappa), scale_function(TWO_PI - x, kappa)


def graded_grid(M: int):
    """Midpoint rule in theta for x = pi (1 - cos(pi theta)).

    Nodes cluster quadratically at both endpoints.
    """
    th = (np.arange(M) + 0.5) / M
    x = math.pi * (1.0 - np.cos(math.pi * th))
    w = math.pi ** 2 * np.sin(math.pi * th) / M
    return x, w


@dataclass
class SpectralSystem:
    kappa: KappaParams
    x: np.ndarray
    w: np.ndarray
    m: np.ndarray
    s: np.ndarray
    s_total: float
    eigenvalues: np.ndarray      # generator eigenvalues, ascending
    theta: np.ndarray            # Green-operator eigenvalues
    phi: np.ndarray              # (K, M) grid values, orthonormal in L^2(m)
    coeffs: np.ndarray           # c_i = int phi_i dm
    n_series: int = 0
    _acum: np.ndarray = field(default=None, repr=False)
    _bcum: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        lam = self.eigenvalues
        small = np.nonzero(lam * np.exp(-0.5 * lam) < 1e-14)[0]
        small = small[lam[small] > 1.0]
        self.n_series = int(small[0]) + 1 if len(small) else len(lam)
        # Prefix sums for the Nystrom extension:
        # phi_i(x) = (1/theta_i) sum_j G(x, x_j) m_j w_j phi_i(x_j)
        om = self.phi * (self.m * self.w)[None, :] / self.theta[:, None]
        K, M = om.shape
        self._acum = np.zeros((K, M + 1))
        self._acum[:, 1:] = np.cumsum(om * self.s[None, :], axis=1)
        tail = om * self.sc[None, :]
        self._bcum = np.zeros((K, M + 1))
        self._bcum[:, :-1] = np.cumsum(tail[:, ::-1], axis=1)[:, ::-1]

    @property
    def M(self) -> int:
        return len(self.x)

    @property
    def n_modes(self) -> int:
        return len(self.eigenvalues)

    @property
    def sc(self) -> np.ndarray:
        """s(2pi) - s(x_i), computed without cancellation."""
        return self.s[::-1]

    def _ab(self, x, weights):
        """Combined prefix/suffix sums at x for sum_i weights_i phi_i."""
        x = np.atleast_1d(np.asarray(x, float))
        k = np.searchsorted(self.x, x)
        wt = np.asarray(weights, float)
        n = len(wt)
        A = wt @ self._acum[:n, :][:, k]
        B = wt @ self._bcum[:n, :][:, k]
        return x, A, B

    def combination(self, x, weights, derivative=False):
        """Evaluate sum_i weights_i phi_i (or its derivative) at points x."""
        x, A, B = self._ab(x, weights)
        S = self.s_total
        if derivative:
            return scale_derivative(x, self.kappa) * (B - A) / S
        sx, sxc = _scale_pair(x, self.kappa)
        return (sxc * A + sx * B) / S

    def log_gradient(self, x, weights):
        """d/dx log(sum_i weights_i phi_i) via the extension formulas."""
        x, A, B = self._ab(x, weights)
        S = self.s_total
        sx, sxc = _scale_pair(x, self.kappa)
        num = scale_derivative(x, self.kappa) * (B - A)
        den = sxc * A + sx * B
        return num / den, den / S

    def eigenfunction(self, i: int, x, derivative=False):
        wt = np.zeros(i + 1)
        wt[i] = 1.0
        return self.combination(x, wt, derivative)


def eigen_solve(kappa, M: int = 2000, n_modes: int = 200) -> SpectralSystem:
    """Dense symmetric solve of the discretized Green operator."""
    kp = _kappa(kappa)
    if M < 500:
        raise DomainError("M must be at least 500")
    k = kp.kappa
    x, w = graded_grid(M)
    m = speed_density(x, k)
    s = scale_function(x, k)
    sc = s[::-1]  # the grid is symmetric, so s(2pi - x_i) = s(x_{M-1-i})
    S = scale_total(k)
    i = np.arange(M)
    lo = np.minimum.outer(i, i)
    hi = np.maximum.outer(i, i)
    G = s[lo] * sc[hi] / S
    r = np.sqrt(m * w)
    Kmat = r[:, None] * G * r[None, :]
    if not np.all(np.isfinite(Kmat)):
        raise DiscretizationError("weighted kernel is not finite on the grid")
    n_modes = min(n_modes, M)
    theta, vec = linalg.eigh(Kmat, subset_by_index=[M - n_modes, M - 1], driver="evr")
    theta, vec = theta[::-1], vec[:, ::-1]
    if theta[0] <= 0:
        raise DiscretizationError("leading eigenvalue is not positive")
    keep = theta > 0
    theta, vec = theta[keep], vec[:, keep]
    phi = (vec / r[:, None]).T
    # One Nystrom pass at the nodes: phi_j = (1/theta) sum_k G_jk m_k w_k phi_k.
    # Near the endpoints the raw eigenvector entries sit at rounding level;
    # the pass recovers them with full relative accuracy.
    om = phi * (m * w)[None, :]
    acum = np.cumsum(om * s[None, :], axis=1)
    above = np.zeros_like(om)
    above[:, :-1] = np.cumsum((om * sc[None, :])[:, :0:-1], axis=1)[:, ::-1]
    phi = (sc[None, :] * acum + s[None, :] * above) / (S * theta[:, None])
    # signs: phi_0 > 0, others start positive at the left end
    sgn = np.sign(phi[:, 0])
    sgn[sgn == 0] = 1.0
    phi *= sgn[:, None]
    if np.any(phi[0] <= 0):
        raise DiscretizationError("ground state changes sign on the grid")
    # the operator int G f m inverts -(2/k) L, hence the k/2 factor
    lam = (k / 2.0) / theta
    coeffs = phi @ (m * w)
    return SpectralSystem(kp, x, w, m, s, S, lam, theta, phi, coeffs)


# ---------------------------------------------------------------- series

def _check_T(T):
    if np.any(np.asarray(T) <= 0.5):
        raise SeriesDomainError("eigen-series used only for T > 0.5; use Monte Carlo below")


def survival_probability(sys: SpectralSystem, x, T):
    """P_x(tau > T) = sum_i c_i phi_i(x) exp(-lambda_i T)."""
    if np.ndim(T):
        return np.array([survival_probability(sys, x, t) for t in np.asarray(T, float)])
    _check_T(T)
    n = sys.n_series
    wt = sys.coeffs[:n] * np.exp(-sys.eigenvalues[:n] * T)
    out = np.clip(sys.combination(x, wt), 0.0, 1.0)
    return out if np.ndim(x) else float(out[0])


def window_probability(sys: SpectralSystem, x, T, c):
    """P_x(T < tau <= T + c)."""
    if np.ndim(T):
        return np.array([window_probability(sys, x, t, c) for t in np.asarray(T, float)])
    _check_T(T)
    n = sys.n_series
    lam = sys.eigenvalues[:n]
    wt = sys.coeffs[:n] * np.exp(-lam * T) * (-np.expm1(-lam * c))
    out = np.clip(sys.combination(x, wt), 0.0, 1.0)
    return out if np.ndim(x) else float(out[0])


def _window_weights(sys, u, c):
    # scaled by exp(lambda_0 u) so large u cannot underflow
    n = sys.n_series
    lam = sys.eigenvalues[:n]
    return sys.coeffs[:n] * np.exp(-(lam - lam[0]) * u) * (-np.expm1(-lam * c))


def error_term(sys: SpectralSystem, x, time_to_T, c):
    """grad log P_x(window) - grad log phi_0 at remaining time u = time_to_T."""
    if time_to_T < 0.5:
        raise SeriesDomainError("time_to_T must be at least 0.5")
    g, den = sys.log_gradient(x, _window_weights(sys, time_to_T, c))
    if np.any(den <= 0) and np.any(np.asarray(x) > sys.x[0]) and np.any(np.asarray(x) < sys.x[-1]):
        bad = (den <= 0) & (np.atleast_1d(x) > sys.x[0]) & (np.atleast_1d(x) < sys.x[-1])
        if np.any(bad):
            raise FloatingPointError("window probability underflow")
    g0, _ = sys.log_gradient(x, np.array([1.0]))
    out = np.where(den > 0, g - g0, 0.0)
    return out if np.ndim(x) else float(out[0])


def conditioned_drift(sys: SpectralSystem, x, time_to_T, c):
    """Drift correction k * d/dx log P_x(window), added to ((k-4)/2) cot(x/2)."""
    if time_to_T < 0.5:
        raise SeriesDomainError("time_to_T must be at least 0.5")
    g, den = sys.log_gradient(x, _window_weights(sys, time_to_T, c))
    out = sys.kappa.kappa * g
    return out if np.ndim(x) else float(out[0])


def everlasting_drift(x):
    """Drift of the process conditioned never to exit: 2 cot(x/2)."""
    return 2.0 / np.tan(np.asarray(x, float) / 2.0)


def error_table(sys: SpectralSystem, c: float, u_values, nx: int = 2049):
    """E(x, u) on a uniform x grid (endpoints included, set to 0)."""
    xg = np.linspace(0.0, TWO_PI, nx)
    tab = np.zeros((len(u_values), nx))
    inner = xg[1:-1]
    g0, _ = sys.log_gradient(inner, np.array([1.0]))
    for r, u in enumerate(u_values):
        g, den = sys.log_gradient(inner, _window_weights(sys, u, c))
        tab[r, 1:-1] = np.where(den > 0, g - g0, 0.0)
    return xg, tab


# ---------------------------------------------------------------- cache

def save_cache(sys: SpectralSystem, path) -> None:
    K, M = sys.phi.shape
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IdII", CACHE_VERSION, sys.kappa.kappa, M, K))
        fh.write(struct.pack("<d", sys.s_total))
        for arr in (sys.x, sys.w, sys.m, sys.s, sys.eigenvalues, sys.theta, sys.phi, sys.coeffs):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_cache(path, kappa=None, M=None) -> SpectralSystem:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != _MAGIC:
        raise ValueError("not a spectral cache file")
    version, k, m_nodes, K = struct.unpack_from("<IdII", data, 8)
    if version != CACHE_VERSION:
        raise ValueError(f"cache version {version} != {CACHE_VERSION}")
    if kappa is not None and k != float(kappa) or M is not None and m_nodes != M:
        raise ValueError("cache key mismatch")
    off = 8 + struct.calcsize("<IdII")
    (S,) = struct.unpack_from("<d", data, off)
    off += 8

    def take(n):
        nonlocal off
        a = np.frombuffer(data, dtype="<f8", count=n, offset=off).astype(float)
        off += 8 * n
        return a

    x, w, mm, s = (take(m_nodes) for _ in range(4))
    lam, theta = take(K), take(K)
    phi = take(K * m_nodes).reshape(K, m_nodes)
    coeffs = take(K)
    return SpectralSystem(KappaParams(k), x, w, mm, s, S, lam, theta, phi, coeffs)


def cached_eigen_solve(kappa, M=2000, cache_dir=None) -> SpectralSystem:
    if cache_dir is None:
        return eigen_solve(kappa, M)
    import os
    os.makedirs(cache_dir, exist_ok=True)
    path = os.path.join(cache_dir, f"spectral_k{float(kappa)!r}_M{M}.bin")
    if os.path.exists(path):
        try:
            return load_cache(path, kappa, M)
        except ValueError:
            pass
    sys = eigen_solve(kappa, M)
    save_cache(sys, path)
    return sys
