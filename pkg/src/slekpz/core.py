"""Model parameters, KPZ-type calculators, dyadic squares and random streams."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class DomainError(ValueError):
    """An argument lies outside the domain of a formula."""


class InfeasibleError(ValueError):
    """A quadratic relation has no admissible root."""


@dataclass(frozen=True)
class KappaParams:
    kappa: float
    chi: float = field(init=False)
    boundary_height: float = field(init=False)
    sle_dim: float = field(init=False)
    lambda0: float = field(init=False)
    speed_exponent: float = field(init=False)

    def __post_init__(self):
        k = float(self.kappa)
        if not (0.0 < k < 8.0) or math.isnan(k):
            raise DomainError(f"kappa must lie in (0, 8), got {self.kappa}")
        object.__setattr__(self, "kappa", k)
        for name, value in derived_kappa_constants(k).items():
            object.__setattr__(self, name, value)


def derived_kappa_constants(kappa: float) -> dict:
    r = math.sqrt(kappa)
    return {
        "chi": 2.0 / r - r / 2.0,
        "boundary_height": math.pi / r,
        "sle_dim": 1.0 + kappa / 8.0,
        "lambda0": 1.0 - kappa / 8.0,
        "speed_exponent": 2.0 - 8.0 / kappa,
    }


@dataclass(frozen=True)
class GammaParams:
    gamma: float
    gamma_sq_half: float = field(init=False)

    def __post_init__(self):
        g = float(self.gamma)
        if not (0.0 <= g < 2.0) or math.isnan(g):
            raise DomainError(f"gamma must lie in [0, 2), got {self.gamma}")
        object.__setattr__(self, "gamma", g)
        object.__setattr__(self, "gamma_sq_half", g * g / 2.0)


def _gamma(g) -> GammaParams:
    return g if isinstance(g, GammaParams) else GammaParams(g)


def _kappa(k) -> KappaParams:
    return k if isinstance(k, KappaParams) else KappaParams(k)


def _check_unit(name, v, hi=1.0):
    if not (0.0 <= v <= hi) or math.isnan(v):
        raise DomainError(f"{name} must lie in [0, {hi:g}], got {v}")


# d = a q - b q^2 with a = 2 + g^2/2; b = (g^2/2) * factor.  The smaller root
# is written as 2d / (a + sqrt(a^2 - 4bd)), which has no cancellation and
# reduces to d/a when b = 0.
def _concave_forward(q, a, b):
    return a * q - b * q * q


def _concave_inverse(d, a, b):
    disc = a * a - 4.0 * b * d
    if disc < 0.0:
        raise InfeasibleError(f"no real root for d={d}")
    q = 2.0 * d / (a + math.sqrt(disc))
    if q > 1.0 + 1e-12:
        raise InfeasibleError(f"root {q} outside [0, 1]")
    return min(q, 1.0)


def kpz_forward(q: float, gamma) -> float:
    """Euclidean dimension d = (2 + g^2/2) q - (g^2/2) q^2."""
    _check_unit("q", q)
    gh = _gamma(gamma).gamma_sq_half
    return _concave_forward(q, 2.0 + gh, gh)


def kpz_inverse(d: float, gamma) -> float:
    _check_unit("d", d, 2.0)
    gh = _gamma(gamma).gamma_sq_half
    return _concave_inverse(d, 2.0 + gh, gh)


def kpz_ds(delta: float, gamma) -> float:
    """Scaling exponent x = (2 - g^2/2) D + (g^2/2) D^2 of a quantum exponent D."""
    _check_unit("delta", delta)
    gh = _gamma(gamma).gamma_sq_half
    return (2.0 - gh) * delta + gh * delta * delta


def kpz_ds_inverse(x: float, gamma) -> float:
    _check_unit("x", x, 2.0)
    gh = _gamma(gamma).gamma_sq_half
    a = 2.0 - gh
    return min(2.0 * x / (a + math.sqrt(a * a + 4.0 * gh * x)), 1.0)


def flowline_relation(q: float, kappa, gamma) -> float:
    """Modified relation d = (2 + g^2/2) q - (g^2/2)(1 - k/4)^2 q^2."""
    _check_unit("q", q)
    k = _kappa(kappa).kappa
    gh = _gamma(gamma).gamma_sq_half
    return _concave_forward(q, 2.0 + gh, gh * (1.0 - k / 4.0) ** 2)


def flowline_inverse(d: float, kappa, gamma) -> float:
    _check_unit("d", d, 2.0)
    k = _kappa(kappa).kappa
    gh = _gamma(gamma).gamma_sq_half
    return _concave_inverse(d, 2.0 + gh, gh * (1.0 - k / 4.0) ** 2)


# ---------------------------------------------------------------- dyadic grid

@dataclass(frozen=True)
class DyadicSquare:
    """Square [i, i+1) x [j, j+1) scaled by 2^-level."""

    level: int
    i: int
    j: int

    def __post_init__(self):
        if self.level < 0:
            raise DomainError("level must be nonnegative")

    @property
    def side(self) -> float:
        return math.ldexp(1.0, -self.level)

    @property
    def center(self) -> complex:
        s = self.side
        return complex((self.i + 0.5) * s, (self.j + 0.5) * s)

    @property
    def corner(self) -> complex:
        return complex(self.i * self.side, self.j * self.side)

    def children(self) -> list[DyadicSquare]:
        n, i, j = self.level + 1, 2 * self.i, 2 * self.j
        return [DyadicSquare(n, i + a, j + b) for b in (0, 1) for a in (0, 1)]

    def parent(self) -> DyadicSquare:
        return DyadicSquare(self.level - 1, self.i >> 1, self.j >> 1)

    def contains(self, z: complex) -> bool:
        s = self.side
        return self.i * s <= z.real < (self.i + 1) * s and self.j * s <= z.imag < (self.j + 1) * s

    def inside(self, region) -> bool:
        x0, x1, y0, y1 = region
        s = self.side
        return x0 <= self.i * s and (self.i + 1) * s <= x1 and y0 <= self.j * s and (self.j + 1) * s <= y1

    def sample_points(self, m: int) -> np.ndarray:
        """m x m midpoint lattice inside the square."""
        s = self.side
        u = (np.arange(m) + 0.5) / m * s
        xx, yy = np.meshgrid(self.i * s + u, self.j * s + u)
        return (xx + 1j * yy).ravel()


def squares_in_region(region, level: int) -> list[DyadicSquare]:
    x0, x1, y0, y1 = region
    s = math.ldexp(1.0, -level)
    i0, i1 = math.ceil(x0 / s - 1e-9), math.floor(x1 / s + 1e-9)
    j0, j1 = math.ceil(y0 / s - 1e-9), math.floor(y1 / s + 1e-9)
    return [DyadicSquare(level, i, j) for j in range(j0, j1) for i in range(i0, i1)]


def cell_centers(region, level: int):
    """Index arrays and complex centers of the level-n cells tiling region."""
    x0, x1, y0, y1 = region
    s = math.ldexp(1.0, -level)
    ii = np.arange(math.ceil(x0 / s - 1e-9), math.floor(x1 / s + 1e-9))
    jj = np.arange(math.ceil(y0 / s - 1e-9), math.floor(y1 / s + 1e-9))
    I, J = np.meshgrid(ii, jj)
    return I.ravel(), J.ravel(), ((I + 0.5) * s + 1j * (J + 0.5) * s).ravel()


# ---------------------------------------------------------------- randomness

@dataclass(frozen=True)
class RandomStream:
    """A reproducible, independently keyed random stream.

    Streams with different keys come from distinct SeedSequence spawn keys,
    so they are independent by construction.
    """

    seed: int
    stream_id: int | tuple = 0

    @property
    def key(self) -> tuple:
        s = self.stream_id
        return tuple(s) if isinstance(s, tuple) else (int(s),)

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(int(self.seed) & ((1 << 64) - 1), spawn_key=self.key)
        return np.random.Generator(np.random.PCG64(ss))

    def child(self, i: int) -> RandomStream:
        return RandomStream(self.seed, self.key + (int(i),))


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, RandomStream):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    return RandomStream(int(rng)).generator()
