"""The angle diffusion d(alpha) = sqrt(k) dB + ((k-4)/2) cot(alpha/2) ds on (0, 2pi).

alpha_s is twice the argument of g_t(z0) - zeta_t in the capacity-to-log-CR
time change.  Exit from (0, 2pi) happens exactly when the conformal radius has
been driven to zero, and the winding of z0 is W = int_0^tau cot(alpha_s/2) ds.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np

from .core import KappaParams, _kappa, as_generator
from . import spectral

TWO_PI = 2.0 * math.pi


class PathTimeout(RuntimeError):
    def __init__(self, msg, path=None):
        super().__init__(msg)
        self.path = path


class AcceptanceError(RuntimeError):
    """Rejection sampling would need astronomically many attempts."""


class InsufficientSamples(RuntimeError):
    pass


@dataclass(frozen=True)
class DiffusionConfig:
    kappa: KappaParams
    dt_base: float = 1e-3
    adapt_coeff: float = 0.1
    alpha_floor: float = 1e-6
    record_trace: bool = False
    return_tol: float = 1e-7

    def __post_init__(self):
        object.__setattr__(self, "kappa", _kappa(self.kappa))
        if not (0 < self.dt_base <= 1e-2):
            raise ValueError("dt_base must lie in (0, 1e-2]")
        if not (0 < self.alpha_floor <= 1e-4):
            raise ValueError("alpha_floor must lie in (0, 1e-4]")
        if self.adapt_coeff <= 0:
            raise ValueError("adapt_coeff must be positive")

    @property
    def absorb_level(self) -> float:
        """Distance to the boundary at which a path counts as exited.

        For k > 4 the boundary repels, so a path at distance a comes back to
        O(1) distance with probability about a^(8/k - 1).  We absorb only once
        that chance is below return_tol; for k <= 4 it is alpha_floor.
        """
        k = self.kappa.kappa
        expo = 8.0 / k - 1.0
        return min(self.alpha_floor, 0.5 * self.return_tol ** (1.0 / expo))


@dataclass
class DiffusionPath:
    alpha0: float
    tau: float
    winding: float
    exit_side: str
    trace: tuple | None = None
    attempts: int = 1


@dataclass(frozen=True)
class ConditioningWindow:
    """Exit-time window (T, T + c], equivalent to CR in [eps, C eps]."""

    T: float
    c: float
    cr0: float = 1.0
    epsilon: float = field(default=None)
    C: float = field(default=None)

    def __post_init__(self):
        if self.T < 0 or self.c <= 0 or self.cr0 <= 0:
            raise ValueError("window needs T >= 0, c > 0, cr0 > 0")
        if self.C is None:
            object.__setattr__(self, "C", math.exp(self.c) if self.c < 700 else math.inf)
        if self.epsilon is None:
            object.__setattr__(self, "epsilon", self.cr0 * math.exp(-self.T) / self.C)

    @classmethod
    def from_cr(cls, cr0: float, epsilon: float, C: float) -> ConditioningWindow:
        if C <= 1 or epsilon <= 0:
            raise ValueError("need C > 1 and epsilon > 0")
        T = math.log(cr0) + math.log(1.0 / epsilon) - math.log(C)
        return cls(T, math.log(C), cr0, epsilon, C)

    def contains_tau(self, tau) -> np.ndarray:
        tau = np.asarray(tau)
        return (tau > self.T) & (tau <= self.T + self.c)

    def cr_at(self, tau):
        return self.cr0 * np.exp(-np.asarray(tau))

    def contains_cr(self, cr) -> np.ndarray:
        return self.contains_tau(math.log(self.cr0) - np.log(np.asarray(cr)))


# ---------------------------------------------------------------- kernels
#
# Each step is Euler-Maruyama for rho = log d, d = distance to the nearer
# endpoint, on the clock d(sigma) = k ds / d^2.  On that clock the singular
# Bessel-like part of the motion is a Brownian motion with constant drift,
# so steps of relative size sqrt(beta) stay accurate right up to the boundary.
# The step is dsigma = min(beta, k dt_base / d^2), so ds = min(beta d^2 / k, dt_base);
# deep inside the boundary layer beta is allowed to grow (see _sigma_step).
# Elapsed time and winding are integrated by the trapezoid rule in sigma.

@numba.njit(cache=True, inline="always")
def _cot_w(d, sg, floor):
    """cot(alpha/2) for alpha = d (sg=1) or 2pi - d (sg=-1), frozen below floor."""
    return sg / math.tan(0.5 * max(d, floor))


@numba.njit(cache=True, inline="always")
def _split(a):
    if a <= math.pi:
        return a, 1.0
    return TWO_PI - a, -1.0


@numba.njit(cache=True, inline="always")
def _join(d, sg):
    return d if sg > 0 else TWO_PI - d


@numba.njit(cache=True, inline="always")
def _log_step(d, sg, mu, z, dsig):
    """rho = log d moves by sqrt(dsig) z + mu dsig; crossing pi switches side."""
    d2 = d * math.exp(math.sqrt(dsig) * z + mu * dsig)
    if d2 > math.pi:
        d2 = max(TWO_PI - d2, 1e-300)
        return d2, -sg
    return d2, sg


@numba.njit(cache=True, inline="always")
def _sigma_step(d, beta):
    # Below d = 0.01 the drift of log d is constant up to O(d^2), so the log
    # step is essentially exact and the sigma step may grow (capped at 2).
    if d >= 0.01:
        return beta
    return min(beta * 0.01 / d, 2.0)


@numba.njit(cache=True, inline="always")
def _free_step(d, sg, ct, z, rem, kappa, dt_base, beta, floor, cflo):
    """One unconditioned step.  Returns (d2, sg2, ct2, ds, dW, last)."""
    if rem <= 0.0:
        # the trapezoid time of the previous step overshot t_stop
        return d, sg, ct, 0.0, 0.0, True
    dsig = min(_sigma_step(d, beta), kappa * dt_base / (d * d))
    last = False
    if d * d * dsig / kappa >= rem:
        dsig = kappa * rem / (d * d)
        last = True
    # drift of log d on the sigma clock: ((k-4)/2k) d cot(d/2) - 1/2
    mu = 0.5 * (kappa - 4.0) / kappa * d * ct - 0.5
    d2, sg2 = _log_step(d, sg, mu, sg * z, dsig)
    ct2 = 1.0 / math.tan(0.5 * d2)
    f1 = d * d / kappa
    f2 = d2 * d2 / kappa
    w1 = ct if d >= floor else cflo
    w2 = ct2 if d2 >= floor else cflo
    return d2, sg2, ct2, 0.5 * (f1 + f2) * dsig, 0.5 * (sg * w1 * f1 + sg2 * w2 * f2) * dsig, last


@numba.njit(cache=True)
def _advance_free(rng, d, sg, s, W, kappa, dt_base, beta, floor, absorb, t_stop, sign):
    """Unconditioned steps from state (d, side) until exit or s = t_stop.

    Returns (d, side, s, W, status); status 0 still inside at t_stop,
    1 exit at 0, 2 exit at 2pi.
    """
    lab = math.log(absorb)
    cflo = 1.0 / math.tan(0.5 * floor)
    ct = 1.0 / math.tan(0.5 * d)
    while True:
        z = sign * rng.standard_normal()
        d2, sg2, ct2, ds, dW, last = _free_step(d, sg, ct, z, t_stop - s, kappa, dt_base,
                                                beta, floor, cflo)
        if d2 <= absorb:
            f = (math.log(d) - lab) / (math.log(d) - math.log(d2))
            return absorb, sg2, s + f * ds, W + f * dW, 1 if sg2 > 0 else 2
        d, sg, ct = d2, sg2, ct2
        W += dW
        if last:
            return d, sg, t_stop, W, 0
        s += ds


_LANES = 8


@numba.njit(cache=True)
def _exit_batch(rng, n, alpha0, kappa, dt_base, beta, floor, absorb, t_stop, sign,
                tau, wind, status):
    """Independent paths advanced in interleaved lanes.

    Interleaving breaks the serial dependency of one path's steps; the
    lane schedule is deterministic, so results depend only on the stream.
    """
    d0, sg0 = _split(alpha0)
    ct0 = 1.0 / math.tan(0.5 * d0)
    lab = math.log(absorb)
    cflo = 1.0 / math.tan(0.5 * floor)
    L = _LANES
    idx = np.full(L, -1)
    d = np.empty(L)
    sg = np.empty(L)
    ct = np.empty(L)
    s = np.zeros(L)
    W = np.zeros(L)
    nxt = 0
    for j in range(L):
        if nxt < n:
            idx[j] = nxt
            d[j], sg[j], ct[j], s[j], W[j] = d0, sg0, ct0, 0.0, 0.0
            nxt += 1
    active = min(L, n)
    while active > 0:
        for j in range(L):
            i = idx[j]
            if i < 0:
                continue
            z = sign * rng.standard_normal()
            d2, sg2, ct2, ds, dW, last = _free_step(d[j], sg[j], ct[j], z, t_stop - s[j],
                                                    kappa, dt_base, beta, floor, cflo)
            done = False
            if d2 <= absorb:
                f = (math.log(d[j]) - lab) / (math.log(d[j]) - math.log(d2))
                tau[i] = s[j] + f * ds
                wind[i] = W[j] + f * dW
                status[i] = 1 if sg2 > 0 else 2
                done = True
            elif last:
                tau[i] = t_stop
                wind[i] = W[j] + dW
                status[i] = 0
                done = True
            else:
                d[j], sg[j], ct[j] = d2, sg2, ct2
                s[j] += ds
                W[j] += dW
            if done:
                if nxt < n:
                    idx[j] = nxt
                    d[j], sg[j], ct[j], s[j], W[j] = d0, sg0, ct0, 0.0, 0.0
                    nxt += 1
                else:
                    idx[j] = -1
                    active -= 1


@numba.njit(cache=True)
def _exit_trace(rng, alpha0, kappa, dt_base, beta, floor, absorb, t_stop, sign):
    cap = 4096
    ss = np.empty(cap)
    aa = np.empty(cap)
    ss[0] = 0.0
    aa[0] = alpha0
    k = 1
    d, sg = _split(alpha0)
    s, W = 0.0, 0.0
    st = 0
    while True:
        # stop after each natural step so the trace sees every state
        h = min(dt_base, beta * d * d / kappa)
        stop = min(s + 1.000001 * h, t_stop)
        d, sg, s, W, st = _advance_free(rng, d, sg, s, W, kappa, dt_base, beta, floor,
                                        absorb, stop, sign)
        if k == cap:
            cap *= 2
            ss2 = np.empty(cap)
            aa2 = np.empty(cap)
            ss2[:k] = ss[:k]
            aa2[:k] = aa[:k]
            ss, aa = ss2, aa2
        ss[k] = s
        aa[k] = _join(d, sg)
        k += 1
        if st != 0 or s >= t_stop:
            break
    return s, W, st, ss[:k], aa[:k]


@numba.njit(cache=True)
def _rejection_batch(rng, n, alpha0, kappa, dt_base, beta, floor, absorb, T, c,
                     max_attempts, tau, wind, attempts):
    """Fill n accepted paths (tau in (T, T+c]); returns the number filled."""
    d0, sg0 = _split(alpha0)
    ct0 = 1.0 / math.tan(0.5 * d0)
    cflo = 1.0 / math.tan(0.5 * floor)
    t_stop = T + c
    L = _LANES
    busy = np.zeros(L, np.bool_)
    d = np.empty(L)
    sg = np.empty(L)
    ct = np.empty(L)
    s = np.zeros(L)
    W = np.zeros(L)
    total = 0
    got = 0
    since = 0
    for j in range(L):
        busy[j] = True
        d[j], sg[j], ct[j], s[j], W[j] = d0, sg0, ct0, 0.0, 0.0
        total += 1
    while got < n:
        for j in range(L):
            if not busy[j]:
                continue
            z = rng.standard_normal()
            d2, sg2, ct2, ds, dW, last = _free_step(d[j], sg[j], ct[j], z, t_stop - s[j],
                                                    kappa, dt_base, beta, floor, cflo)
            finished = False
            if d2 <= absorb:
                f = (math.log(d[j]) - math.log(absorb)) / (math.log(d[j]) - math.log(d2))
                te = s[j] + f * ds
                finished = True
                since += 1
                if te > T and got < n:
                    tau[got] = te
                    wind[got] = W[j] + f * dW
                    attempts[got] = since
                    since = 0
                    got += 1
            elif last:
                finished = True
                since += 1
            else:
                d[j], sg[j], ct[j] = d2, sg2, ct2
                s[j] += ds
                W[j] += dW
            if finished:
                if got >= n or total >= max_attempts:
                    busy[j] = False
                else:
                    d[j], sg[j], ct[j], s[j], W[j] = d0, sg0, ct0, 0.0, 0.0
                    total += 1
        if total >= max_attempts:
            anyb = False
            for j in range(L):
                anyb = anyb or busy[j]
            if not anyb:
                break
    return got


@numba.njit(cache=True)
def _table_lookup(tab, hx, u0, du, a, u):
    nu, nx = tab.shape
    fx = a / hx
    ix = int(fx)
    if ix < 0:
        ix = 0
    if ix > nx - 2:
        ix = nx - 2
    tx = fx - ix
    fu = (u - u0) / du
    iu = int(fu)
    if iu < 0:
        iu = 0
        tu = 0.0
    elif iu > nu - 2:
        iu = nu - 2
        tu = 1.0
    else:
        tu = fu - iu
    e0 = tab[iu, ix] * (1 - tx) + tab[iu, ix + 1] * tx
    e1 = tab[iu + 1, ix] * (1 - tx) + tab[iu + 1, ix + 1] * tx
    return e0 * (1 - tu) + e1 * tu


@numba.njit(cache=True)
def _htransform_batch(rng, n, alpha0, kappa, dt_base, beta, floor, absorb, T, c, u_sw,
                      tab, hx, u0, du, max_attempts, tau, wind, attempts, clamps):
    """Doob-transformed phase on [0, T - u_sw], then exact rejection from there.

    The transformed drift is 2 cot(a/2) + k E(a, T - s); by the Markov
    property the final stretch can be sampled exactly by restarting
    unconditioned attempts from the state reached at T - u_sw.
    """
    s_sw = T - u_sw
    d0, sg0 = _split(alpha0)
    for i in range(n):
        d, sg = d0, sg0
        s = 0.0
        W = 0.0
        while s < s_sw:
            dsig = min(_sigma_step(d, beta), kappa * dt_base / (d * d))
            rem = s_sw - s
            last = False
            if d * d * dsig / kappa >= rem:
                dsig = kappa * rem / (d * d)
                last = True
            E = _table_lookup(tab, hx, u0, du, _join(d, sg), T - s)
            mu = 2.0 * d / (kappa * math.tan(0.5 * d)) + sg * E * d - 0.5
            d2, sg2 = _log_step(d, sg, mu, sg * rng.standard_normal(), dsig)
            if d2 < 1e-300:
                clamps[i] += 1
                d2 = 1e-300
            f1 = d * d / kappa
            f2 = d2 * d2 / kappa
            W += 0.5 * (_cot_w(d, sg, floor) * f1 + _cot_w(d2, sg2, floor) * f2) * dsig
            d, sg = d2, sg2
            if last:
                s = s_sw
            else:
                s += 0.5 * (f1 + f2) * dsig
        k = 0
        while True:
            k += 1
            d3, sg3, s2, W2, st = _advance_free(rng, d, sg, 0.0, 0.0, kappa, dt_base, beta,
                                                floor, absorb, u_sw + c, 1.0)
            if st != 0 and s2 > u_sw:
                tau[i] = s_sw + s2
                wind[i] = W + W2
                attempts[i] = k
                break
            if k >= max_attempts:
                tau[i] = np.nan
                wind[i] = np.nan
                attempts[i] = k
                break


# ---------------------------------------------------------------- samplers

def _params(config: DiffusionConfig):
    return (config.kappa.kappa, config.dt_base, config.adapt_coeff, config.alpha_floor,
            config.absorb_level)


def _check_alpha(alpha0):
    if not (0.0 < alpha0 < TWO_PI):
        raise ValueError("alpha0 must lie in (0, 2pi)")


def simulate_exit(rng, alpha0: float, config: DiffusionConfig, t_max: float = 1e4,
                  antithetic: bool = False) -> DiffusionPath:
    _check_alpha(alpha0)
    gen = as_generator(rng)
    k, dt, beta, floor, absorb = _params(config)
    sign = -1.0 if antithetic else 1.0
    if config.record_trace:
        s, W, st, ss, aa = _exit_trace(gen, alpha0, k, dt, beta, floor, absorb, t_max, sign)
        trace = (ss, aa)
    else:
        tau, wind, status = np.empty(1), np.empty(1), np.empty(1, np.int64)
        _exit_batch(gen, 1, alpha0, k, dt, beta, floor, absorb, t_max, sign, tau, wind, status)
        s, W, st, trace = tau[0], wind[0], status[0], None
    side = {0: "none", 1: "lower", 2: "upper"}[int(st)]
    path = DiffusionPath(alpha0, float(s), float(W), side, trace)
    if st == 0:
        raise PathTimeout(f"path still inside at t_max={t_max}", path)
    return path


def simulate_exit_batch(rng, alpha0: float, config: DiffusionConfig, n: int,
                        t_stop: float = 1e4, antithetic: bool = False):
    """n independent paths, stopped at t_stop if still inside.

    Returns (tau, winding, status); status 0 marks a censored path.
    """
    _check_alpha(alpha0)
    gen = as_generator(rng)
    k, dt, beta, floor, absorb = _params(config)
    tau, wind, status = np.empty(n), np.empty(n), np.empty(n, np.int64)
    _exit_batch(gen, n, alpha0, k, dt, beta, floor, absorb, t_stop,
                -1.0 if antithetic else 1.0, tau, wind, status)
    return tau, wind, status


def survival_frequency(rng, alpha0, config, n, T_values):
    """Monte Carlo P(tau > T) for each T, with standard errors."""
    T_values = np.atleast_1d(np.asarray(T_values, float))
    tau, _, status = simulate_exit_batch(rng, alpha0, config, n, t_stop=float(T_values.max()) + 1e-9)
    alive = status[None, :] == 0
    surv = np.where(alive, np.inf, tau[None, :]) > T_values[:, None]
    p = surv.mean(axis=1)
    return p, np.sqrt(p * (1 - p) / n)


def simulate_conditioned_rejection(rng, alpha0: float, config: DiffusionConfig,
                                   window: ConditioningWindow, n: int = 1,
                                   max_attempts: int = 10**9,
                                   acceptance_estimate: float | None = None):
    """Unconditioned paths kept only when tau lands in the window.

    Returns (tau, winding, attempts_per_accepted).
    """
    _check_alpha(alpha0)
    if acceptance_estimate is not None and acceptance_estimate < 1e-6:
        raise AcceptanceError("acceptance below 1e-6; use simulate_conditioned_htransform")
    gen = as_generator(rng)
    k, dt, beta, floor, absorb = _params(config)
    tau, wind, att = np.empty(n), np.empty(n), np.zeros(n, np.int64)
    got = _rejection_batch(gen, n, alpha0, k, dt, beta, floor, absorb, window.T,
                           window.c, max_attempts, tau, wind, att)
    if got < n:
        raise AcceptanceError(f"only {got} of {n} accepted within {max_attempts} attempts")
    return tau, wind, att


@dataclass
class HTransformSampler:
    """Precomputed error-term table for one (spectral system, window)."""

    spectral: spectral.SpectralSystem
    window: ConditioningWindow
    u_switch: float = 1.0
    du: float = 0.02
    nx: int = 2049

    def __post_init__(self):
        T = self.window.T
        hi = max(T, self.u_switch + self.du)
        nu = int(math.ceil((hi - self.u_switch) / self.du)) + 1
        self.u = self.u_switch + self.du * np.arange(nu)
        xg, self.table = spectral.error_table(self.spectral, self.window.c, self.u, self.nx)
        self.hx = xg[1] - xg[0]

    def sample(self, rng, alpha0, config: DiffusionConfig, n: int, max_attempts: int = 10**6):
        _check_alpha(alpha0)
        if config.kappa.kappa != self.spectral.kappa.kappa:
            raise ValueError("spectral system built for a different kappa")
        if self.spectral.M < 2000:
            raise ValueError("spectral system needs at least 2000 grid nodes")
        gen = as_generator(rng)
        k, dt, beta, floor, absorb = _params(config)
        w = self.window
        tau, wind = np.empty(n), np.empty(n)
        att, clamps = np.zeros(n, np.int64), np.zeros(n, np.int64)
        if w.T <= self.u_switch:
            got = _rejection_batch(gen, n, alpha0, k, dt, beta, floor, absorb, w.T, w.c,
                                   max_attempts * n, tau, wind, att)
            if got < n:
                raise AcceptanceError("rejection phase failed")
        else:
            _htransform_batch(gen, n, alpha0, k, dt, beta, floor, absorb, w.T, w.c,
                              self.u_switch, self.table, self.hx, self.u[0], self.du,
                              max_attempts, tau, wind, att, clamps)
        return tau, wind, att, clamps


def simulate_conditioned_htransform(rng, alpha0, config, window, spectral_system, n=1):
    """Paths of the window-conditioned diffusion via the Doob transform.

    Returns (tau, winding, attempts, clamps).  Clamps count steps where the
    conditioned path came within 1e-300 of an endpoint and was held there.
    """
    return HTransformSampler(spectral_system, window).sample(rng, alpha0, config, n)


# ---------------------------------------------------------------- moments

@dataclass
class MomentEstimate:
    lam: float
    estimate: float
    stderr: float
    var_w: float
    mean_w: float
    n: int

    def __iter__(self):
        return iter((self.estimate, self.stderr))

    @property
    def log_estimate(self) -> float:
        return math.log(self.estimate)

    @property
    def log_stderr(self) -> float:
        return self.stderr / self.estimate


def moments_from_windings(W, lams, symmetrize=False) -> list[MomentEstimate]:
    """Sample means of exp(lam W).

    symmetrize averages exp(lam W) and exp(-lam W), i.e. uses cosh(lam W).
    This has the same mean whenever W is symmetric in law, which holds
    for paths started at alpha0 = pi.
    """
    W = np.asarray(W, float)
    W = W[np.isfinite(W)]
    n = len(W)
    if n < 100:
        raise InsufficientSamples(f"only {n} conditioned paths")
    out = []
    for lam in np.atleast_1d(lams):
        e = np.cosh(lam * W) if symmetrize else np.exp(lam * W)
        out.append(MomentEstimate(float(lam), float(e.mean()), float(e.std(ddof=1) / math.sqrt(n)),
                                  float(W.var(ddof=1)), float(W.mean()), n))
    return out


def conditioned_windings(rng, kappa, window, n_paths, alpha0=math.pi, sampler="auto",
                         config=None, spectral_system=None):
    config = config or DiffusionConfig(kappa)
    if sampler == "auto":
        sys_ = spectral_system or spectral.eigen_solve(config.kappa, 2000)
        acc = spectral.window_probability(sys_, alpha0, window.T, window.c) if window.T > 0.5 else 1.0
        sampler = "rejection" if acc >= 1e-2 else "htransform"
        spectral_system = sys_
    if sampler == "rejection":
        return simulate_conditioned_rejection(rng, alpha0, config, window, n_paths)[1]
    if sampler == "htransform":
        sys_ = spectral_system or spectral.eigen_solve(config.kappa, 2000)
        return simulate_conditioned_htransform(rng, alpha0, config, window, sys_, n_paths)[1]
    raise ValueError(f"unknown sampler {sampler!r}")


def winding_moment(rng, kappa, lam, window, n_paths, alpha0=math.pi, sampler="auto",
                   config=None, spectral_system=None, lam_max=2.0,
                   symmetrize="auto") -> MomentEstimate:
    """Estimate E[exp(lam W) | tau in window] with its standard error.

    symmetrize="auto" switches to the cosh estimator when alpha0 = pi.
    """
    if abs(lam) > lam_max:
        raise ValueError(f"|lambda| must be at most {lam_max}")
    if n_paths < 1000:
        raise ValueError("n_paths must be at least 1000")
    W = conditioned_windings(rng, kappa, window, n_paths, alpha0, sampler, config, spectral_system)
    if symmetrize == "auto":
        symmetrize = alpha0 == math.pi
    return moments_from_windings(W, [lam], bool(symmetrize))[0]
