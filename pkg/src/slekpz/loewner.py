"""Chordal Loewner chains in the upper half plane.

Each step of length dt applies the exact map of a vertical slit,
g -> a + sqrt((g - a)^2 + 4 dt), with a the midpoint driving value of the
step.  Points far from the driving value may advance a whole aligned dyadic
block of steps at once.  The block then acts as a single slit with its mean
frame, which is accurate when the block is short compared with |g - zeta|.
"""
from __future__ import annotations

import cmath
import math
from dataclasses import dataclass, field

import numba
import numpy as np

from .core import _kappa, as_generator

TWO_PI = 2.0 * math.pi


class ChainTimeout(RuntimeError):
    pass


# ---------------------------------------------------------------- driving

@dataclass
class DrivingPath:
    dt: float
    values: np.ndarray
    t_max: float
    _frames: np.ndarray = field(default=None, repr=False)
    _prefix: np.ndarray = field(default=None, repr=False)
    _osc: np.ndarray = field(default=None, repr=False)
    _osc_off: np.ndarray = field(default=None, repr=False)

    @property
    def n_steps(self) -> int:
        return len(self.values) - 1

    @property
    def frames(self) -> np.ndarray:
        """Midpoint driving value of each step."""
        if self._frames is None:
            v = self.values
            self._frames = 0.5 * (v[:-1] + v[1:])
        return self._frames

    def block_tables(self):
        """Prefix sums of frames and per-level block oscillations."""
        if self._prefix is None:
            self._prefix = np.concatenate([[0.0], np.cumsum(self.frames)])
            v = self.values
            N = self.n_steps
            parts, offs = [], [0]
            p = 0
            while (1 << p) <= N:
                b = 1 << p
                nb = N >> p
                body = v[: nb * b].reshape(nb, b)
                right = v[b: nb * b + 1: b]
                osc = np.maximum(body.max(1), right) - np.minimum(body.min(1), right)
                parts.append(osc)
                offs.append(offs[-1] + nb)
                p += 1
            self._osc = np.concatenate(parts) if parts else np.zeros(0)
            self._osc_off = np.array(offs, dtype=np.int64)
        return self._prefix, self._osc, self._osc_off


def sample_driving(rng, kappa: float, t_max: float, dt: float) -> DrivingPath:
    """zeta_k = sqrt(kappa) B_{k dt}, zeta_0 = 0."""
    if kappa < 0 or dt <= 0 or t_max <= 0:
        raise ValueError("need kappa >= 0, dt > 0, t_max > 0")
    n = int(round(t_max / dt))
    gen = as_generator(rng)
    inc = gen.standard_normal(n) * math.sqrt(kappa * dt)
    values = np.concatenate([[0.0], np.cumsum(inc)])
    return DrivingPath(dt, values, n * dt)


def zero_driving(t_max: float, dt: float) -> DrivingPath:
    n = int(round(t_max / dt))
    return DrivingPath(dt, np.zeros(n + 1), n * dt)


# ---------------------------------------------------------------- points

@dataclass
class TrackedPoint:
    z0: complex
    g: complex
    log_deriv: complex
    alive: bool
    swallow_time: float | None
    stopped_winding: float
    stopped_cr: float

    @property
    def cr(self) -> float:
        if not self.alive:
            return self.stopped_cr
        return 2.0 * self.g.imag * math.exp(-self.log_deriv.real)

    @property
    def winding(self) -> float:
        return self.log_deriv.imag if self.alive else self.stopped_winding


@dataclass
class TrackedPoints:
    """Struct-of-arrays batch of tracked points."""

    z0: np.ndarray
    g: np.ndarray
    log_deriv: np.ndarray
    alive: np.ndarray
    swallow_time: np.ndarray
    stopped_winding: np.ndarray
    stopped_cr: np.ndarray
    t: float = 0.0

    @classmethod
    def new(cls, z0) -> TrackedPoints:
        z0 = np.atleast_1d(np.asarray(z0, dtype=complex)).ravel()
        if np.any(z0.imag <= 0):
            raise ValueError("points must lie in the upper half plane")
        n = len(z0)
        cr0 = 2.0 * z0.imag
        return cls(z0.copy(), z0.copy(), np.zeros(n, complex), np.ones(n, bool),
                   np.full(n, np.nan), np.zeros(n), cr0)

    def __len__(self):
        return len(self.z0)

    def __getitem__(self, i) -> TrackedPoint:
        st = self.swallow_time[i]
        return TrackedPoint(complex(self.z0[i]), complex(self.g[i]), complex(self.log_deriv[i]),
                            bool(self.alive[i]), None if np.isnan(st) else float(st),
                            float(self.stopped_winding[i]), float(self.stopped_cr[i]))

    @property
    def cr(self) -> np.ndarray:
        live = 2.0 * self.g.imag * np.exp(-self.log_deriv.real)
        return np.where(self.alive, live, self.stopped_cr)

    @property
    def winding(self) -> np.ndarray:
        return np.where(self.alive, self.log_deriv.imag, self.stopped_winding)

    def copy(self) -> TrackedPoints:
        return TrackedPoints(self.z0.copy(), self.g.copy(), self.log_deriv.copy(), self.alive.copy(),
                             self.swallow_time.copy(), self.stopped_winding.copy(),
                             self.stopped_cr.copy(), self.t)


# ---------------------------------------------------------------- kernels

@numba.njit(cache=True, inline="always")
def _slit(u, h):
    """sqrt(u^2 + 4h) on the branch with nonnegative imaginary part."""
    r = cmath.sqrt(u * u + 4.0 * h)
    if r.imag < 0.0 or (r.imag == 0.0 and (r.real > 0.0) != (u.real > 0.0)):
        r = -r
    return r


@numba.njit(cache=True, inline="always")
def _slit_inv(w, h):
    """Inverse slit map sqrt(w^2 - 4h), branch with Im >= 0 and sign of Re w on the line."""
    r = cmath.sqrt(w * w - 4.0 * h)
    if r.imag < 0.0 or (r.imag == 0.0 and (r.real > 0.0) != (w.real > 0.0)):
        r = -r
    return r


@numba.njit(cache=True, inline="always")
def _choose_block(j, N, u_abs2, dt, eta, osc, osc_off, pmax):
    """Largest aligned block starting at step j that is short relative to |u|."""
    if eta <= 0.0:
        return 0
    p = pmax
    while p > 0:
        b = 1 << p
        if (j & (b - 1)) == 0 and j + b <= N:
            if 4.0 * b * dt <= eta * eta * u_abs2:
                o = osc[osc_off[p] + (j >> p)]
                if o * o <= eta * eta * u_abs2:
                    return p
        p -= 1
    return 0


@numba.njit(cache=True)
def _evolve_kernel(g, L, alive, swallow_t, stop_w, stop_cr, values, prefix, osc, osc_off,
                   dt, t0, eta, swallow_eps):
    N = len(values) - 1
    pmax = len(osc_off) - 2
    for i in range(len(g)):
        if not alive[i]:
            continue
        gi = g[i]
        Li = L[i]
        j = 0
        while j < N:
            u0 = gi - values[j]
            p = _choose_block(j, N, u0.real * u0.real + u0.imag * u0.imag, dt, eta, osc, osc_off, pmax)
            b = 1 << p
            a = (prefix[j + b] - prefix[j]) / b
            u = gi - a
            u2 = _slit(u, b * dt)
            g2 = a + u2
            if g2.imag <= swallow_eps or u2 == 0:
                alive[i] = False
                swallow_t[i] = t0 + j * dt
                stop_w[i] = Li.imag
                stop_cr[i] = 2.0 * gi.imag * math.exp(-Li.real)
                break
            Li += cmath.log(u / u2)
            gi = g2
            j += b
        g[i] = gi
        L[i] = Li


@numba.njit(cache=True)
def _tips_kernel(us, values, prefix, osc, osc_off, dt, eta, out):
    """Trace points gamma(u dt) by backward composition of inverse slit maps.

    u is a real step index; for K - 1 < u <= K the point lies on the slit
    grown during step K, at height 2 sqrt((u - K + 1) dt) before mapping back.
    """
    N = len(values) - 1
    pmax = len(osc_off) - 2
    for n in range(len(us)):
        u = us[n]
        if u <= 0.0:
            out[n] = 0.0
            continue
        K = min(int(math.ceil(u)), N)
        frac = min(u - (K - 1), 1.0)
        a = prefix[K] - prefix[K - 1]
        w = complex(a, 0.0)
        j = K
        # the first inverse step sends the frame to the (partial) slit top
        w = a + _slit_inv(w - a, frac * dt)
        j -= 1
        while j > 0:
            u0 = w - values[j]
            ua2 = u0.real * u0.real + u0.imag * u0.imag
            # blocks [j - b, j) aligned so that (j - b) is a multiple of b
            p = 0
            if eta > 0.0:
                p = pmax
                while p > 0:
                    b = 1 << p
                    if (j & (b - 1)) == 0 and j - b >= 0 and 4.0 * b * dt <= eta * eta * ua2:
                        o = osc[osc_off[p] + ((j - b) >> p)]
                        if o * o <= eta * eta * ua2:
                            break
                    p -= 1
            b = 1 << p
            a = (prefix[j] - prefix[j - b]) / b
            w = a + _slit_inv(w - a, b * dt)
            j -= b
        out[n] = w


@numba.njit(cache=True)
def _chain_adaptive(rng, z0, kappa, step_eps, t_max, mode, level, alpha_stop, record,
                    rec_t, rec_z):
    """One chain tracking z0 with steps dt = step_eps |g - zeta|^2 / kappa.

    mode 0: run until the angle 2 arg(g - zeta) leaves (alpha_stop, 2pi - alpha_stop)
            or log CR drops below `level`.
    mode 1: run until log CR first drops below `level` (stop exactly there).
    Returns (status, winding, log_cr, t, n_steps).  status: 1 exited (mode 0)
    or level reached (mode 1); 2 dropped below level (mode 0) or exited
    first (mode 1); 0 timeout.
    """
    g = z0
    L = 0.0j
    zeta = 0.0
    t = 0.0
    lcr0 = math.log(2.0 * z0.imag)
    lcr = lcr0
    sk = math.sqrt(kappa)
    n = 0
    cap = len(rec_t)
    if record:
        rec_t[0] = 0.0
        rec_z[0] = 0.0
    while True:
        u = g - zeta
        ua2 = u.real * u.real + u.imag * u.imag
        h = step_eps * ua2 / max(kappa, 1e-12)
        if t + h > t_max:
            h = t_max - t
        dz = sk * math.sqrt(h) * rng.standard_normal()
        a = zeta + 0.5 * dz
        u = g - a
        u2 = _slit(u, h)
        dL = cmath.log(u / u2)
        g2 = a + u2
        lcr2 = math.log(2.0 * g2.imag) - (L.real + dL.real)
        if mode == 1 and lcr2 <= level:
            f = (lcr - level) / (lcr - lcr2)
            return 1, L.imag + f * dL.imag, level, t + f * h, n + 1
        g = g2
        L += dL
        zeta += dz
        t += h
        lcr = lcr2
        n += 1
        if record:
            if n >= cap:
                return -1, L.imag, lcr, t, n
            rec_t[n] = t
            rec_z[n] = zeta
        if mode == 0 and lcr < level:
            return 2, L.imag, lcr, t, n
        alpha = 2.0 * math.atan2(g.imag, g.real - zeta)
        if alpha < alpha_stop or alpha > TWO_PI - alpha_stop:
            return 1 if mode == 0 else 2, L.imag, lcr, t, n
        if t >= t_max:
            return 0, L.imag, lcr, t, n


@numba.njit(cache=True)
def _chain_batch(rng, n, z0, kappa, step_eps, t_max, mode, level, alpha_stop,
                 status, wind, lcr, tend):
    dummy_t = np.zeros(1)
    dummy_z = np.zeros(1)
    for i in range(n):
        st, w, l, t, k = _chain_adaptive(rng, z0, kappa, step_eps, t_max, mode, level,
                                         alpha_stop, False, dummy_t, dummy_z)
        status[i] = st
        wind[i] = w
        lcr[i] = l
        tend[i] = t


@numba.njit(cache=True)
def _replay_kernel(rng, ts, zs, pts, kappa, step_eps, swallow_eps):
    """Track a batch along a recorded chain, refining steps by Brownian bridges.

    A coarse step [t_k, t_k+1] is bisected (midpoint drawn from the bridge)
    until it is no longer than step_eps min|g - zeta|^2 / kappa over the batch.
    """
    m = len(pts)
    g = pts.copy()
    L = np.zeros(m, np.complex128)
    alive = np.ones(m, np.bool_)
    st_t = np.empty(64)
    st_z = np.empty(64)
    n_sub = 0
    for k in range(len(ts) - 1):
        # stack of pending right endpoints; current left endpoint (tl, zl)
        tl = ts[k]
        zl = zs[k]
        top = 0
        st_t[0] = ts[k + 1]
        st_z[0] = zs[k + 1]
        while top >= 0:
            tr = st_t[top]
            zr = st_z[top]
            h = tr - tl
            umin = 1e300
            for i in range(m):
                if alive[i]:
                    u = g[i] - zl
                    ua2 = u.real * u.real + u.imag * u.imag
                    if ua2 < umin:
                        umin = ua2
            if h > step_eps * umin / kappa and top < 62 and h > 1e-300:
                zm = 0.5 * (zl + zr) + math.sqrt(kappa * h / 4.0) * rng.standard_normal()
                top += 1
                st_t[top] = tl + 0.5 * h
                st_z[top] = zm
                n_sub += 1
                continue
            a = 0.5 * (zl + zr)
            for i in range(m):
                if not alive[i]:
                    continue
                u = g[i] - a
                u2 = _slit(u, h)
                g2 = a + u2
                if g2.imag <= swallow_eps:
                    alive[i] = False
                    continue
                L[i] += cmath.log(u / u2)
                g[i] = g2
            tl = tr
            zl = zr
            top -= 1
    return g, L, alive, n_sub


# ---------------------------------------------------------------- API

def _swallow_eps(t_scale: float, kappa=None) -> float:
    """Threshold on Im g below which a point counts as swallowed.

    For kappa <= 4 the curve is simple and nothing is swallowed: a point with
    tiny Im g sits deep in a narrow fjord and keeps its CR, so only an exact
    hit of the boundary stops it.
    """
    if kappa is not None and kappa <= 4.0:
        return 0.0
    return 1e-9 * math.sqrt(max(t_scale, 1e-12))


def evolve(points: TrackedPoints, driving: DrivingPath, eta: float = 0.1,
           kappa: float | None = None) -> TrackedPoints:
    """Advance a batch of points through the whole driving path.

    eta = 0 applies every step individually; eta > 0 lets far points take
    aligned dyadic blocks of up to 4 (2^p dt) <= eta^2 |g - zeta|^2 steps.
    Passing kappa <= 4 switches off swallowing by near-closure.
    """
    out = points.copy()
    prefix, osc, off = driving.block_tables()
    _evolve_kernel(out.g, out.log_deriv, out.alive, out.swallow_time, out.stopped_winding,
                   out.stopped_cr, driving.values, prefix, osc, off, driving.dt, points.t,
                   eta, _swallow_eps(driving.t_max, kappa))
    out.t = points.t + driving.t_max
    return out


@dataclass
class LoewnerChain:
    """A sampled driving path with a point-evaluation oracle at its final time."""

    driving: DrivingPath
    kappa: float
    eta: float = 0.1

    @classmethod
    def sample(cls, rng, kappa, t_max, dt, eta=0.1) -> LoewnerChain:
        return cls(sample_driving(rng, kappa, t_max, dt), kappa, eta)

    @property
    def t_max(self) -> float:
        return self.driving.t_max

    def track(self, z) -> TrackedPoints:
        return evolve(TrackedPoints.new(z), self.driving, self.eta, self.kappa)

    def cr(self, z):
        """Conformal radius of z in H minus the hull; NaN-free, stopped value if swallowed."""
        pts = self.track(z)
        return pts.cr, pts.alive

    def tips(self, ks=None) -> np.ndarray:
        """Trace points gamma(k dt); default every step.  Fractional k allowed."""
        N = self.driving.n_steps
        ks = np.arange(N + 1, dtype=float) if ks is None else np.asarray(ks, float)
        prefix, osc, off = self.driving.block_tables()
        out = np.empty(len(ks), complex)
        _tips_kernel(np.ascontiguousarray(ks), self.driving.values, prefix, osc, off,
                     self.driving.dt, self.eta, out)
        return out

    def trace(self, spacing: float, base_stride: int = 16, min_step: float = 1e-6) -> np.ndarray:
        """Trace points with consecutive gaps below `spacing`.

        Starts from every base_stride-th step and bisects parameter
        intervals whose endpoints are farther apart than spacing, going
        inside single steps when needed.  Consecutive steps use different
        frames, so the sampled trace can jump by O(sqrt(dt)) between the end
        of one slit and the start of the next (the hull joins them along the
        image of a boundary segment); such gaps are bridged by straight
        segments, counted in self.bridged; self.on_hull marks the points
        that are not bridge interpolations.
        """
        N = self.driving.n_steps
        ks = np.unique(np.concatenate([np.arange(0, N + 1, base_stride), [N]])).astype(float)
        pts = self.tips(ks)
        while True:
            gap = np.abs(np.diff(pts))
            bad = np.nonzero((gap > spacing) & (np.diff(ks) > min_step))[0]
            if len(bad) == 0:
                return self._bridge(pts, spacing)
            mids = 0.5 * (ks[bad] + ks[bad + 1])
            new = self.tips(mids)
            ks = np.concatenate([ks, mids])
            pts = np.concatenate([pts, new])
            o = np.argsort(ks, kind="stable")
            ks, pts = ks[o], pts[o]


    def _bridge(self, pts, spacing):
        gap = np.abs(np.diff(pts))
        bad = np.nonzero(gap > spacing)[0]
        self.bridged = len(bad)
        if not len(bad):
            self.on_hull = np.ones(len(pts), bool)
            return pts
        parts, flags, last = [], [], 0
        for i in bad:
            m = int(math.ceil(gap[i] / spacing))
            parts += [pts[last: i + 1], pts[i] + (pts[i + 1] - pts[i]) * (np.arange(1, m) / m)]
            flags += [np.ones(i + 1 - last, bool), np.zeros(m - 1, bool)]
            last = i + 1
        parts.append(pts[last:])
        flags.append(np.ones(len(pts) - last, bool))
        self.on_hull = np.concatenate(flags)
        return np.concatenate(parts)


def cr_oracle(chain: LoewnerChain, z):
    """CR of z in the slit domain at the chain's final time.

    Returns (cr, ok); ok is False where z was swallowed (cr is then the
    value frozen at the swallow time).
    """
    return chain.cr(z)


def run_until_cr(rng, kappa, z0: complex, epsilon: float, C: float, step_eps: float = 0.01,
                 t_max: float = 1e12, alpha_stop: float = 1e-4):
    """Run one chain to completion and report (winding, cr, hit).

    The chain stops once the angle of g(z0) - zeta is within alpha_stop of the
    real line (the remaining change in CR and winding is negligible) or
    once CR has dropped below epsilon.  hit means the final CR lies in
    [epsilon, C epsilon].
    """
    gen = as_generator(rng)
    st, w, lcr, t, n = _chain_adaptive(gen, complex(z0), float(kappa), step_eps, t_max, 0,
                                       math.log(epsilon), alpha_stop, False, np.zeros(1), np.zeros(1))
    if st == 0:
        raise ChainTimeout(f"chain not finished by t_max={t_max}")
    cr = math.exp(lcr)
    hit = st == 1 and epsilon <= cr <= C * epsilon
    return w, cr, hit


def run_chains(rng, kappa, z0, n, step_eps=0.01, t_max=1e12, mode="exit", level=-np.inf,
               alpha_stop=1e-4):
    """Batch of independent single-point chains.

    mode "exit": run to completion (early stop once log CR < level).
    mode "level": stop exactly when log CR first reaches level.
    Returns (status, winding, log_cr, t_end).
    """
    gen = as_generator(rng)
    status, wind = np.empty(n, np.int64), np.empty(n)
    lcr, tend = np.empty(n), np.empty(n)
    _chain_batch(gen, n, complex(z0), float(kappa), step_eps, t_max,
                 0 if mode == "exit" else 1, float(level), alpha_stop, status, wind, lcr, tend)
    return status, wind, lcr, tend


def record_chain(rng, kappa, z0, step_eps=0.01, t_max=1e12, mode="exit", level=-np.inf,
                 alpha_stop=1e-4, cap=1 << 20):
    """Like run_chains for one chain, also returning the step grid (t_k, zeta_k)."""
    gen = as_generator(rng)
    rt, rz = np.empty(cap), np.empty(cap)
    st, w, lcr, t, n = _chain_adaptive(gen, complex(z0), float(kappa), step_eps, t_max,
                                       0 if mode == "exit" else 1, float(level), alpha_stop,
                                       True, rt, rz)
    if st == -1:
        raise ChainTimeout("recording buffer exhausted")
    return st, w, lcr, rt[: n + 1].copy(), rz[: n + 1].copy()


def replay_points(rng, ts, zs, points, kappa, step_eps=0.01):
    """Track extra points along a recorded chain (bridge-refined).

    Returns (g, log_deriv, alive) at the final recorded time.
    """
    gen = as_generator(rng)
    pts = np.atleast_1d(np.asarray(points, complex))
    g, L, alive, _ = _replay_kernel(gen, np.asarray(ts, float), np.asarray(zs, float), pts,
                                    float(kappa), step_eps, _swallow_eps(ts[-1], kappa))
    return g, L, alive


def diffusion_angle(z0: complex) -> float:
    """Starting angle alpha_0 = 2 arg z0 of the associated diffusion."""
    return 2.0 * cmath.phase(z0)


def hull_distance(z, trace_points) -> np.ndarray:
    """Distance from z to the real line and a dense sample of the trace."""
    z = np.atleast_1d(np.asarray(z, complex))
    out = z.imag.copy()
    tp = np.asarray(trace_points, complex)
    for s in range(0, len(tp), 4096):
        blk = tp[s: s + 4096]
        out = np.minimum(out, np.abs(z[:, None] - blk[None, :]).min(axis=1))
    return out
