"""Dyadic Minkowski contents, exponent fits and CR-Whitney decompositions."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .core import DyadicSquare, as_generator, squares_in_region


class ResolutionError(ValueError):
    """The set sample is too coarse for the requested level."""


class FitQualityError(RuntimeError):
    pass


LN2 = math.log(2.0)


# ---------------------------------------------------------------- covers

@dataclass
class CoverReport:
    """Hit cells of one set sample at one level, with their masses if any."""

    level: int
    hit_count: int
    cells: np.ndarray
    masses: np.ndarray | None = None
    contents: dict = field(default_factory=dict)
    euclidean_content: dict = field(default_factory=dict)

    def content(self, q: float) -> float:
        if q == 0.0:
            return float(self.hit_count)
        if self.masses is None:
            raise ValueError("report has no masses")
        return float(np.sum(self.masses ** q))

    def euclidean(self, dim: float) -> float:
        return self.hit_count * 2.0 ** (-self.level * dim)


def densify(points, step: float) -> np.ndarray:
    """Polyline through the points with extra points so no gap exceeds step."""
    z = np.atleast_1d(np.asarray(points, complex))
    if len(z) < 2:
        return z
    m = np.maximum(np.ceil(np.abs(np.diff(z)) / step).astype(np.int64), 1)
    seg = np.repeat(np.arange(len(z) - 1), m)
    start = np.concatenate([[0], np.cumsum(m)[:-1]])
    frac = (np.arange(m.sum()) - np.repeat(start, m)) / np.repeat(m, m)
    return np.concatenate([z[seg] + frac * (z[seg + 1] - z[seg]), z[-1:]])


def hit_cells(points, level: int, region=None, polyline=False) -> np.ndarray:
    """Unique (i, j) of level cells containing at least one point, shape (k, 2).

    With polyline, the points are joined by segments, walked at 1/16 of
    the cell side.
    """
    z = np.atleast_1d(np.asarray(points, complex))
    if polyline:
        z = densify(z, 2.0 ** -level / 16.0)
    if region is not None:
        x0, x1, y0, y1 = region
        z = z[(z.real >= x0) & (z.real < x1) & (z.imag >= y0) & (z.imag < y1)]
    s = 2.0 ** level
    ij = np.stack([np.floor(z.real * s), np.floor(z.imag * s)], axis=1).astype(np.int64)
    if len(ij) == 0:
        return ij.reshape(0, 2)
    return np.unique(ij, axis=0)


def check_resolution(points, level: int, ordered=True):
    """A polyline sample must have consecutive gaps below the cell side."""
    z = np.atleast_1d(np.asarray(points, complex))
    if ordered and len(z) > 1:
        gap = float(np.max(np.abs(np.diff(z))))
        if gap >= 2.0 ** -level:
            raise ResolutionError(f"sample gap {gap:.3g} exceeds cell side 2^-{level}")


def minkowski_contents(points, levels, masses=None, qs=(), dims=(), region=None,
                       ordered=True) -> list[CoverReport]:
    """One CoverReport per level.

    masses, if given, is a callable (level, cells) -> array of cell masses,
    evaluated on the hit cells only.
    """
    levels = list(levels)
    check_resolution(points, max(levels), ordered)
    out = []
    for n in levels:
        cells = hit_cells(points, n, region, polyline=ordered)
        m = None if masses is None else np.asarray(masses(n, cells), float)
        rep = CoverReport(n, len(cells), cells, m)
        for q in qs:
            rep.contents[q] = rep.content(q)
        for d in dims:
            rep.euclidean_content[d] = rep.euclidean(d)
        out.append(rep)
    return out


def cells_to_points(level, cells) -> np.ndarray:
    s = 2.0 ** -level
    cells = np.asarray(cells)
    return (cells[:, 0] + 0.5) * s + 1j * (cells[:, 1] + 0.5) * s


# ---------------------------------------------------------------- fits

def _by_level(reports):
    """Group a flat or nested collection of reports into {level: [reports]}."""
    groups = {}
    stack = list(reports.values()) if isinstance(reports, dict) else list(reports)
    while stack:
        r = stack.pop()
        if isinstance(r, CoverReport):
            groups.setdefault(r.level, []).append(r)
        else:
            stack.extend(r)
    return dict(sorted(groups.items()))


def _values(groups, q, kind):
    rows = []
    for n, reps in groups.items():
        if kind == "euclidean":
            rows.append(np.array([r.euclidean(q) for r in reps]))
        else:
            rows.append(np.array([r.content(q) for r in reps]))
    return list(groups), rows


def _slope(levels, y):
    n = np.asarray(levels, float)
    w = (n - n.mean()) / np.sum((n - n.mean()) ** 2)
    return float(w @ y), w


def exponent_fit(reports, q: float, kind: str = "quantum", n_boot: int = 400, rng=0):
    """Slope theta(q) of log2 E[content] against n, with its standard error.

    kind "quantum" uses sum mass^q over hit cells; "euclidean" uses
    hit_count 2^(-n q).  When every level has the same number of samples
    they are taken as paired (one sample = one realization across levels)
    and the error is bootstrapped over realizations; otherwise a
    delta-method error treats levels as independent.
    """
    groups = _by_level(reports)
    if len(groups) < 4:
        raise ValueError("need at least 4 levels")
    levels, rows = _values(groups, q, kind)
    means = np.array([r.mean() for r in rows])
    if np.any(means <= 0):
        raise FitQualityError("nonpositive mean content")
    theta, w = _slope(levels, np.log2(means))
    sizes = {len(r) for r in rows}
    if n_boot == 0:
        se = float("nan")
    elif len(sizes) == 1 and sizes.pop() > 1:
        A = np.stack(rows)
        gen = as_generator(rng)
        k = A.shape[1]
        boots = np.empty(n_boot)
        for b in range(n_boot):
            idx = gen.integers(0, k, k)
            mb = A[:, idx].mean(axis=1)
            boots[b] = w @ np.log2(np.maximum(mb, 1e-300))
        se = float(boots.std(ddof=1))
    else:
        var = np.array([r.var(ddof=1) / len(r) if len(r) > 1 else 0.0 for r in rows])
        se = float(math.sqrt(np.sum(w ** 2 * var / (means * LN2) ** 2)))
    return theta, se


def dimension_estimate(reports, kind: str = "quantum", bracket=(0.0, 2.0), noise=0.05) -> float:
    """Root q* of theta(q) = 0 by bisection; theta must decrease in q."""
    groups = _by_level(reports)
    lo, hi = bracket
    grid = np.linspace(lo, hi, 21)
    th = np.array([exponent_fit(groups, q, kind, n_boot=0)[0] for q in grid])
    if np.any(np.diff(th) > noise):
        raise FitQualityError("theta(q) is not decreasing")
    if th[0] < 0 or th[-1] > 0:
        raise FitQualityError(f"theta does not change sign on {bracket}")
    return float(optimize.brentq(lambda q: exponent_fit(groups, q, kind, n_boot=0)[0],
                                 lo, hi, xtol=1e-10))


def euclidean_dimension(reports) -> tuple[float, float]:
    """Box dimension = slope of log2 E[hit count] in n, with its error."""
    return exponent_fit(reports, 0.0, "euclidean")


def regression_slope(x, y, se=None):
    """Least-squares slope of y on x; error from se (if given) or residuals."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    sxx = np.sum((x - x.mean()) ** 2)
    if sxx == 0:
        return float("nan"), float("nan")
    w = (x - x.mean()) / sxx
    b = float(w @ y)
    if se is not None:
        return b, float(math.sqrt(np.sum(w ** 2 * np.asarray(se, float) ** 2)))
    if len(x) < 3:
        return b, float("nan")
    a = y.mean() - b * x.mean()
    res = y - a - b * x
    return b, float(math.sqrt(np.sum(res ** 2) / (len(x) - 2) / np.sum((x - x.mean()) ** 2)))


def content_table_csv(path, rows):
    """rows of (n, q, mean, stderr, count)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["n", "q", "mean_content", "stderr", "samples"])
        for n, q, m, s, c in rows:
            w.writerow([int(n), repr(float(q)), repr(float(m)), repr(float(s)), int(c)])


# ---------------------------------------------------------------- CR-Whitney

def is_cr_whitney(cr, side, upper_constant=12.0):
    cr = np.asarray(cr, float)
    return (4.0 * side <= cr) & (cr <= upper_constant * side)


@dataclass
class WhitneyDecomposition:
    squares: list
    cr: np.ndarray
    region: tuple
    max_level: int
    upper_constant: float = 12.0
    discarded: int = 0
    discarded_area: float = 0.0
    oracle_failures: int = 0

    @property
    def levels(self) -> np.ndarray:
        return np.array([q.level for q in self.squares], int)

    @property
    def sides(self) -> np.ndarray:
        return np.array([q.side for q in self.squares])

    @property
    def centers(self) -> np.ndarray:
        return np.array([q.center for q in self.squares], complex)

    def area(self) -> float:
        return float(np.sum(self.sides ** 2))

    def satisfied(self) -> np.ndarray:
        return is_cr_whitney(self.cr, self.sides, self.upper_constant)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["level", "i", "j", "cr_center"])
            for q, c in zip(self.squares, self.cr):
                w.writerow([q.level, q.i, q.j, repr(float(c))])


def cr_whitney_decompose(cr_oracle, region, max_level: int, upper_constant: float = 12.0,
                         min_level: int = 0, strict: bool = True) -> WhitneyDecomposition:
    """Greedy decomposition into maximal squares whose center has CR >= 4 l.

    cr_oracle maps an array of centers to (cr, ok); ok False (swallowed
    center) means the square is subdivided.  Squares still failing at
    max_level are discarded and counted.  With strict, a kept square that
    breaks the upper bound raises.
    """
    pending = squares_in_region(region, min_level)
    kept, crs = [], []
    discarded, darea, failures = 0, 0.0, 0
    while pending:
        cen = np.array([q.center for q in pending], complex)
        cr, ok = cr_oracle(cen)
        cr = np.asarray(cr, float)
        ok = np.asarray(ok, bool)
        failures += int(np.sum(~ok))
        nxt = []
        for q, c, good in zip(pending, cr, ok):
            if good and c >= 4.0 * q.side:
                if strict and c > upper_constant * q.side:
                    raise AssertionError(
                        f"square {q} has CR {c:.4g} > {upper_constant} l; start from a coarser level")
                kept.append(q)
                crs.append(c)
            elif q.level < max_level:
                nxt.extend(q.children())
            else:
                discarded += 1
                darea += q.side ** 2
        pending = nxt
    return WhitneyDecomposition(kept, np.array(crs), tuple(region), max_level, upper_constant,
                                discarded, darea, failures)


def quarter_points(square: DyadicSquare) -> np.ndarray:
    """Center and the four points at offsets (+-l/4, +-l/4)."""
    c = square.center
    h = square.side / 4.0
    return np.array([c, c + h + 1j * h, c - h + 1j * h, c - h - 1j * h, c + h - 1j * h])


def whitney_green_check(decomp: WhitneyDecomposition, model, boundary_distance, levels=None):
    """tildeG(x, y) + log 1/d(Q) over the quarter-point pairs of each square.

    d(Q) is the distance from the center to the boundary (a callable on
    points).  Returns {level: (min, max, spread, n_squares)}.
    """
    out = {}
    lv = decomp.levels
    for n in sorted(set(lv)) if levels is None else levels:
        sq = [q for q, l in zip(decomp.squares, lv) if l == n]
        if not sq:
            continue
        pts = np.concatenate([quarter_points(q) for q in sq])
        mapped = model.conformal_data(pts)
        dev = []
        d = np.asarray(boundary_distance(np.array([q.center for q in sq])), float)
        for k, q in enumerate(sq):
            sl = slice(5 * k, 5 * k + 5)
            x = pts[sl]
            mx = tuple(np.asarray(a)[sl] for a in mapped)
            if model.domain == "unit_disc":
                T = model.tilde_g(x[:, None], x[None, :])
            else:
                from .field import _tilde_slit, resolved
                if not np.all(resolved(mx[0], mx[2])):
                    continue
                T = _tilde_slit(x[:, None], x[None, :], mx[0][:, None], mx[0][None, :],
                                mx[1][:, None], mx[1][None, :])
            dev.append(T.ravel() + math.log(1.0 / d[k]))
        dev = np.concatenate(dev)
        out[n] = (float(dev.min()), float(dev.max()), float(dev.max() - dev.min()), len(sq))
    return out


def whitney_winding_check(decomp: WhitneyDecomposition, winding, percentile=99.0):
    """Per-square oscillation max - min of the winding at the quarter points.

    winding maps points to (values, ok).  Returns ({level: percentile},
    oscillations by level, skipped count).
    """
    lv = decomp.levels
    osc, skipped = {}, 0
    for n in sorted(set(lv)):
        sq = [q for q, l in zip(decomp.squares, lv) if l == n]
        pts = np.concatenate([quarter_points(q) for q in sq])
        w, ok = winding(pts)
        w = np.asarray(w, float).reshape(-1, 5)
        ok = np.asarray(ok, bool).reshape(-1, 5).all(axis=1)
        skipped += int(np.sum(~ok))
        o = oscillation(w[ok])
        if len(o):
            osc[n] = o
    stats = {n: float(np.percentile(o, percentile)) for n, o in osc.items()}
    return stats, osc, skipped


def oscillation(values) -> np.ndarray:
    """Row-wise max - min; unchanged by adding a constant."""
    v = np.asarray(values, float)
    return v.max(axis=-1) - v.min(axis=-1)


def lower_bound_neighbors(cr_oracle, center: complex, side: float, upper_constant=150.0):
    """Check the four squares of side l 2^-6 meeting at the center.

    Meant for squares whose center has CR in [l/3, l/2]; returns
    (applicable, all four satisfy 4 l' <= CR <= upper_constant l').
    """
    cr0, ok0 = cr_oracle(np.array([center]))
    c0 = float(np.asarray(cr0)[0])
    if not (bool(np.asarray(ok0)[0]) and side / 3.0 <= c0 <= side / 2.0):
        return False, True
    s = side / 64.0
    h = s / 2.0
    pts = center + np.array([h + 1j * h, -h + 1j * h, -h - 1j * h, h - 1j * h])
    cr, ok = cr_oracle(pts)
    return True, bool(np.all(ok) and np.all(is_cr_whitney(cr, s, upper_constant)))


# ---------------------------------------------------------------- SLE statistics

def hit_probability(rng, kappa, z0, levels, n_chains, C=12.0, step_eps=0.02):
    """P(final CR(z0) <= C 2^-n) for each level n, from single-point chains."""
    from .loewner import run_chains
    gen = as_generator(rng)
    lo = math.log(C * 2.0 ** -max(levels))
    # run each chain down to the finest level once; CR is monotone
    st, w, lcr, t = run_chains(gen, kappa, z0, n_chains, step_eps=step_eps, mode="exit",
                               level=lo - 1e-12)
    final = np.where(st == 2, -np.inf, lcr)
    p = np.array([np.mean(final <= math.log(C * 2.0 ** -n)) for n in levels])
    return p, np.sqrt(p * (1 - p) / n_chains)


def curve_mass(rng, trace, levels, region, gamma, n_fields=200):
    """Mean total Liouville mass of level-n cells hitting the curve.

    The field is an independent zero-boundary field in the upper half plane
    at regularization 2^-n.  Returns (means, stderrs).
    """
    from .field import CovarianceModel, GaussianSampler, liouville_masses, CircleAverageField
    gen = as_generator(rng)
    means, ses = [], []
    for n in levels:
        cells = hit_cells(trace, n, region, polyline=True)
        z = cells_to_points(n, cells)
        z = z[z.imag > 2.0 ** -n]
        model = CovarianceModel.half_plane(2.0 ** -n)
        smp = GaussianSampler(model.matrix(z))
        fld = CircleAverageField(z, smp.draw(gen, n_fields), model.delta, n)
        tot = liouville_masses(fld, gamma).total()
        means.append(tot.mean())
        ses.append(tot.std(ddof=1) / math.sqrt(n_fields))
    return np.array(means), np.array(ses)


def liouville_cover_reports(rng, points, levels, gamma, n_fields, model_for=None, region=None,
                            ordered=True):
    """Cover reports of a fixed set, one per (level, field draw).

    Each level gets n_fields independent circle-average fields at
    regularization 2^-n, sampled at the centers of the hit cells.
    model_for(delta) builds the covariance model (unit disc by default).
    Returns {level: [CoverReport, ...]}.
    """
    from .field import CovarianceModel, GaussianSampler
    if model_for is None:
        model_for = CovarianceModel.unit_disc
    gen = as_generator(rng)
    levels = list(levels)
    check_resolution(points, max(levels), ordered)
    gp = gamma * gamma / 2.0
    out = {}
    for n in levels:
        cells = hit_cells(points, n, region, polyline=ordered)
        z = cells_to_points(n, cells)
        model = model_for(2.0 ** -n)
        h = GaussianSampler(model.matrix(z)).draw(gen, n_fields)
        d = model.delta
        mu = d ** gp * d * d * np.exp(gamma * h)
        out[n] = [CoverReport(n, len(cells), cells, mu[k]) for k in range(n_fields)]
    return out
