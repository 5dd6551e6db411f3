"""Experiment drivers behind the command line and the acceptance suite.

Every driver takes a parameter dict (missing keys fall back to DEFAULTS),
a seed and a worker count, and returns (summary, tables).  summary holds
scalar results plus a "criteria" list of rows (id, observed, target,
tolerance, passed); tables maps a name to (header, rows) for CSV output.

Random streams are keyed by (experiment code, part, shard), and shards
are fixed by the parameters, never by the worker count, so results do
not depend on scheduling.
"""
from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np
from scipy import stats

from . import core, diffusion, dimension, field, loewner, spectral
from .core import RandomStream

TWO_PI = 2.0 * math.pi


def _map(fn, tasks, workers):
    tasks = list(tasks)
    if workers <= 1 or len(tasks) <= 1:
        return [fn(*t) for t in tasks]
    with ProcessPoolExecutor(workers) as ex:
        return list(ex.map(fn, *zip(*tasks)))


def _shards(n, size):
    out, start = [], 0
    while start < n:
        out.append(min(size, n - start))
        start += size
    return out


def _row(cid, name, observed, target, tolerance, passed):
    return {"id": cid, "name": name, "observed": float(observed), "target": float(target),
            "tolerance": str(tolerance), "passed": bool(passed)}


def _slope(x, y, se):
    return dimension.regression_slope(x, y, se)


# ---------------------------------------------------------------- spectral

def spectral_check(p, seed=0, workers=1):
    """Ground states and the kappa = 4 spectrum against closed forms."""
    kappas = p["kappas"]
    M = p["M"]
    rows, crit = [], []
    x = np.linspace(0.1, TWO_PI - 0.1, 2001)
    out = {}
    for k in kappas:
        t0 = time.perf_counter()
        sys_ = spectral.eigen_solve(k, M)
        el = time.perf_counter() - t0
        lam0 = sys_.eigenvalues[0]
        err = abs(lam0 - (1.0 - k / 8.0))
        phi = sys_.eigenfunction(0, x)
        phi = phi / sys_.eigenfunction(0, np.array([math.pi]))[0]
        ref = np.sin(x / 2.0) ** (8.0 / k - 1.0)
        rel = float(np.max(np.abs(phi - ref) / ref))
        rows.append([k, M, lam0, err, rel])
        out[f"kappa_{k:g}"] = {"lambda0": lam0, "lambda0_abs_error": err,
                               "phi0_max_rel_error": rel, "seconds": el}
        crit.append(_row(1, f"ground state kappa={k:g}", err, 0.0, "<1e-3; phi0 rel <1e-2; <120 s",
                         err < 1e-3 and rel < 1e-2 and el < 120))
        if abs(k - 4.0) < 1e-12:
            n = np.arange(p["n_spectrum"])
            ref_l = (n + 1.0) ** 2 / 2.0
            relerr = np.abs(sys_.eigenvalues[: len(n)] - ref_l) / ref_l
            out["kappa4_spectrum_rel_error"] = relerr.tolist()
            crit.append(_row(2, "kappa=4 spectrum (n+1)^2/2", float(relerr.max()), 0.0, "<1e-3 rel",
                             relerr.max() < 1e-3 and el < 120))
    if len(kappas) == 1:
        out.update(out[f"kappa_{kappas[0]:g}"])
    summary = {**out, "criteria": crit}
    if p.get("survival_paths", 0):
        s, t = survival_check(p, seed, workers)
        summary["survival"] = s
        summary["criteria"] += s.pop("criteria")
        return summary, {"spectral": (["kappa", "M", "lambda0", "lambda0_abs_error",
                                       "phi0_max_rel_error"], rows), **t}
    return summary, {"spectral": (["kappa", "M", "lambda0", "lambda0_abs_error",
                                   "phi0_max_rel_error"], rows)}


def _survival_shard(seed, key, k, n, T, dt):
    cfg = diffusion.DiffusionConfig(k, dt_base=dt)
    p, _ = diffusion.survival_frequency(RandomStream(seed, key), math.pi, cfg, n, T)
    return np.rint(np.asarray(p) * n).astype(np.int64)


def survival_check(p, seed=0, workers=1):
    """Monte Carlo survival P_pi(tau > T) against the spectral series."""
    T = list(p["survival_T"])
    n = int(p["survival_paths"])
    rows, crit = [], []
    t0 = time.perf_counter()
    for ki, k in enumerate(p["survival_kappas"]):
        tasks = [(seed, (1, ki, s), k, m, T, p["survival_dt"])
                 for s, m in enumerate(_shards(n, p["survival_shard"]))]
        counts = np.sum(_map(_survival_shard, tasks, workers), axis=0)
        pm = counts / n
        se = np.sqrt(pm * (1 - pm) / n)
        ref = spectral.survival_probability(spectral.eigen_solve(k, p["M"]), math.pi, np.array(T, float))
        z = (pm - ref) / se
        for j, TT in enumerate(T):
            rows.append([k, TT, n, pm[j], se[j], ref[j], z[j]])
        crit.append(_row(3, f"survival kappa={k:g}", float(np.max(np.abs(z))), 0.0, "|z|<3",
                         bool(np.all(np.abs(z) < 3))))
    el = time.perf_counter() - t0
    crit.append(_row(3, "survival runtime", el, 600.0, "<600 s", el < 600))
    return {"seconds": el, "criteria": crit}, {
        "survival": (["kappa", "T", "paths", "mc", "stderr", "spectral", "z"], rows)}


# ---------------------------------------------------------------- windings

def _windings_shard(seed, key, k, T, c, n, sampler, dt):
    cfg = diffusion.DiffusionConfig(k, dt_base=dt)
    sys_ = spectral.cached_eigen_solve(k, 2000)
    win = diffusion.ConditioningWindow(T, c)
    return diffusion.conditioned_windings(RandomStream(seed, key), k, win, n, sampler=sampler,
                                          config=cfg, spectral_system=sys_)


def _conditioned(p, seed, workers, code, k, T, n, sampler):
    tasks = [(seed, (code, int(round(k * 1000)), int(round(T * 1000)), s), k, T, p["c"], m,
              sampler, p["dt"]) for s, m in enumerate(_shards(n, p["shard"]))]
    return np.concatenate(_map(_windings_shard, tasks, workers))


def winding_variance(p, seed=0, workers=1):
    """Var(W | tau in (T, T+c]) grows like (kappa/4) T; plus the Loewner cross-check."""
    rows, crit, out = [], [], {}
    t0 = time.perf_counter()
    for k in p["kappas"]:
        v, se = [], []
        for T in p["T"]:
            W = _conditioned(p, seed, workers, 2, k, T, p["n_paths"], p["sampler"])
            d = W - W.mean()
            var = float(d.var(ddof=1))
            sev = float(math.sqrt(max(np.mean(d ** 4) - var ** 2, 0.0) / len(W)))
            v.append(var)
            se.append(sev)
            rows.append([k, T, len(W), W.mean(), var, sev])
        b, sb = _slope(p["T"], v, se)
        out[f"kappa_{k:g}"] = {"slope": b, "slope_stderr": sb, "target": k / 4.0}
        crit.append(_row(4, f"winding variance slope kappa={k:g}", b, k / 4.0, "15% rel",
                         abs(b / (k / 4.0) - 1.0) <= 0.15))
    out["seconds"] = time.perf_counter() - t0
    tables = {"winding_variance": (["kappa", "T", "paths", "mean_w", "var_w", "var_stderr"], rows)}
    if p.get("ks_samples", 0):
        s, t = loewner_equivalence(p, seed, workers)
        crit += s.pop("criteria")
        out["loewner_equivalence"] = s
        tables.update(t)
    out["criteria"] = crit
    return out, tables


def winding_moments(p, seed=0, workers=1):
    """log E[e^{lam W} | window] against T, and rejection vs h-transform at one T."""
    k = p["kappa"]
    lams = list(p["lams"])
    rows, crit, out = [], [], {}
    t0 = time.perf_counter()
    est = {lam: [] for lam in lams}
    samples = {}
    for T in p["T"]:
        W = _conditioned(p, seed, workers, 3, k, T, p["n_paths"], p["sampler"])
        samples[T] = W
        for m in diffusion.moments_from_windings(W, lams, symmetrize=p["symmetrize"]):
            est[m.lam].append(m)
            rows.append(["main", T, m.lam, m.n, m.estimate, m.stderr])
    for lam in lams:
        y = [m.log_estimate for m in est[lam]]
        s = [m.log_stderr for m in est[lam]]
        b, sb = _slope(p["T"], y, s)
        target = lam * lam * k / 8.0
        out[f"lambda_{lam:g}"] = {"slope": b, "slope_stderr": sb, "target": target}
        crit.append(_row(5, f"moment slope lambda={lam:g}", b, target, "15% rel",
                         abs(b / target - 1.0) <= 0.15))
    Tc = p["compare_T"]
    Wr = _conditioned(p, seed, workers, 4, k, Tc, p["compare_paths"], "rejection")
    Wh = samples.get(Tc)
    if Wh is None:
        Wh = _conditioned(p, seed, workers, 5, k, Tc, p["n_paths"], "htransform")
    for lam in lams:
        mr = diffusion.moments_from_windings(Wr, [lam], p["symmetrize"])[0]
        mh = diffusion.moments_from_windings(Wh, [lam], p["symmetrize"])[0]
        rows.append(["rejection", Tc, lam, mr.n, mr.estimate, mr.stderr])
        rows.append(["htransform", Tc, lam, mh.n, mh.estimate, mh.stderr])
        overlap = abs(mr.estimate - mh.estimate) <= 1.96 * (mr.stderr + mh.stderr)
        crit.append(_row(5, f"samplers agree lambda={lam:g} T={Tc:g}",
                         mr.estimate - mh.estimate, 0.0, "95% CIs overlap", overlap))
    out["seconds"] = time.perf_counter() - t0
    out["criteria"] = crit
    return out, {"winding_moments": (["sampler", "T", "lambda", "paths", "estimate", "stderr"], rows)}


def loewner_equivalence(p, seed=0, workers=1):
    """Loewner windings at a log-CR level vs diffusion windings at the matching time."""
    k = p.get("ks_kappa", 2.0)
    z0 = complex(p.get("ks_z0", 1j))
    s_star = p.get("ks_level", 1.5)
    n = int(p["ks_samples"])
    a0 = loewner.diffusion_angle(z0)
    level = math.log(2.0 * z0.imag) - s_star
    rows = []
    tau, wd, sd = diffusion.simulate_exit_batch(RandomStream(seed, (6, 0)), a0,
                                                diffusion.DiffusionConfig(k, dt_base=p["dt"]),
                                                int(p.get("ks_diffusion_factor", 3)) * n,
                                                t_stop=s_star)
    wdd = wd[sd == 0]
    reach_d = len(wdd) / len(wd)
    pv = None
    for i, eps in enumerate(p["ks_step_eps"]):
        st, w, lcr, te = loewner.run_chains(RandomStream(seed, (6, 1, i)), k, z0, n, step_eps=eps,
                                            mode="level", level=level)
        wl = w[st == 1]
        pv = float(stats.ks_2samp(wl, wdd).pvalue)
        rows.append([eps, len(wl) / n, reach_d, float(wl.var()), float(wdd.var()), pv])
    crit = [_row(6, "Loewner vs diffusion KS (finest step)", pv, 0.01, "p >= 0.01", pv >= 0.01)]
    return {"ks_pvalue": pv, "criteria": crit}, {
        "loewner_equivalence": (["step_eps", "loewner_reach", "diffusion_reach", "loewner_var",
                                 "diffusion_var", "ks_pvalue"], rows)}


# ---------------------------------------------------------------- Liouville

def _ball_moments(gen, z, delta, gamma, qs, n_fields, chunk):
    model = field.CovarianceModel.unit_disc(delta)
    smp = field.GaussianSampler(model.matrix(z))
    acc = np.zeros((len(qs), 2))
    done = 0
    while done < n_fields:
        m = min(chunk, n_fields - done)
        h = smp.draw(gen, m)
        mu = (delta ** (gamma * gamma / 2.0) * delta * delta * np.exp(gamma * h)).sum(axis=1)
        for j, q in enumerate(qs):
            v = mu ** q
            acc[j] += v.sum(), (v * v).sum()
        done += m
    mean = acc[:, 0] / n_fields
    var = acc[:, 1] / n_fields - mean ** 2
    return mean, np.sqrt(var / n_fields)


def scaling_check(p, seed=0, workers=1):
    """Liouville one-point means, ball-moment scaling and the segment KPZ fit."""
    g = p["gamma"]
    gen = RandomStream(seed, (7, 0)).generator()
    crit, rows_pt, rows_ball = [], [], []
    t0 = time.perf_counter()
    # one-point means at random interior points
    r = 0.8 * np.sqrt(gen.random(p["n_points"]))
    z = r * np.exp(2j * math.pi * gen.random(p["n_points"]))
    d = p["delta"]
    model = field.CovarianceModel.unit_disc(d)
    fld = field.sample_field(gen, model, z, p["n_fields"])
    mu = field.liouville_masses(fld, g).masses / (d * d)
    m, se = mu.mean(axis=0), mu.std(axis=0, ddof=1) / math.sqrt(p["n_fields"])
    target = model.cr(z) ** (g * g / 2.0)
    zs = (m - target) / se
    for i in range(len(z)):
        rows_pt.append([z[i].real, z[i].imag, m[i], se[i], target[i], zs[i]])
    crit.append(_row(7, "E mu / delta^2 = CR^(g^2/2)", float(np.max(np.abs(zs))), 0.0, "|z|<=4",
                     bool(np.all(np.abs(zs) <= 4))))
    # ball moments with a fixed ratio delta / r
    qs = list(p["qs"])
    radii = [2.0 ** -j for j in p["ball_levels"]]
    logm = np.zeros((len(qs), len(radii)))
    logs = np.zeros_like(logm)
    for i, rr in enumerate(radii):
        delta = rr / p["ball_ratio"]
        n = int(round(-math.log2(delta)))
        _, _, c = core.cell_centers((-rr, rr, -rr, rr), n)
        c = c[np.abs(c) < rr]
        mean, sem = _ball_moments(RandomStream(seed, (7, 1, i)).generator(), c, delta, g, qs,
                                  p["ball_fields"], p["ball_chunk"])
        logm[:, i] = np.log(mean)
        logs[:, i] = sem / mean
        for j, q in enumerate(qs):
            rows_ball.append([rr, delta, len(c), q, mean[j], sem[j]])
    slopes = {}
    for j, q in enumerate(qs):
        b, sb = _slope(np.log(radii), logm[j], logs[j])
        target = (2 + g * g / 2) * q - g * g * q * q / 2
        slopes[q] = (b, sb)
        crit.append(_row(7, f"ball moment slope q={q:g}", b, target, "5% rel",
                         abs(b / target - 1.0) <= 0.05))
    # deterministic segment with independent masses
    seg = p["segment"]
    x = np.linspace(seg[0], seg[1], 2 ** (max(p["segment_levels"]) + 4) + 1)
    pts = x + 1j * seg[2]
    reps = dimension.liouville_cover_reports(RandomStream(seed, (7, 2)), pts, p["segment_levels"],
                                             g, p["segment_fields"])
    qstar = dimension.dimension_estimate(reps)
    dk = core.kpz_forward(qstar, g)
    crit.append(_row(8, "segment KPZ |kpz_forward(q*) - 1|", abs(dk - 1.0), 0.0, "<0.1",
                     abs(dk - 1.0) < 0.1))
    el = time.perf_counter() - t0
    out = {"ball_slopes": {f"{q:g}": v for q, v in slopes.items()}, "segment_qstar": qstar,
           "segment_kpz_forward": dk, "seconds": el, "criteria": crit}
    return out, {"liouville_points": (["x", "y", "mean", "stderr", "target", "z"], rows_pt),
                 "ball_moments": (["r", "delta", "cells", "q", "mean", "stderr"], rows_ball)}


# ---------------------------------------------------------------- SLE dimension

def _chain_counts(seed, key, k, tmax, dt, eta, spacing, levels, region):
    ch = loewner.LoewnerChain.sample(RandomStream(seed, key), k, tmax, dt, eta)
    tr = ch.trace(spacing)
    reps = dimension.minkowski_contents(tr, levels, region=region)
    return [r.hit_count for r in reps]


def sle_dimension(p, seed=0, workers=1):
    levels = list(p["levels"])
    crit, rows, out = [], [], {}
    t0 = time.perf_counter()
    for ki, k in enumerate(p["kappas"]):
        tasks = [(seed, (9, ki, c), k, p["t_max"], p["dt"], p["eta"], p["spacing"], levels,
                  tuple(p["region"])) for c in range(p["n_chains"])]
        H = np.array(_map(_chain_counts, tasks, workers))
        reps = {n: [dimension.CoverReport(n, int(h), np.zeros((0, 2))) for h in H[:, j]]
                for j, n in enumerate(levels)}
        d, sd = dimension.euclidean_dimension(reps)
        for j, n in enumerate(levels):
            rows.append([k, n, H[:, j].mean(), H[:, j].std(ddof=1) / math.sqrt(len(H))])
        out[f"kappa_{k:g}"] = {"dimension": d, "stderr": sd, "target": 1 + k / 8}
        crit.append(_row(9, f"box dimension kappa={k:g}", d, 1 + k / 8, "+-0.1",
                         abs(d - (1 + k / 8)) <= 0.1))
    out["seconds"] = time.perf_counter() - t0
    out["criteria"] = crit
    return out, {"sle_dimension": (["kappa", "level", "mean_hits", "stderr"], rows)}


# ---------------------------------------------------------------- flow-line squares

def _square_start(level):
    """Level-n square with its lower-left corner at i: CR of its center is about 2."""
    return core.DyadicSquare(level, 0, 2 ** level)


def _replay_mass_moment(seed, key, k, level, m, C, gamma, q, n_fields, step_eps, max_tries):
    """E_h[mu(Q)^q] in the slit domain of one chain for which Q is CR-Whitney.

    Chains are drawn until the final CR of the center lies in [4 l, 4 C l];
    the hit chain's step grid is replayed for the center and the m x m
    sub-lattice of Q.  The replay refines the path below the recorded steps,
    so it is accepted only if Q is still CR-Whitney, no lattice point has
    CR < 4 delta and every point is resolved (see field.resolved); otherwise the next chain is drawn.
    Returns (mean, stderr, attempts, rejected replays).
    """
    sq = _square_start(level)
    l = sq.side
    delta = l / m
    pts = np.concatenate([[sq.center], sq.sample_points(m)])
    base = RandomStream(seed, key)
    rejected = 0
    for a in range(max_tries):
        st, w, lcr, rt, rz = loewner.record_chain(base.child(0).child(a), k, sq.center,
                                                  step_eps=step_eps, mode="exit",
                                                  level=math.log(4 * l))
        if not (st == 1 and lcr <= math.log(C * 4 * l)):
            continue
        g, L, alive = loewner.replay_points(base.child(1).child(a), rt, rz, pts, k, step_eps)
        cr = 2.0 * g.imag * np.exp(-L.real)
        if (np.all(field.resolved(g, alive)) and 4 * l <= cr[0] <= C * 4 * l
                and cr[1:].min() >= 4 * delta):
            break
        rejected += 1
    else:
        return np.nan, np.nan, max_tries, rejected
    model = field.CovarianceModel.half_plane_slit(None, delta)
    K = model.matrix(pts[1:], (g[1:], L[1:], alive[1:]))
    h = field.GaussianSampler(K).draw(base.child(2), n_fields)
    mu = (delta ** (gamma * gamma / 2.0) * delta * delta * np.exp(gamma * h)).sum(axis=1)
    v = mu ** q
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(n_fields)), a + 1, rejected


def flowline_square_scaling(p, seed=0, workers=1):
    """E_SLE[e^{-g chi q w(z0)} | Q CR-Whitney] E_h[mu(Q)^q] against l(Q).

    The control is the same mass moment for a square centered at the
    origin of the unit disc, which scales with the plain KPZ exponent.
    """
    k, g, q = p["kappa"], p["gamma"], p["q"]
    C = p["C"]
    lam = g * core.KappaParams(k).chi * q
    levels = list(p["levels"])
    rows, crit = [], []
    t0 = time.perf_counter()
    logS, seS, logC, seC, ls = [], [], [], [], []
    for li, n in enumerate(levels):
        sq = _square_start(n)
        l = sq.side
        ls.append(l)
        # winding factor from single-point chains
        ws = []
        for s, m in enumerate(_shards(p["n_chains"], p["chain_shard"])):
            st, w, lcr, _ = loewner.run_chains(RandomStream(seed, (10, li, 0, s)), k, sq.center, m,
                                               step_eps=p["step_eps"], mode="exit",
                                               level=math.log(4 * l))
            ws.append(w[(st == 1) & (lcr <= math.log(C * 4 * l))])
        w = np.concatenate(ws)
        e = np.exp(-lam * w)
        A, sA = e.mean(), e.std(ddof=1) / math.sqrt(len(e))
        # Liouville factor in replayed slit domains
        tasks = [(seed, (10, li, 1, j), k, n, p["m"], C, g, q, p["n_fields"], p["step_eps"],
                  p["max_tries"]) for j in range(p["n_replay"])]
        res = np.array(_map(_replay_mass_moment, tasks, workers), float)
        good = np.isfinite(res[:, 0])
        B = res[good, 0].mean()
        sB = res[good, 0].std(ddof=1) / math.sqrt(good.sum())
        S = A * B
        logS.append(math.log(S))
        seS.append(math.hypot(sA / A, sB / B))
        # control square centered at 0 in the unit disc
        pts = core.DyadicSquare(n, 0, 0).sample_points(p["m"]) - 0.5 * l * (1 + 1j)
        mean, sem = _ball_moments(RandomStream(seed, (10, li, 2)).generator(), pts, l / p["m"], g,
                                  [q], p["control_fields"], p["control_chunk"])
        logC.append(math.log(mean[0]))
        seC.append(sem[0] / mean[0])
        rows.append([n, l, len(w), A, sA, int(good.sum()), int(res[:, 3].sum()), B, sB, S,
                     mean[0], sem[0]])
    x = np.log(ls)
    b, sb = _slope(x, logS, seS)
    bc, sbc = _slope(x, logC, seC)
    target = (2 + g * g / 2) * q - g * g * (1 - k / 4) ** 2 * q * q / 2
    kpz = (2 + g * g / 2) * q - g * g * q * q / 2
    ci = (b - 1.96 * sb, b + 1.96 * sb)
    cic = (bc - 1.96 * sbc, bc + 1.96 * sbc)
    crit.append(_row(10, "flow-line square exponent", b, target, "20% rel",
                     abs(b / target - 1.0) <= 0.2))
    distinct = (not ci[0] <= kpz <= ci[1]) and (ci[0] > cic[1] or ci[1] < cic[0])
    crit.append(_row(10, "distinct from KPZ exponent", b - kpz, 0.0,
                     "95% CI excludes the KPZ value and the bulk control CI", distinct))
    out = {"exponent": b, "stderr": sb, "ci95": list(ci), "target": target, "kpz": kpz,
           "control_exponent": bc, "control_stderr": sbc, "control_ci95": list(cic),
           "seconds": time.perf_counter() - t0, "criteria": crit}
    return out, {"flowline_squares": (["level", "side", "hits", "winding_factor", "wf_stderr",
                                       "replays", "rejected_replays", "mass_moment", "mm_stderr", "product",
                                       "control", "control_stderr"], rows)}


# ---------------------------------------------------------------- level lines

def _levelline_chain(seed, key, k, tmax, dt, eta, spacing, levels, region, gamma, m, n_fields,
                     sample_levels, track_eta):
    """Per level: hit count, mean E mu(S) over hit squares, and a sampled check.

    Each hit square carries an m x m lattice at delta = l/m; lattice points
    with CR < 4 delta (circles reaching the curve) are dropped.  E mu(S) is
    the exact sum of delta^2 CR^{g^2/2}; on sample_levels the same sum is
    also estimated from slit-domain field draws.
    """
    base = RandomStream(seed, key)
    ch = loewner.LoewnerChain.sample(base.child(0), k, tmax, dt, eta)
    tr = ch.trace(spacing)
    # coarse blocks are fine for the trace but distort the slit covariance
    ch.eta = track_eta
    gen = base.child(1).generator()
    gp = gamma * gamma / 2.0
    out = []
    for n in levels:
        retracks = 0
        cells = dimension.hit_cells(tr, n, region, polyline=True)
        l = 2.0 ** -n
        delta = l / m
        u = (np.arange(m) + 0.5) * delta
        off = (u[:, None] + 1j * u[None, :]).ravel()
        pts = ((cells[:, 0] + 1j * cells[:, 1]) * l)[:, None] + off[None, :]
        tp = ch.track(pts.ravel())
        cr = tp.cr.reshape(pts.shape)
        keep = tp.alive.reshape(pts.shape) & (cr >= 4 * delta)
        exact = np.where(keep, delta * delta * np.where(keep, cr, 1.0) ** gp, 0.0).sum(axis=1)
        ratio = np.nan
        # the sampled check needs pairwise kernel values, so it skips points in
        # nearly pinched-off pockets; their CRs still count in the exact sum
        usable = keep.ravel() & field.resolved(tp.g)
        if n in sample_levels and usable.any():
            idx = np.nonzero(usable)[0]
            z = pts.ravel()[idx]
            model = field.CovarianceModel.half_plane_slit(None, delta)
            try:
                smp = field.GaussianSampler(model.matrix(z, (tp.g[idx], tp.log_deriv[idx],
                                                             tp.alive[idx])))
            except field.FactorizationError:
                # block tracking maps each point through a slightly different
                # domain; exact step-by-step tracking maps all of them through
                # the same discrete hull, where the kernel is a true covariance
                retracks += 1
                t0 = loewner.LoewnerChain(ch.driving, k, 0.0).track(z)
                ok = field.resolved(t0.g, t0.alive)
                z, idx = z[ok], idx[ok]
                smp = field.GaussianSampler(model.matrix(z, (t0.g[ok], t0.log_deriv[ok], t0.alive[ok])))
            h = smp.draw(gen, n_fields)
            mc = (delta ** gp * delta * delta * np.exp(gamma * h)).sum(axis=1).mean()
            ratio = float(mc / (delta * delta * tp.cr[idx] ** gp).sum())
        out.append((len(cells), float(exact.mean()), float(keep.mean()), ratio, retracks))
    return out


def levelline_bound(p, seed=0, workers=1):
    """Mean mass of squares hitting a kappa = 4 curve, in its own slit domain.

    With N(l) ~ l^-d hit squares of mean mass ~ l^a, Jensen gives
    E sum mu(S)^q <= N(l) (E mu(S))^q, so the quantum dimension is at most d/a.
    """
    k, g = p["kappa"], p["gamma"]
    levels = list(p["levels"])
    t0 = time.perf_counter()
    tasks = [(seed, (11, c), k, p["t_max"], p["dt"], p["eta"], p["spacing"], levels,
              tuple(p["region"]), g, p["m"], p["n_fields"], tuple(p["sample_levels"]),
              p["track_eta"])
             for c in range(p["n_chains"])]
    res = np.array(_map(_levelline_chain, tasks, workers))  # chain, level, field
    counts, mass, kept, ratio = res[:, :, 0], res[:, :, 1], res[:, :, 2], res[:, :, 3]
    retracks = res[:, :, 4].sum(0).astype(int)

    def fit(idx):
        c, mm = counts[idx], mass[idx]
        pooled = (mm * c).sum(0) / c.sum(0)
        a = -dimension.regression_slope(levels, np.log2(pooled))[0]
        d = dimension.regression_slope(levels, np.log2(c.mean(0)))[0]
        return a, d, pooled

    a, d, pooled = fit(slice(None))
    gen = RandomStream(seed, (11, 10 ** 6)).generator()
    boot = np.array([fit(gen.integers(0, len(res), len(res)))[:2] for _ in range(p["n_boot"])])
    sa, sd = boot.std(axis=0, ddof=1)
    qbound = d / a
    target_a = 2 + g * g / 2
    bound = 3.0 / (4.0 + g * g)
    crit = [_row(11, "square mass exponent", a, target_a, ">= 2+g^2/2-0.1", a >= target_a - 0.1),
            _row(11, "quantum dimension bound d/a", qbound, bound, "<= 3/(4+g^2)+0.05",
                 qbound <= bound + 0.05)]
    rows = [[n, counts[:, j].mean(), pooled[j], kept[:, j].mean(),
             np.nanmean(ratio[:, j]) if np.isfinite(ratio[:, j]).any() else np.nan, retracks[j]]
            for j, n in enumerate(levels)]
    out = {"mass_exponent": a, "mass_exponent_stderr": float(sa), "euclidean_dimension": d,
           "euclidean_dimension_stderr": float(sd), "quantum_dimension_bound": qbound,
           "seconds": time.perf_counter() - t0, "criteria": crit}
    return out, {"levelline": (["level", "mean_hits", "mean_square_mass", "kept_fraction",
                                "sampled_over_exact", "exact_retracks"], rows)}


# ---------------------------------------------------------------- geometry

def _geometry_domain(seed, key, p):
    """All per-domain geometry checks for one sampled chain."""
    k = p["kappa"]
    ch = loewner.LoewnerChain.sample(RandomStream(seed, key), k, p["t_max"], p["dt"], p["eta"])
    # trace and oracle share one discretization, so distances and CRs agree
    ch.eta = p["track_eta"]
    tr = ch.trace(p["spacing"])

    def oracle(z):
        return ch.cr(z)

    dec = dimension.cr_whitney_decompose(oracle, tuple(p["region"]), p["max_level"], strict=False)
    whitney_bad = int(np.sum(~dec.satisfied()))
    # Koebe sandwich.  Bridged gaps are chords, not hull, so the lower side
    # (d >= CR/4) measures to genuine hull points only, an upper bound on d;
    # the upper side allows for the trace spacing.
    cr = dec.cr
    d = loewner.hull_distance(dec.centers, tr)
    d_hull = loewner.hull_distance(dec.centers, tr[ch.on_hull])
    koebe_bad = int(np.sum((cr / 4.0 > d_hull) | (d - p["spacing"] > cr)))

    def winding(z):
        pts = ch.track(z)
        return pts.winding, pts.alive

    wstats, _, _ = dimension.whitney_winding_check(dec, winding)
    model = field.CovarianceModel.half_plane_slit(ch, 2.0 ** -p["max_level"])
    gstats = dimension.whitney_green_check(dec, model, lambda z: loewner.hull_distance(z, tr))
    # lower-bound neighbors around centers with CR in [l/3, l/2]
    lower = []
    for n in p["lower_levels"]:
        sq = core.squares_in_region(tuple(p["region"]), n)
        c, ok = oracle(np.array([q.center for q in sq]))
        l = 2.0 ** -n
        cand = [q for q, cc, o in zip(sq, c, ok) if o and l / 3 <= cc <= l / 2]
        for q in cand[: p["lower_per_level"]]:
            lower.append(dimension.lower_bound_neighbors(oracle, q.center, q.side)[1])
    return (whitney_bad, koebe_bad, len(dec.squares), wstats, gstats, dec.discarded, lower)


def _curve_mass_chain(seed, key, k, p):
    base = RandomStream(seed, key)
    ch = loewner.LoewnerChain.sample(base.child(0), k, p["t_max"], p["dt"], p["eta"])
    tr = ch.trace(p["spacing"])
    m, _ = dimension.curve_mass(base.child(1), tr, p["mass_levels"], tuple(p["region"]),
                                p["gamma"], p["mass_fields"])
    return m


def whitney_stats(p, seed=0, workers=1):
    """CR-Whitney inequalities, Koebe, winding oscillation and Green deviation."""
    t0 = time.perf_counter()
    tasks = [(seed, (12, c), p) for c in range(p["n_domains"])]
    res = _map(_geometry_domain, tasks, workers)
    whitney_bad = sum(r[0] for r in res)
    koebe_bad = sum(r[1] for r in res)
    n_sq = sum(r[2] for r in res)
    wlev, spread = {}, {}
    for r in res:
        for n, v in r[3].items():
            wlev.setdefault(n, []).append(v)
        for n, v in r[4].items():
            spread.setdefault(n, []).append(v[2])
    # per level: the percentile over domains of the per-domain p99, and max spread
    w99 = {int(n): float(np.median(v)) for n, v in sorted(wlev.items())}
    sp = {int(n): float(np.max(v)) for n, v in sorted(spread.items())}
    lo, hi = p["osc_levels"]
    osc_ratio = w99.get(hi, np.nan) / w99.get(lo, np.nan)
    g0, g1 = p["green_levels"]
    span = [v for n, v in sp.items() if g0 <= n <= g1]
    green_range = max(span) - min(span) if len(span) >= 2 else np.nan
    lower = [ok for r in res for ok in r[6]]
    crit = [_row(12, "CR-Whitney inequalities", whitney_bad, 0, "no violations", whitney_bad == 0),
            _row(12, "Koebe sandwich", koebe_bad, 0, "no violations", koebe_bad == 0),
            _row(12, "winding oscillation level-independent", osc_ratio, 1.5,
                 f"p99 level {hi} <= 1.5 x level {lo}", osc_ratio <= 1.5),
            _row(12, "Green deviation spread level-independent", green_range, 1.0,
                 f"max-min of spread over levels {g0}..{g1} < 1", green_range < 1.0),
            _row(12, "lower-bound neighbor squares", sum(not x for x in lower), 0,
                 f"no violations ({len(lower)} checked)", len(lower) > 0 and all(lower))]
    rows = [["winding_p99", n, v] for n, v in w99.items()] + \
           [["green_spread", n, v] for n, v in sp.items()]
    out = {"winding_p99": w99, "green_spread": sp, "squares": n_sq,
           "discarded": int(sum(r[5] for r in res)), "lower_bound_checks": len(lower)}
    tables = {"whitney": (["statistic", "level", "value"], rows)}
    if p.get("mass_kappas"):
        s, t = curve_mass(p, seed, workers)
        crit += s.pop("criteria")
        out["curve_mass"] = s
        tables.update(t)
    out["seconds"] = time.perf_counter() - t0
    out["criteria"] = crit
    return out, tables


def curve_mass(p, seed=0, workers=1):
    """Total Liouville mass of cells hitting the curve shrinks with the level."""
    levels = list(p["mass_levels"])
    crit, rows, out = [], [], {}
    for ki, k in enumerate(p["mass_kappas"]):
        tasks = [(seed, (13, ki, c), k, p) for c in range(p["mass_chains"])]
        M = np.array(_map(_curve_mass_chain, tasks, workers))
        mean = M.mean(0)
        b, _ = dimension.regression_slope(levels, -np.log2(mean))
        dec = bool(np.all(np.diff(mean) < 0))
        out[f"kappa_{k:g}"] = {"exponent": b, "means": mean.tolist()}
        for j, n in enumerate(levels):
            rows.append([k, n, mean[j], M[:, j].std(ddof=1) / math.sqrt(len(M))])
        crit.append(_row(12, f"curve mass decreasing kappa={k:g}", b, 0.0, "> 0 and monotone",
                         b > 0 and dec))
    out["criteria"] = crit
    return out, {"curve_mass": (["kappa", "level", "mean_mass", "stderr"], rows)}


# ---------------------------------------------------------------- calculators

def kpz_table(p, seed=0, workers=1):
    g = p["gamma"]
    t0 = time.perf_counter()
    ks = np.linspace(p["kappa_min"], p["kappa_max"], p["kappa_points"])
    rows, worst, order = [], 0.0, True
    for k in ks:
        d = 1 + k / 8
        qk = core.kpz_inverse(d, g)
        qf = core.flowline_inverse(d, k, g)
        rt = max(abs(core.kpz_forward(qk, g) - d), abs(core.flowline_relation(qf, k, g) - d))
        x = core.kpz_ds(qk, g)
        rt = max(rt, abs(core.kpz_ds(core.kpz_ds_inverse(x, g), g) - x))
        worst = max(worst, rt)
        order &= qf <= qk + 1e-15
        rows.append([k, d, qk, qf])
    diff = np.array([r[2] - r[3] for r in rows])
    ends = diff[0] < 0.05 * diff.max() and diff[-1] < 0.05 * diff.max()
    el = time.perf_counter() - t0
    crit = [_row(13, "q_flowline <= q_kpz", float(order), 1.0, "row-wise", order),
            _row(13, "equality trend at both ends", float(max(diff[0], diff[-1])), 0.0,
                 "end gaps < 5% of max gap", ends),
            _row(13, "round trips", worst, 0.0, "< 1e-12", worst < 1e-12),
            _row(13, "calculator runtime", el, 1.0, "< 1 s", el < 1.0)]
    return {"max_roundtrip_error": worst, "seconds": el, "criteria": crit}, {
        "kpz_table": (["kappa", "d", "q_kpz", "q_flowline"], rows)}


# ---------------------------------------------------------------- registry

DEFAULTS = {
    "spectral-check": dict(kappas=[2.0, 8 / 3, 3.0, 4.0, 6.0], M=2000, n_spectrum=6,
                           survival_paths=0, survival_T=[4.0, 8.0],
                           survival_kappas=[2.0, 4.0, 6.0], survival_dt=2e-3,
                           survival_shard=100_000),
    "winding-variance": dict(kappas=[2.0, 4.0], T=[6.0, 8.0, 10.0], c=1.0, n_paths=20_000,
                             sampler="auto", dt=1e-3, shard=5_000, ks_samples=10_000,
                             ks_kappa=2.0, ks_level=1.5, ks_step_eps=[0.04, 0.02, 0.01],
                             ks_diffusion_factor=3),
    "winding-moments": dict(kappa=2.0, lams=[0.5, 1.0], T=[6.0, 8.0, 10.0], c=1.0,
                            n_paths=80_000, sampler="auto", dt=1e-3, shard=10_000,
                            compare_T=8.0, compare_paths=5_000, symmetrize=True),
    "scaling-check": dict(gamma=1.0, n_points=20, delta=2.0 ** -6, n_fields=10_000,
                          qs=[0.3, 0.5, 0.8], ball_levels=[3, 4, 5, 6], ball_ratio=8,
                          ball_fields=100_000, ball_chunk=10_000, segment=[-0.25, 0.25, 0.1],
                          segment_levels=[3, 4, 5, 6, 7, 8], segment_fields=500),
    "sle-dimension": dict(kappas=[2.0, 4.0], n_chains=200, levels=[3, 4, 5, 6, 7, 8],
                          t_max=0.25, dt=1e-6, eta=0.3, spacing=2.0 ** -10,
                          region=[-1.0, 1.0, 0.0, 2.0]),
    "flowline-square-scaling": dict(kappa=2.0, gamma=1.0, q=0.5, C=3.0, levels=[6, 8, 10],
                                    n_chains=400_000, chain_shard=50_000, step_eps=0.005,
                                    m=8, n_replay=150, n_fields=400, max_tries=100_000,
                                    control_fields=40_000, control_chunk=10_000),
    "levelline-bound": dict(kappa=4.0, gamma=1.0, n_chains=60, levels=[3, 4, 5, 6, 7],
                            t_max=0.25, dt=1e-6, eta=0.3, spacing=2.0 ** -10,
                            region=[-0.5, 0.5, 0.0, 1.0], m=4, n_fields=200,
                            sample_levels=[3, 4, 5], n_boot=400, track_eta=0.1),
    "whitney-stats": dict(kappa=2.0, n_domains=50, t_max=0.25, dt=1e-5, eta=0.3,
                          spacing=2.0 ** -10, region=[-1.0, 1.0, 0.0, 2.0], max_level=7,
                          osc_levels=[4, 6], green_levels=[3, 7], gamma=1.0, track_eta=0.1,
                          lower_levels=[3, 4, 5], lower_per_level=5,
                          mass_kappas=[2.0, 4.0, 6.0], mass_chains=20, mass_levels=[3, 4, 5, 6, 7],
                          mass_fields=100),
    "curve-mass": dict(gamma=1.0, mass_kappas=[2.0, 4.0, 6.0], mass_chains=20,
                       mass_levels=[3, 4, 5, 6, 7], mass_fields=100, t_max=0.25, dt=1e-5, eta=0.3,
                       spacing=2.0 ** -10, region=[-1.0, 1.0, 0.0, 2.0]),
    "kpz-table": dict(gamma=1.0, kappa_min=0.01, kappa_max=7.99, kappa_points=799),
}

RUNNERS = {
    "spectral-check": spectral_check,
    "winding-variance": winding_variance,
    "winding-moments": winding_moments,
    "scaling-check": scaling_check,
    "sle-dimension": sle_dimension,
    "flowline-square-scaling": flowline_square_scaling,
    "levelline-bound": levelline_bound,
    "whitney-stats": whitney_stats,
    "curve-mass": curve_mass,
    "kpz-table": kpz_table,
}

# criteria each experiment can report on
COVERS = {
    "spectral-check": [1, 2, 3], "winding-variance": [4, 6], "winding-moments": [5],
    "scaling-check": [7, 8], "sle-dimension": [9], "flowline-square-scaling": [10],
    "levelline-bound": [11], "whitney-stats": [12], "curve-mass": [12], "kpz-table": [13],
}


_COUNT_KEYS = ("M", "n_", "_paths", "_fields", "_chains", "_samples", "_shard", "shard", "_chunk",
               "_points", "_replay", "_tries", "_boot", "_per_level", "m", "_factor", "n_spectrum",
               "n_domains", "max_level")
# zero switches the corresponding sub-check off
_OPTIONAL_COUNTS = ("survival_paths", "ks_samples", "lower_per_level")
_POSITIVE_KEYS = ("dt", "t_max", "spacing", "delta", "step_eps", "c", "C", "ball_ratio",
                  "survival_dt", "q")


def _is_count(key):
    return key in ("M", "m", "max_level", "shard") or any(
        key.startswith(t) or key.endswith(t) for t in _COUNT_KEYS if len(t) > 1)


def validate(experiment, p):
    """Check every parameter against the module preconditions before any sampling."""
    def num(v):
        return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)

    for key, v in p.items():
        vals = v if isinstance(v, (list, tuple)) else [v]
        if key in ("sampler",):
            if v not in ("auto", "rejection", "htransform"):
                raise ValueError(f"sampler must be auto, rejection or htransform, not {v!r}")
            continue
        if key == "symmetrize":
            if not isinstance(v, bool):
                raise ValueError("symmetrize must be true or false")
            continue
        if not all(num(x) for x in vals):
            raise ValueError(f"parameter {key!r} must be finite numbers, got {v!r}")
        if key in ("kappa", "kappas", "ks_kappa", "survival_kappas", "mass_kappas"):
            for x in vals:
                core.KappaParams(float(x))
        elif key == "gamma":
            core.GammaParams(float(v))
        elif "levels" in key:
            if not all(float(x).is_integer() and x >= 0 for x in vals):
                raise ValueError(f"{key!r} must be non-negative integers")
        elif key in ("region", "segment", "T", "survival_T", "lams", "qs", "ks_step_eps"):
            if key == "region" and not (len(vals) == 4 and vals[0] < vals[1] and vals[2] < vals[3]):
                raise ValueError("region must be [x0, x1, y0, y1] with x0 < x1 and y0 < y1")
            if key in ("T", "survival_T", "ks_step_eps") and not all(x > 0 for x in vals):
                raise ValueError(f"{key!r} entries must be positive")
        elif _is_count(key):
            lo = 0 if key in _OPTIONAL_COUNTS else 1
            if not all(float(x).is_integer() and x >= lo for x in vals):
                raise ValueError(f"{key!r} must be an integer >= {lo}")
        elif key in _POSITIVE_KEYS or key.endswith("eta"):
            lo_ok = (lambda x: x >= 0) if key.endswith("eta") else (lambda x: x > 0)
            if not all(lo_ok(x) for x in vals):
                raise ValueError(f"{key!r} must be positive")
    if "kappa_min" in p and not 0 < p["kappa_min"] < p["kappa_max"] < 8:
        raise ValueError("need 0 < kappa_min < kappa_max < 8")
    return p


def params_for(experiment, overrides=None):
    if experiment not in DEFAULTS:
        raise KeyError(f"unknown experiment {experiment!r}")
    p = dict(DEFAULTS[experiment])
    unknown = set(overrides or {}) - set(p) - {"kappa", "workers"}
    if experiment != "spectral-check":
        unknown |= {"kappa"} & set(overrides or {}) - set(p)
    if unknown:
        raise ValueError(f"unknown parameters for {experiment}: {sorted(unknown)}")
    p.update(overrides or {})
    if experiment == "spectral-check" and "kappa" in (overrides or {}):
        p["kappas"] = [float(p.pop("kappa"))]
    p.pop("workers", None)
    return validate(experiment, p)


def run_experiment(experiment, params=None, seed=0, workers=1):
    p = params_for(experiment, params)
    return RUNNERS[experiment](p, seed, workers)
