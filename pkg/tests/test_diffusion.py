import math

import numpy as np
import pytest
from scipy import stats

from slekpz import diffusion, spectral
from slekpz.core import RandomStream
from slekpz.diffusion import ConditioningWindow, DiffusionConfig


@pytest.fixture(scope="module")
def sys2():
    return spectral.eigen_solve(2.0, 2000)


def test_config_validation():
    with pytest.raises(ValueError):
        DiffusionConfig(2.0, dt_base=0.1)
    with pytest.raises(ValueError):
        DiffusionConfig(2.0, alpha_floor=1e-3)
    with pytest.raises(ValueError):
        diffusion.simulate_exit(0, 0.0, DiffusionConfig(2.0))


def test_window_matches_cr_window():
    w = ConditioningWindow.from_cr(2.0, 1e-3, math.e)
    assert w.T == pytest.approx(math.log(2.0) + math.log(1e3) - 1.0)
    assert w.c == pytest.approx(1.0)
    tau = np.array([w.T - 0.1, w.T + 0.5, w.T + 1.1])
    assert list(w.contains_tau(tau)) == [False, True, False]
    assert list(w.contains_cr(w.cr_at(tau))) == [False, True, False]


def test_single_path_terminates_and_records():
    p = diffusion.simulate_exit(RandomStream(1), 2.0, DiffusionConfig(2.0, record_trace=True))
    assert p.tau > 0 and p.exit_side in ("lower", "upper")
    s, a = p.trace
    assert s[0] == 0.0 and a[0] == 2.0
    assert np.all(np.diff(s) > 0)


def test_timeout_carries_partial_path():
    with pytest.raises(diffusion.PathTimeout) as e:
        diffusion.simulate_exit(RandomStream(2), math.pi, DiffusionConfig(6.0), t_max=0.01)
    assert e.value.path is not None


def test_symmetric_start_has_zero_mean_winding():
    _, W, st = diffusion.simulate_exit_batch(RandomStream(3), math.pi, DiffusionConfig(2.0), 20000)
    assert np.all(st > 0)
    assert abs(W.mean()) < 3 * W.std() / math.sqrt(len(W))


def test_antithetic_path_is_mirrored():
    cfg = DiffusionConfig(2.0)
    for seed in range(5):
        a = diffusion.simulate_exit(RandomStream(seed), math.pi, cfg)
        b = diffusion.simulate_exit(RandomStream(seed), math.pi, cfg, antithetic=True)
        # adaptive steps differ slightly once the sides swap, so only approximately
        assert {a.exit_side, b.exit_side} == {"lower", "upper"}
        assert b.tau == pytest.approx(a.tau, rel=5e-3)
        assert abs(a.winding + b.winding) < 0.05


def test_survival_matches_spectral(sys2):
    cfg = DiffusionConfig(2.0)
    n = 100_000
    p, se = diffusion.survival_frequency(RandomStream(5), math.pi, cfg, n, [4.0, 8.0])
    ref = spectral.survival_probability(sys2, math.pi, np.array([4.0, 8.0]))
    assert np.all(np.abs(p - ref) < 3 * se)


def test_rejection_acceptance_rate(sys2):
    cfg = DiffusionConfig(2.0)
    w = ConditioningWindow(8.0, 1.0)
    tau, W, att = diffusion.simulate_conditioned_rejection(RandomStream(6), math.pi, cfg, w, 300)
    assert np.all(w.contains_tau(tau))
    N = att.sum()
    rate = len(tau) / N
    ref = spectral.window_probability(sys2, math.pi, 8.0, 1.0)
    assert abs(rate - ref) < 3 * math.sqrt(ref * (1 - ref) / N)


def test_vacuous_window_is_plain_exit():
    cfg = DiffusionConfig(2.0)
    w = ConditioningWindow(0.0, 1e6)
    tau, W, att = diffusion.simulate_conditioned_rejection(RandomStream(7), 2.0, cfg, w, 3000)
    t2, w2, _ = diffusion.simulate_exit_batch(RandomStream(17), 2.0, cfg, 3000)
    assert np.all(att == 1)
    assert stats.ks_2samp(tau, t2).pvalue > 0.01
    assert stats.ks_2samp(W, w2).pvalue > 0.01


def test_acceptance_guard():
    with pytest.raises(diffusion.AcceptanceError):
        diffusion.simulate_conditioned_rejection(0, math.pi, DiffusionConfig(2.0),
                                                 ConditioningWindow(40.0, 1.0),
                                                 acceptance_estimate=1e-9)


def test_htransform_hits_window_and_agrees_with_rejection(sys2):
    cfg = DiffusionConfig(2.0)
    w = ConditioningWindow(6.0, 1.0)
    tau, Wh, _, clamps = diffusion.simulate_conditioned_htransform(RandomStream(8), math.pi, cfg,
                                                                   w, sys2, 4000)
    assert np.all(w.contains_tau(tau))
    _, Wr, _ = diffusion.simulate_conditioned_rejection(RandomStream(9), math.pi, cfg, w, 1500)
    vh, vr = Wh.var(), Wr.var()
    se = math.sqrt(2 * vh ** 2 / len(Wh) + 2 * vr ** 2 / len(Wr))
    assert abs(vh - vr) < 3 * se


def test_moments():
    W = np.random.default_rng(0).normal(0, 1, 5000)
    m0 = diffusion.moments_from_windings(W, [0.0])[0]
    assert m0.estimate == 1.0 and m0.stderr == 0.0
    plus, minus = diffusion.moments_from_windings(W, [0.5, -0.5], symmetrize=True)
    assert plus.estimate == minus.estimate
    with pytest.raises(diffusion.InsufficientSamples):
        diffusion.moments_from_windings(W[:50], [1.0])


def test_winding_moment_plus_minus_agree(sys2):
    w = ConditioningWindow(8.0, 1.0)
    cfg = DiffusionConfig(2.0)
    W = diffusion.conditioned_windings(RandomStream(10), 2.0, w, 5000, sampler="htransform",
                                       config=cfg, spectral_system=sys2)
    mp, mm = diffusion.moments_from_windings(W, [1.0, -1.0])
    assert abs(mp.estimate - mm.estimate) < 1.96 * (mp.stderr + mm.stderr)
    with pytest.raises(ValueError):
        diffusion.winding_moment(0, 2.0, 3.0, w, 5000)
    with pytest.raises(ValueError):
        diffusion.winding_moment(0, 2.0, 1.0, w, 10)


def test_kappa4_conditioned_variance_grows():
    # at kappa = 4 the angle is a plain Brownian motion; Var(W | window) grows ~ T
    sys4 = spectral.eigen_solve(4.0, 2000)
    cfg = DiffusionConfig(4.0)
    v = []
    for T in (4.0, 8.0):
        W = diffusion.conditioned_windings(RandomStream(11, int(T)), 4.0, ConditioningWindow(T, 1.0),
                                           3000, config=cfg, spectral_system=sys4)
        v.append(W.var())
    assert (v[1] - v[0]) / 4.0 == pytest.approx(1.0, rel=0.3)
