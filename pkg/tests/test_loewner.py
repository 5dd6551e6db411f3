import math

import numpy as np
import pytest
from scipy import stats

from slekpz import diffusion, loewner
from slekpz.core import DyadicSquare, RandomStream
from slekpz.loewner import LoewnerChain, TrackedPoints


@pytest.fixture(scope="module")
def straight():
    # zero driving: the hull at time t is the segment [0, 2 sqrt(t) i]
    return loewner.zero_driving(0.25, 1e-5)


def test_zero_driving_map_is_explicit(straight):
    z = np.array([2j, 1 + 1j, 3j, -0.5 + 0.2j])
    ref = np.sqrt(z * z + 1.0)
    ref = np.where(ref.imag < 0, -ref, ref)
    for eta in (0.0, 0.1):
        p = loewner.evolve(TrackedPoints.new(z), straight, eta=eta)
        assert np.allclose(p.g, ref, atol=1e-9)
        assert p.cr[0] == pytest.approx(3.0, abs=1e-9)
        assert p.cr[2] == pytest.approx(2 * math.sqrt(8) * math.sqrt(8) / 3, abs=1e-9)
    assert np.all(p.alive)
    # points on the axis do not wind; others off it do
    assert p.winding[0] == 0.0 and p.winding[2] == 0.0
    assert p.winding[1] != 0.0


def test_points_on_the_slit_are_swallowed(straight):
    p = loewner.evolve(TrackedPoints.new([1j, 0.5j]), straight)
    assert not np.any(p.alive)
    # the tip reaches height h at time h^2 / 4
    assert p.swallow_time == pytest.approx([0.25, 0.0625], abs=1e-4)
    assert p[0].swallow_time is not None


def test_tips_of_straight_slit(straight):
    c = LoewnerChain(straight, 0.0)
    tp = c.tips([0, straight.n_steps // 4, straight.n_steps])
    assert np.allclose(tp, [0, 0.5j, 1j], atol=1e-6)


def test_rejects_points_off_the_half_plane():
    with pytest.raises(ValueError):
        TrackedPoints.new([1.0 + 0.0j])
    with pytest.raises(ValueError):
        loewner.sample_driving(0, 2.0, 1.0, 0.0)


def test_driving_variance():
    ends = np.array([loewner.sample_driving(RandomStream(1, i), 3.0, 0.5, 1e-3).values[-1]
                     for i in range(2000)])
    # Var zeta_t = kappa t
    se = 1.5 * math.sqrt(2 / 2000)
    assert abs(ends.var() - 1.5) < 3 * se
    v = loewner.sample_driving(RandomStream(2), 3.0, 1.0, 1e-5).values
    assert np.sum(np.diff(v) ** 2) == pytest.approx(3.0, rel=0.05)


def test_cr_decreases_along_the_chain():
    d = loewner.sample_driving(RandomStream(3), 2.0, 0.4, 1e-5)
    z = np.array([0.3 + 0.8j, -0.2 + 1.5j])
    prev = 2 * z.imag
    for k in range(1, 5):
        part = loewner.DrivingPath(d.dt, d.values[: k * 10000 + 1], k * 0.1)
        cr = loewner.evolve(TrackedPoints.new(z), part).cr
        assert np.all(cr <= prev + 1e-12)
        prev = cr


def test_chain_winding_matches_diffusion():
    st, w, lcr, _ = loewner.run_chains(RandomStream(4), 2.0, 1j, 2000, step_eps=0.02)
    assert np.all(st == 1)
    assert loewner.diffusion_angle(1j) == pytest.approx(math.pi)
    tau, W, _ = diffusion.simulate_exit_batch(RandomStream(5), math.pi, diffusion.DiffusionConfig(2.0),
                                              2000)
    assert stats.ks_2samp(w, W).pvalue > 0.01
    # starting CR of i is 2, and exit time is the drop in log CR
    assert stats.ks_2samp(math.log(2.0) - lcr, tau).pvalue > 0.01


def test_level_mode_stops_on_the_level():
    lev = math.log(0.5)
    st, w, lcr, _ = loewner.run_chains(RandomStream(6), 2.0, 1j, 300, mode="level", level=lev)
    hit = st == 1
    assert 0 < hit.sum() < 300
    assert np.allclose(lcr[hit], lev)


def test_replay_reproduces_recorded_point():
    st, w, lcr, ts, zs = loewner.record_chain(RandomStream(7), 2.0, 1j, step_eps=0.01)
    g, L, alive = loewner.replay_points(RandomStream(8), ts, zs, [1j], 2.0, step_eps=0.01)
    assert alive[0]
    # replay refines each recorded step with Brownian bridges, so it is a
    # finer discretisation of the same path rather than an exact copy
    assert math.log(2 * g[0].imag) - L[0].real == pytest.approx(lcr, abs=1e-2)
    assert L[0].imag == pytest.approx(w, abs=1e-2)


def test_run_until_cr_and_timeout():
    w, cr, hit = loewner.run_until_cr(RandomStream(9), 2.0, 1j, 0.1, 3.0)
    assert cr > 0 and hit == (0.1 <= cr <= 0.3)
    with pytest.raises(loewner.ChainTimeout):
        loewner.run_until_cr(RandomStream(9), 2.0, 1j, 1e-9, 3.0, t_max=1e-6)


def test_hull_distance():
    tr = np.linspace(0, 1, 101) * 1j
    d = loewner.hull_distance([2j, 0.5 + 0.5j, 3 + 0.1j], tr)
    assert np.allclose(d, [1.0, 0.5, 0.1])


def test_simple_curve_keeps_fjord_points():
    # this chain leaves a point deep in a nearly closed fjord: Im g ~ 5e-10
    # while its CR stays near 0.093; at kappa <= 4 it must stay alive
    ch = LoewnerChain.sample(RandomStream(0, (12, 40)), 2.0, 0.25, 1e-5, eta=0.1)
    z = DyadicSquare(6, 37, 6).center
    p = ch.track([z])
    assert p.alive[0] and p.g[0].imag < 1e-8
    assert p.cr[0] == pytest.approx(0.0929, abs=1e-3)
    # without kappa the generic near-closure threshold applies
    assert not loewner.evolve(TrackedPoints.new([z]), ch.driving, 0.1).alive[0]
