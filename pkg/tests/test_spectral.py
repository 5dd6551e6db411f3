import math

import numpy as np
import pytest
from scipy import integrate

from slekpz import spectral
from slekpz.core import DomainError

TWO_PI = 2 * math.pi


@pytest.fixture(scope="module")
def sys2():
    return spectral.eigen_solve(2.0, 2000)


@pytest.fixture(scope="module")
def sys4():
    return spectral.eigen_solve(4.0, 2000)


def _scale_quad(x, k):
    return integrate.quad(lambda u: math.sin(u / 2) ** (8 / k - 2), 0, x, epsabs=1e-13)[0]


def test_scale_function_closed_forms():
    x = np.linspace(0.2, 6.0, 7)
    assert np.allclose(spectral.scale_function(x, 4.0), x, atol=1e-12)
    assert spectral.scale_function(math.pi, 2.0) == pytest.approx(math.pi / 2, abs=1e-12)
    assert spectral.scale_function(TWO_PI, 8 / 3) == pytest.approx(4.0, abs=1e-12)
    for k in (2.0, 3.0, 6.0):
        for xx in (0.3, 2.0, 4.5):
            assert spectral.scale_function(xx, k) == pytest.approx(_scale_quad(xx, k), rel=1e-9)
    with pytest.raises(DomainError):
        spectral.scale_function(1.0, 8.0)


def test_greens_function():
    assert spectral.greens_function(math.pi, math.pi, 4.0) == pytest.approx(math.pi / 2)
    g1 = spectral.greens_function(0.1, 3.0, 2.0)
    g2 = spectral.greens_function(3.0, 0.1, 2.0)
    assert g1 == pytest.approx(g2, rel=1e-13)
    S = _scale_quad(TWO_PI, 2.0)
    ref = _scale_quad(0.1, 2.0) * (S - _scale_quad(3.0, 2.0)) / S
    assert g1 == pytest.approx(ref, rel=1e-9)


def test_closed_form_spectrum():
    for k in (2.0, 8 / 3, 3.0, 4.0, 6.0):
        s = spectral.eigen_solve(k, 2000)
        n = np.arange(6)
        ref = (n + 1) * (1 - k / 4 + k * (n + 1) / 8)
        assert np.max(np.abs(s.eigenvalues[:6] - ref) / ref) < 1e-3


def test_kappa4_eigenfunctions_are_sines(sys4):
    x = np.linspace(0.1, TWO_PI - 0.1, 301)
    for i in range(4):
        f = sys4.eigenfunction(i, x)
        ref = np.sin((i + 1) * x / 2)
        c = (f @ ref) / (ref @ ref)
        assert np.max(np.abs(f - c * ref)) < 1e-3 * np.max(np.abs(f))


def test_ground_state_shape():
    x = np.linspace(0.1, TWO_PI - 0.1, 501)
    for k in (2.0, 6.0):
        s = spectral.eigen_solve(k, 2000)
        phi = s.eigenfunction(0, x)
        ref = np.sin(x / 2) ** (8 / k - 1)
        phi = phi / s.eigenfunction(0, np.array([math.pi]))[0]
        assert np.max(np.abs(phi - ref) / ref) < 1e-2
        assert np.all(s.phi[0] > 0) or np.all(s.phi[0] < 0)


def test_orthonormal_in_speed_measure(sys2):
    P = sys2.phi[:6]
    G = (P * (sys2.m * sys2.w)[None, :]) @ P.T
    assert np.max(np.abs(G - np.eye(6))) < 1e-8


def test_inverse_square_sum_converges(sys2):
    lam = sys2.eigenvalues
    tail = np.cumsum(lam[::-1] ** -2.0)[::-1]
    assert np.isfinite(tail[0])
    assert np.all(np.diff(tail) <= 0)


def test_kappa4_survival_first_term(sys4):
    p = spectral.survival_probability(sys4, math.pi, 10.0)
    assert p == pytest.approx(4 / math.pi * math.exp(-5), rel=1e-4)
    assert spectral.survival_probability(sys4, 1e-9, 5.0) < 1e-8
    with pytest.raises(spectral.SeriesDomainError):
        spectral.survival_probability(sys4, math.pi, 0.4)


def test_window_is_difference_of_survivals(sys2):
    a = spectral.window_probability(sys2, 2.0, 5.0, 1.0)
    b = spectral.survival_probability(sys2, 2.0, 5.0) - spectral.survival_probability(sys2, 2.0, 6.0)
    assert a == pytest.approx(b, rel=1e-10)


def test_error_term_small_and_symmetric(sys4):
    assert abs(spectral.error_term(sys4, math.pi, 10.0, 1.0)) < 1e-2
    s2 = spectral.eigen_solve(2.0, 2000)
    assert abs(spectral.conditioned_drift(s2, math.pi, 20.0, 1.0)) < 1e-8


def test_error_term_decay_rate(sys2):
    x = np.linspace(0.3, TWO_PI - 0.3, 401)
    us = [4.0, 6.0, 8.0]
    y = [math.log(np.max(np.abs(spectral.error_term(sys2, x, u, 1.0)))) for u in us]
    slope = np.polyfit(us, y, 1)[0]
    lam = sys2.eigenvalues
    # the symmetric window has no first-mode component, so the decay is
    # set by the second gap and is at least as fast as half the first gap
    assert slope <= -0.5 * (lam[1] - lam[0])
    assert slope == pytest.approx(-(lam[2] - lam[0]), rel=0.2)


def test_everlasting_drift_identity_at_kappa4(sys4):
    x = np.linspace(0.5, TWO_PI - 0.5, 50)
    phi = sys4.eigenfunction(0, x)
    dphi = sys4.eigenfunction(0, x, derivative=True)
    drift = 0.0 + 4.0 * dphi / phi
    assert np.allclose(drift, spectral.everlasting_drift(x), atol=5e-3)


def test_cache_round_trip(tmp_path, sys2):
    spectral.save_cache(sys2, tmp_path / "k2.npz")
    s = spectral.load_cache(tmp_path / "k2.npz", kappa=2.0, M=2000)
    assert np.array_equal(s.eigenvalues, sys2.eigenvalues)
