import csv
import math

import numpy as np
import pytest

from slekpz import field, loewner
from slekpz.core import DomainError, RandomStream, cell_centers
from slekpz.field import CovarianceModel, GaussianSampler


def test_disc_variance_at_center():
    m = CovarianceModel.unit_disc(1 / 16)
    assert field.covariance(m, 0j, 0j) == pytest.approx(math.log(16))
    # diagonal: log 1/delta + log CR
    z = 0.3 + 0.4j
    assert field.covariance(m, z, z) == pytest.approx(math.log(16) + math.log(1 - 0.25))


def test_short_range_part():
    d = 0.01
    r = np.array([0.0, 0.5 * d, d, 1.99 * d, 2 * d, 5 * d])
    s = field.short_range_part(r, d)
    assert s[0] == pytest.approx(-math.log(d))
    assert np.all(np.diff(s) < 0)
    # disjoint circles see the bare logarithm
    assert s[-2:] == pytest.approx(-np.log(r[-2:]))
    cap = field.short_range_part(r, d, "cap")
    assert cap[0] == s[0] and cap[-1] == s[-1]
    with pytest.raises(ValueError):
        field.short_range_part(r, d, "box")


def test_regular_part_on_diagonal_is_log_cr():
    z = np.array([0.1j, 0.5 - 0.2j, -0.7 + 0.1j])
    m = CovarianceModel.unit_disc(0.01)
    assert np.allclose(np.diag(m.tilde_g(z[:, None], z[None, :])), np.log(m.cr(z)))
    chain = loewner.LoewnerChain(loewner.zero_driving(0.25, 1e-5), 0.0)
    s = CovarianceModel.half_plane_slit(chain, 0.01)
    assert s.tilde_g(2j, 2j) == pytest.approx(math.log(3.0), abs=1e-9)
    # off-diagonal values approach the diagonal one
    assert s.tilde_g(2j, 2j + 1e-5) == pytest.approx(math.log(3.0), abs=1e-4)
    h = CovarianceModel.half_plane(0.01)
    assert h.tilde_g(1j, 1j) == pytest.approx(math.log(2.0))


def test_symmetry():
    rng = np.random.default_rng(0)
    z = rng.uniform(-0.6, 0.6, 30) + 1j * rng.uniform(-0.6, 0.6, 30)
    K = CovarianceModel.unit_disc(0.02).matrix(z)
    assert np.array_equal(K, K.T)
    chain = loewner.LoewnerChain.sample(RandomStream(1), 2.0, 0.05, 1e-5)
    zs = rng.uniform(-1, 1, 20) + 1j * rng.uniform(0.8, 1.5, 20)
    m = CovarianceModel.half_plane_slit(chain, 0.02)
    T = m.tilde_g(zs[:, None], zs[None, :])
    assert np.allclose(T, T.T, atol=1e-10)


def test_circle_kernel_is_positive_and_cap_is_not():
    d = 2.0 ** -5
    _, _, z = cell_centers((-0.5, 0.5, -0.5, 0.5), 5)
    K = CovarianceModel.unit_disc(d).matrix(z)
    assert np.linalg.eigvalsh(K)[0] > 0
    for n in (4, 50, 300):
        assert np.linalg.eigvalsh(K[:n, :n])[0] > 0
    C = CovarianceModel.unit_disc(d, "cap").matrix(z)
    assert np.linalg.eigvalsh(C)[0] < 0
    with pytest.raises(field.FactorizationError) as e:
        GaussianSampler(C)
    assert e.value.min_eig < 0


def test_sampled_field_moments():
    m = CovarianceModel.unit_disc(1 / 16)
    z = np.array([0j, 0.25 + 0j, 0.5j])
    f = field.sample_field(RandomStream(2), m, z, n_fields=40000)
    C = np.cov(f.h.T)
    K = m.matrix(z)
    se = np.sqrt((K ** 2 + np.outer(np.diag(K), np.diag(K))) / 40000)
    assert np.all(np.abs(C - K) < 4 * se)
    assert abs(f.h.mean(axis=0)).max() < 4 * math.sqrt(K[0, 0] / 40000)


def test_masses_for_trivial_fields():
    d = 0.01
    z = np.array([0j, 0.5 + 0j])
    f0 = field.CircleAverageField(z, np.zeros((1, 2)), d)
    assert np.allclose(field.liouville_masses(f0, 0.0).masses, d * d)
    assert np.allclose(field.liouville_masses(f0, 1.2).masses, d ** 0.72 * d * d)
    assert np.allclose(field.liouville_masses(f0, 1.2, cell_area=0.5).masses, d ** 0.72 * 0.5)
    f1 = field.CircleAverageField(z, np.random.default_rng(1).normal(size=(3, 2)), d)
    assert np.allclose(field.liouville_masses(f1, 0.0).masses, d * d)


def test_expected_mass_is_cr_power():
    gamma, d = 1.0, 1 / 32
    m = CovarianceModel.unit_disc(d)
    z = np.array([0j, 0.6 + 0j])
    f = field.sample_field(RandomStream(3), m, z, n_fields=100000)
    mu = field.liouville_masses(f, gamma).masses / d ** 2
    ref = m.cr(z) ** (gamma ** 2 / 2)
    se = mu.std(axis=0) / math.sqrt(len(mu))
    assert np.all(np.abs(mu.mean(axis=0) - ref) < 4 * se)


def test_winding_weights():
    d = 0.01
    f = field.CircleAverageField(np.array([1j, 2j]), np.ones((2, 2)), d)
    mu = field.liouville_masses(f, 1.0)
    w = np.array([0.3, -1.0])
    same = field.winding_weighted_masses(mu, w, 4.0, 1.0)
    assert np.array_equal(same.weighted, same.masses)
    k2 = field.winding_weighted_masses(mu, w, 2.0, 1.0)
    chi = 2 / math.sqrt(2) - math.sqrt(2) / 2
    assert np.allclose(k2.weighted, mu.masses * np.exp(-chi * w))
    with pytest.raises(ValueError):
        field.winding_weighted_masses(mu, [0.1, np.nan], 2.0, 1.0)
    with pytest.raises(ValueError):
        field.winding_weighted_masses(mu, [0.1], 2.0, 1.0)


def test_domain_errors():
    with pytest.raises(DomainError):
        CovarianceModel.unit_disc(0.0)
    with pytest.raises(DomainError):
        CovarianceModel.unit_disc(0.1).matrix([0.5, 1.2])
    chain = loewner.LoewnerChain(loewner.zero_driving(0.25, 1e-5), 0.0)
    with pytest.raises(DomainError):
        CovarianceModel.half_plane_slit(chain, 0.01).matrix([0.5j, 2j])


def test_dense_budget_is_enforced():
    n = field.MAX_POINTS + 1
    with pytest.raises(ValueError):
        GaussianSampler(np.broadcast_to(0.0, (n, n)))


def test_grid_sampling_and_csv(tmp_path):
    m = CovarianceModel.unit_disc(2.0 ** -3)
    f = field.sample_field(RandomStream(4), m, ((-0.5, 0.5, -0.5, 0.5), 3), n_fields=2)
    assert f.h.shape == (2, 64) and f.level == 3
    mu = field.liouville_masses(f, 1.0)
    assert mu.total().shape == (2,)
    p = tmp_path / "mu.csv"
    mu.to_csv(p, h=f.h, field_index=1)
    rows = list(csv.reader(open(p)))
    assert rows[0] == ["i", "j", "h", "mu", "mu_tilde"]
    assert len(rows) == 65
    assert float(rows[1][2]) == f.h[1, 0] and float(rows[1][3]) == mu.masses[1, 0]
