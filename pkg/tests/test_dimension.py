import math

import numpy as np
import pytest

from slekpz import dimension as dim
from slekpz import field
from slekpz.core import DyadicSquare, RandomStream, kpz_inverse

# half-open segment, so no level picks up an extra cell at the right end
SEGMENT = np.linspace(-0.5, 0.5 - 1e-9, 4000) + 0.1j


def disc_oracle(z):
    z = np.asarray(z, complex)
    return 1.0 - np.abs(z) ** 2, np.abs(z) < 1.0


def test_segment_box_dimension():
    reps = dim.minkowski_contents(SEGMENT, range(3, 10), qs=[0.0], dims=[1.0])
    assert [r.hit_count for r in reps] == [2 ** n for n in range(3, 10)]
    for r in reps:
        assert r.content(0.0) == r.hit_count == r.contents[0.0]
        assert r.euclidean_content[1.0] == pytest.approx(1.0)
    d, _ = dim.euclidean_dimension(reps)
    assert d == pytest.approx(1.0, abs=0.05)
    with pytest.raises(ValueError):
        reps[0].content(0.5)


def test_polyline_cover_fills_gaps():
    z = np.array([0.1 + 0.1j, 0.9 + 0.1j])
    assert len(dim.hit_cells(z, 4)) == 2
    assert len(dim.hit_cells(z, 4, polyline=True)) == 14
    assert len(dim.hit_cells(z, 4, region=(0.0, 0.5, 0.0, 1.0), polyline=True)) == 7


def test_resolution_error():
    with pytest.raises(dim.ResolutionError):
        dim.minkowski_contents(SEGMENT[::100], range(3, 8))
    dim.check_resolution(SEGMENT[::100], 7, ordered=False)


def test_segment_quantum_dimension_follows_kpz():
    reps = dim.liouville_cover_reports(RandomStream(1), SEGMENT, range(3, 8), 1.0, 100)
    th = [dim.exponent_fit(reps, q, n_boot=50)[0] for q in np.linspace(0, 1, 6)]
    assert np.all(np.diff(th) < 0)
    theta0, se0 = dim.exponent_fit(reps, 0.0)
    assert theta0 == pytest.approx(1.0, abs=0.05) and se0 >= 0
    # coarse levels bias the root slightly low
    assert dim.dimension_estimate(reps) == pytest.approx(kpz_inverse(1.0, 1.0), abs=0.05)


def test_fit_needs_four_levels():
    reps = dim.minkowski_contents(SEGMENT, range(3, 6))
    with pytest.raises(ValueError):
        dim.exponent_fit(reps, 0.0, "euclidean")


def test_regression_slope():
    x = np.arange(5.0)
    b, se = dim.regression_slope(x, 2 * x + 1)
    assert b == pytest.approx(2.0) and se == pytest.approx(0.0, abs=1e-12)
    b, se = dim.regression_slope(x, 2 * x, se=np.ones(5))
    assert se == pytest.approx(1 / math.sqrt(10))


def test_whitney_condition_examples():
    q3 = DyadicSquare(3, 0, 0)
    assert q3.center == complex(1 / 16, 1 / 16)
    assert dim.is_cr_whitney(disc_oracle(q3.center)[0], q3.side)
    q2 = DyadicSquare(2, 0, 0)
    assert not dim.is_cr_whitney(disc_oracle(q2.center)[0], q2.side)


def test_disc_decomposition():
    dec = dim.cr_whitney_decompose(disc_oracle, (-1.0, 1.0, -1.0, 1.0), 8)
    assert np.all(dec.satisfied())
    assert dec.oracle_failures > 0
    # kept squares plus discarded ones tile the starting square
    assert dec.area() + dec.discarded_area == pytest.approx(4.0)
    assert math.pi - 0.1 < dec.area() < math.pi
    assert min(dec.levels) == 3 and max(dec.levels) <= 8


def test_strict_upper_bound_raises():
    with pytest.raises(AssertionError):
        dim.cr_whitney_decompose(disc_oracle, (-0.5, 0.5, -0.5, 0.5), 6, min_level=4)
    dec = dim.cr_whitney_decompose(disc_oracle, (-0.5, 0.5, -0.5, 0.5), 6, min_level=4,
                                   strict=False)
    assert not np.all(dec.satisfied())


def test_green_check_on_disc(tmp_path):
    dec = dim.cr_whitney_decompose(disc_oracle, (-1.0, 1.0, -1.0, 1.0), 7)
    model = field.CovarianceModel.unit_disc(1e-3)
    out = dim.whitney_green_check(dec, model, lambda z: 1.0 - np.abs(z))
    assert set(out) == set(dec.levels)
    for lo, hi, spread, n in out.values():
        assert n > 0 and spread < 1.5 and abs(lo) < 2 and abs(hi) < 2
    dec.to_csv(tmp_path / "w.csv")
    assert len(open(tmp_path / "w.csv").readlines()) == len(dec.squares) + 1


def test_winding_check_and_oscillation():
    v = np.array([[0.0, 1.0, -2.0], [3.0, 3.0, 3.0]])
    assert np.array_equal(dim.oscillation(v), [3.0, 0.0])
    assert np.array_equal(dim.oscillation(v + 7.5), dim.oscillation(v))
    dec = dim.cr_whitney_decompose(disc_oracle, (-1.0, 1.0, -1.0, 1.0), 6)
    stats, osc, skipped = dim.whitney_winding_check(
        dec, lambda z: (np.angle(1 - np.conj(z)), np.ones(len(z), bool)))
    assert skipped == 0
    assert all(0 <= s < 1 for s in stats.values())


def test_lower_bound_neighbors():
    side = 1 / 8
    applies, ok = dim.lower_bound_neighbors(disc_oracle, 0.975 + 0j, side)
    assert applies and ok
    applies, _ = dim.lower_bound_neighbors(disc_oracle, 0j, side)
    assert not applies


def test_hit_probability_decreases():
    p, se = dim.hit_probability(RandomStream(2), 2.0, 1j, [2, 4, 6], 3000)
    assert np.all(np.diff(p) < 0) and np.all(se[1:] > 0)
    assert p[-1] > 0


def test_curve_mass_without_field_counts_cells():
    region = (-1.0, 1.0, 0.0, 2.0)
    tr = np.linspace(0, 1.5, 3000) * 1j
    m, se = dim.curve_mass(RandomStream(3), tr, [3, 4, 5], region, 0.0, n_fields=5)
    # gamma = 0: total mass is the number of hit cells above the first row times their area
    assert m == pytest.approx([12 / 64, 24 / 256, 48 / 1024])
    assert np.all(se == 0)
