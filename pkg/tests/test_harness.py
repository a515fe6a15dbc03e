import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from tiltedwalk.harness import (EmpiricalDistribution, ExperimentReport, binned_tv,
                                eta_good_census, fdd_compare, fixed_edges, grid_project,
                                ks_critical_value, lattice_edges, meeting_probability,
                                stay_positive_probability, stay_positive_scaling,
                                substream_seeds, tightness_probe, tv_window)
from tiltedwalk.model import make_kernel, make_potential

LAZY = make_kernel({"kind": "lazy-nn", "a": 0.25})
LINEAR = make_potential("linear")


# --- cell projection ----------------------------------------------------------------

def test_project_constant():
    assert np.allclose(grid_project(lambda s: np.ones_like(s), 0.1, 30), 1.0, atol=1e-15)


def test_project_identity_is_cell_midpoint():
    h = 0.05
    r = h * np.arange(1, 41)
    assert np.allclose(grid_project(lambda s: s, h, 40), r - h / 2, atol=1e-14)


@settings(max_examples=20, deadline=None)
@given(st.lists(st.floats(-2, 2), min_size=3, max_size=3), st.floats(0.5, 3.0))
def test_projection_contracts(coeffs, width):
    a, b, c = coeffs
    f = lambda s: (a + b * np.sin(3 * s) + c * np.cos(s / width)) * np.exp(-s)
    h, M = 0.02, 1000
    proj = grid_project(f, h, M)
    r = np.linspace(0, h * M, 200_001)
    assert math.sqrt(h * float(proj @ proj)) <= math.sqrt(np.trapezoid(f(r) ** 2, r)) + 1e-9


# --- empirical distributions -----------------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=200))
def test_ecdf_is_monotone_in_unit_range(xs):
    e = EmpiricalDistribution(xs)
    grid = np.linspace(-1100, 1100, 301)
    F = e.ecdf(grid)
    assert np.all(np.diff(F) >= 0)
    assert F[0] == 0.0 and F[-1] == 1.0


def test_ks_against_scipy():
    x = np.random.default_rng(0).normal(size=500)
    e = EmpiricalDistribution(x)
    assert e.ks(stats.norm.cdf) == pytest.approx(stats.kstest(x, "norm").statistic, abs=1e-12)
    y = np.random.default_rng(1).normal(size=300)
    two = stats.ks_2samp(x, y).statistic
    assert e.ks_two_sample(EmpiricalDistribution(y)) == pytest.approx(two, abs=1e-12)


def test_ks_with_ties_uses_both_limits():
    # all mass at 0.5 against U(0,1): the gap is 1/2 on both sides of the jump
    e = EmpiricalDistribution(np.full(10, 0.5))
    assert e.ks(lambda t: np.clip(t, 0, 1)) == pytest.approx(0.5)


def test_two_sample_null_below_critical_value():
    rng = np.random.default_rng(123)
    hits = 0
    for _ in range(20):
        a = EmpiricalDistribution(rng.exponential(size=10_000))
        b = EmpiricalDistribution(rng.exponential(size=10_000))
        hits += a.ks_two_sample(b) < ks_critical_value(a.n, b.n)
    assert hits >= 19


def test_w1_of_shifted_sample():
    x = np.random.default_rng(2).uniform(size=100_000) + 0.1
    e = EmpiricalDistribution(x)
    grid = np.linspace(-1, 2, 30001)
    assert e.w1(lambda t: np.clip(t, 0, 1), grid) == pytest.approx(0.1, abs=0.01)


def test_empty_sample_rejected():
    with pytest.raises(ValueError):
        EmpiricalDistribution([])


# --- binning ----------------------------------------------------------------------------

def test_edges():
    e = fixed_edges(4, 2.0)
    assert e[:-1].tolist() == [0.0, 0.5, 1.0, 1.5] and e[-1] == np.inf
    le = lattice_edges(0.1, 5, 2.0)
    assert le[0] == 0 and le[-1] == np.inf
    inner = le[1:-1] / 0.1
    assert np.allclose(inner - np.floor(inner), 0.5)
    assert len(set(np.round(np.diff(inner), 9))) == 1


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 2))
def test_binned_tv_properties(seed, d):
    rng = np.random.default_rng(seed)
    a = rng.uniform(0, 4, size=(500, d))
    b = rng.uniform(0, 4, size=(400, d)) ** 1.1
    e = fixed_edges(8, 4.0)
    tv = binned_tv(a, b, e)
    assert 0 <= tv <= 1
    assert binned_tv(a, a, e) == 0
    assert tv == pytest.approx(binned_tv(b, a, e), abs=1e-15)
    # merging cells can only lose distinguishing power
    assert binned_tv(a, b, fixed_edges(4, 4.0)) <= tv + 1e-12


# --- reports ----------------------------------------------------------------------------

def test_report_metric_bookkeeping():
    rep = ExperimentReport("x", {})
    rep.add_metric("a", 1.0)
    with pytest.raises(KeyError):
        rep.add_metric("a", 2.0)
    rep.validate(["a"])
    with pytest.raises(ValueError):
        rep.validate(["a", "b"])
    with pytest.raises(ValueError):
        rep.validate([])
    rep.check("a", 1.0, "<", 2.0)
    assert rep.passed
    rep.check("a", 3.0, "<=", 2.0)
    assert not rep.passed


def test_substreams_are_reproducible_and_distinct():
    a = substream_seeds(7, 5)
    assert a == substream_seeds(7, 5) and len(set(a)) == 5
    assert a != substream_seeds(8, 5)


# --- experiment guards ----------------------------------------------------------------------

def test_fdd_rejects_small_samples():
    with pytest.raises(ValueError):
        fdd_compare(LAZY, LINEAR, [1e-3], [0, 0.5], 999, seed=0)


def test_tv_window_rejects_short_bridges():
    with pytest.raises(ValueError):
        tv_window(LAZY, LINEAR, 1e-3, 1.0, [50, 400], [(1, 1)], 1000, seed=0)
    with pytest.raises(ValueError):
        tv_window(LAZY, LINEAR, 1e-3, 1.0, [400], [(1, 1), (50, 50)], 1000, seed=0)


def test_tightness_trivial_and_monotone():
    rep = tightness_probe(LAZY, LINEAR, [1e-4], [0.5, 10.0], [0.0125, 0.05], 5000, seed=1)
    cols, rows = rep.tables["tightness"]
    assert rep.metrics["max_estimate_eps_ge_10"] == 0.0
    assert rep.metrics["monotone_in_delta"]


# --- stay positive -------------------------------------------------------------------------

def _enumerate_confined(n_points, x, y, cap):
    total = 0.0
    for steps in itertools.product((-1, 0, 1), repeat=n_points - 1):
        path = x + np.concatenate([[0], np.cumsum(steps)])
        if path[-1] == y and path.min() >= 1 and path.max() <= cap:
            total += math.prod({-1: 0.25, 0: 0.5, 1: 0.25}[s] for s in steps)
    return total


@pytest.mark.parametrize("n,m,x,y,eta", [(9, 9, 1, 1, 1.0), (9, 5, 1, 2, 1.0), (8, 8, 2, 1, 0.8)])
def test_stay_positive_matches_enumeration(n, m, x, y, eta):
    cap = math.ceil(2 * eta * math.sqrt(n)) - 1
    assert stay_positive_probability(LAZY, n, m, x, y, eta) == pytest.approx(
        _enumerate_confined(m, x, y, cap), rel=1e-12)
    assert stay_positive_probability(LAZY, n, m, x, y, None) == pytest.approx(
        _enumerate_confined(m, x, y, 10**6), rel=1e-12)


def test_stay_positive_range_guard():
    with pytest.raises(ValueError):
        stay_positive_scaling(LAZY, [400], 1, 1, 2.0, m_fracs=[0.2])
    with pytest.raises(ValueError):
        stay_positive_scaling(LAZY, [400], 100, 1, 2.0)


def test_uncapped_probability_dominates():
    rep = stay_positive_scaling(LAZY, [100, 400], 2, 3, 2.0)
    assert rep.metrics["cap_effect_min"] >= 1.0
    _, rows = rep.tables["stay_positive"]
    assert [r[1] for r in rows] == [100, 400, 34, 134]


# --- meeting -------------------------------------------------------------------------------

def test_equal_starts_always_meet():
    rep = meeting_probability(LAZY, [100], 3, 4, 3, 7, 2.0, 500, seed=0)
    _, rows = rep.tables["meeting"]
    assert rows[0][7] == 1.0


def test_meeting_mc_converges_to_exact():
    for n_samples in (500, 5000):
        rep = meeting_probability(LAZY, [100], 1, 1, 5, 5, 2.0, n_samples, seed=4)
        _, rows = rep.tables["meeting"]
        exact, mc, se = rows[0][1], rows[0][2], rows[0][3]
        assert abs(mc - exact) < 3 * se


def test_meeting_endpoint_guard():
    with pytest.raises(ValueError):
        meeting_probability(LAZY, [100], 1, 1, 50, 5, 2.0, 100, seed=0)


# --- eta-good census --------------------------------------------------------------------------

def test_census_all_low_paths_are_good():
    H = 5.0
    ones = np.ones(10 * 25 + 1, dtype=int)
    c = eta_good_census(ones, ones, 1.0, H)
    assert c["blocks"] == 10 and c["good"] == 10 and c["good_middle"] == c["triples"] == 3
    assert c["far1"] == c["far2"] == 0


def test_census_high_path_has_no_good_blocks():
    H = 5.0
    ones = np.ones(6 * 25 + 1, dtype=int)
    high = np.full_like(ones, 11)
    c = eta_good_census(ones, high, 1.0, H)
    assert c["good"] == 0 and c["far2"] == 6 and c["triples_potential"] == 0


def test_census_needs_three_blocks():
    with pytest.raises(ValueError):
        eta_good_census(np.ones(51), np.ones(51), 1.0, 5.0)
    with pytest.raises(ValueError):
        eta_good_census(np.ones(101), np.ones(100), 1.0, 5.0)
