import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ddg_lab.rng import Rng
from ddg_lab.theory import (Partition, PiecewiseDensity, TheoremViolation, continuous_gap, discrete_gap,
                            discretize, dyadic_partition, empirical_refinement_check, gs_metric,
                            randomized_suite, sign_constant_pair, theorem_check, uniform)

GRID = 64  # every oracle density below has breakpoints on multiples of 1/GRID


def grid_density(weights):
    """Density with one cell per grid step (many may be zero)."""
    w = np.asarray(weights, dtype=float)
    return PiecewiseDensity.normalized(np.linspace(0, 1, w.size + 1), w)


def oracle_gaps(p_w, q_w, k, b_phi):
    """Brute force on the 1/GRID lattice: every cell has constant density."""
    p = np.asarray(p_w, float) / np.sum(p_w) * GRID
    q = np.asarray(q_w, float) / np.sum(q_w) * GRID
    w = b_phi * sum(abs(p[i] - q[i]) / GRID for i in range(GRID))
    per = GRID // k
    wd = 0.0
    for v in range(k):
        mp = sum(p[i] / GRID for i in range(v * per, (v + 1) * per))
        mq = sum(q[i] / GRID for i in range(v * per, (v + 1) * per))
        wd += abs(mp - mq)
    return w, b_phi * wd


weights = st.lists(st.sampled_from([0.0, 0.0, 0.5, 1.0, 2.0, 3.5]), min_size=GRID, max_size=GRID).filter(
    lambda w: sum(w) > 0)


# -- examples -------------------------------------------------------------

def test_uniform_halves():
    p = uniform(0.0, 0.5, (0.0, 1.0))
    q = uniform(0.5, 1.0, (0.0, 1.0))
    assert continuous_gap(p, p) == 0.0
    assert continuous_gap(p, q, 1.0) == 2.0
    one = Partition.uniform(0, 1, 1)
    two = Partition.uniform(0, 1, 2)
    assert discrete_gap(discretize(p, one), discretize(q, one)) == 0.0
    assert discrete_gap(discretize(p, two), discretize(q, two)) == 2.0
    d = discretize(p, two)
    assert d.atoms.tolist() == [0.25, 0.75] and d.masses.tolist() == [1.0, 0.0]


def test_discretize_examples():
    p = uniform(0.0, 1.0)
    single = discretize(p, Partition.uniform(0, 1, 1))
    assert single.atoms.tolist() == [0.5] and single.masses.tolist() == [1.0]
    five = discretize(p, Partition.uniform(0, 1, 5))
    assert np.allclose(five.masses, 0.2, rtol=0, atol=1e-15)


def test_equal_distributions_give_zero_gaps():
    p = grid_density(np.arange(GRID) % 5 + 1.0)
    rep = theorem_check(p, p, Partition.uniform(0, 1, 8), 3.0)
    assert rep.continuous_gap == 0.0 and rep.discrete_gap == 0.0 and rep.equality


def test_invalid_densities():
    with pytest.raises(ValueError):
        PiecewiseDensity(np.array([0.0, 0.5, 1.0]), np.array([2.5, -0.5]))
    with pytest.raises(ValueError):
        PiecewiseDensity(np.array([0.0, 1.0]), np.array([0.9]))
    with pytest.raises(ValueError):
        PiecewiseDensity(np.array([0.0, 0.0, 1.0]), np.array([1.0, 1.0]))


def test_partition_must_match_support():
    with pytest.raises(ValueError):
        discretize(uniform(0, 1), Partition.uniform(0, 2, 2))


# -- properties -----------------------------------------------------------

@settings(max_examples=80, deadline=None)
@given(weights, weights, st.sampled_from([1, 2, 4, 8, 16, 32, 64]), st.sampled_from([0.5, 1.0, 3.0]))
def test_gaps_match_brute_force_and_satisfy_inequality(p_w, q_w, k, b_phi):
    p, q = grid_density(p_w), grid_density(q_w)
    rep = theorem_check(p, q, Partition.uniform(0, 1, k), b_phi)
    w, wd = oracle_gaps(p_w, q_w, k, b_phi)
    assert abs(rep.continuous_gap - w) <= 1e-12 * max(1.0, w)
    assert abs(rep.discrete_gap - wd) <= 1e-12 * max(1.0, wd)
    assert rep.discrete_gap <= rep.continuous_gap + 1e-12
    assert abs(sum(rep.interval_continuous) - rep.continuous_gap) <= 1e-12
    assert abs(sum(rep.interval_discrete) - rep.discrete_gap) <= 1e-12


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 32), st.integers(1, 16), st.floats(0.1, 5.0))
def test_sign_constant_pairs_reach_equality(seed, k, b_phi):
    part = Partition.uniform(0, 1, k)
    p, q = sign_constant_pair(Rng(seed), part)
    rep = theorem_check(p, q, part, b_phi)
    assert all(rep.interval_equality)
    assert abs(rep.continuous_gap - rep.discrete_gap) <= 1e-12


@settings(max_examples=40, deadline=None)
@given(weights, weights, st.sampled_from([1, 2, 4, 8, 16, 32]))
def test_refining_never_lowers_discrete_gap(p_w, q_w, k):
    p, q = grid_density(p_w), grid_density(q_w)
    coarse = discrete_gap(discretize(p, Partition.uniform(0, 1, k)), discretize(q, Partition.uniform(0, 1, k)))
    fine = discrete_gap(discretize(p, Partition.uniform(0, 1, 2 * k)), discretize(q, Partition.uniform(0, 1, 2 * k)))
    assert coarse <= fine + 1e-12


def test_randomized_suite_passes():
    res = randomized_suite(0, 200, (0.5, 1.0, 3.0))
    assert res.cases == 600 and res.violations == 0
    assert res.equality_cases == 600 and res.equality_failures == 0
    assert res.max_equality_error <= 1e-12


# -- empirical refinement -------------------------------------------------

def brute_l1(xa, xb, edges):
    """Count by hand: index of the last edge not greater than x, clipped to the end cells."""
    k = len(edges) - 1

    def cell(x):
        i = 0
        while i + 1 < len(edges) and edges[i + 1] <= x:
            i += 1
        return min(i, k - 1)
    ca, cb = Counter(cell(x) for x in xa), Counter(cell(x) for x in xb)
    return sum(abs(ca[c] / len(xa) - cb[c] / len(xb)) for c in range(k))


def test_empirical_identical_and_single_cell():
    x = Rng(0).normal(300)
    assert empirical_refinement_check(x, x, dyadic_partition(-4, 4, 2), dyadic_partition(-4, 4, 5)) == (0.0, 0.0)
    y = Rng(1).normal(200, mean=1.0)
    lc, lf = empirical_refinement_check(x, y, dyadic_partition(-4, 4, 0), dyadic_partition(-4, 4, 4))
    assert lc == 0.0 and lf > 0.0


@pytest.mark.parametrize("seed", range(5))
def test_empirical_dyadic_against_brute_force(seed):
    rng = Rng(seed)
    a = rng.normal(500)
    b = rng.normal(400, mean=0.4, std=1.3)
    coarse, fine = dyadic_partition(-4, 4, 3), dyadic_partition(-4, 4, 6)
    lc, lf = empirical_refinement_check(a, b, coarse, fine)
    assert abs(lc - brute_l1(a, b, coarse.edges.tolist())) <= 1e-12
    assert abs(lf - brute_l1(a, b, fine.edges.tolist())) <= 1e-12
    assert lc <= lf + 1e-12


def test_empirical_rejects_non_refinement():
    x = Rng(0).normal(50)
    with pytest.raises(ValueError):
        empirical_refinement_check(x, x, Partition.uniform(-4, 4, 3), Partition.uniform(-4, 4, 4))
    with pytest.raises(ValueError):
        empirical_refinement_check(np.arange(4), np.arange(4), lambda v: v % 2, lambda v: v % 3)


def test_empirical_label_callables():
    a, b = np.arange(10), np.arange(5, 15)
    lc, lf = empirical_refinement_check(a, b, lambda v: v // 10, lambda v: v)
    assert lc == pytest.approx(1.0, abs=1e-15) and lf == pytest.approx(1.0, abs=1e-15)


def test_negative_bphi_rejected():
    with pytest.raises(ValueError):
        theorem_check(uniform(0, 1), uniform(0, 1), Partition.uniform(0, 1, 2), -1.0)


def test_violation_type():
    assert issubclass(TheoremViolation, AssertionError)


# -- GS -------------------------------------------------------------------

def test_gs_examples():
    assert gs_metric([80, 80, 80]) == 0.0
    assert abs(gs_metric([1, 3]) - math.sqrt(2)) <= 1e-12
    assert abs(gs_metric([0, 0, 0, 4]) - math.sqrt(12)) <= 1e-12
    with pytest.raises(ValueError):
        gs_metric([])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 100), min_size=1, max_size=8), st.floats(-50, 50))
def test_gs_is_shift_invariant(acc, shift):
    assert abs(gs_metric(acc) - gs_metric([a + shift for a in acc])) <= 1e-9
