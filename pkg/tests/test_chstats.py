import math

import numpy as np
import pytest
from hypothesis import assume, given, strategies as st
from statsmodels.stats.proportion import proportions_ztest

from cosmicbell import chstats as C
from cosmicbell import polytopes as P
from cosmicbell.errors import ValidationError

TABLE_Z = (0.95347, 0.17608, 0.37180, 0.81156)
MONITORS_A = [(1.0078, 491.6), (1.0053, 584.6), (1.0059, 147.4), (1.0009, 125.2)]
MONITORS_B = [(1.0012, 94.7), (0.9989, 111.6), (0.9985, 78.5), (0.9987, 132.6)]
EPS_A = (0.00295, 0.00217, 0.00483, 0.00419)
EPS_B = (0.00552, 0.00471, 0.00666, 0.00407)


def test_counts_table_validation():
    with pytest.raises(ValidationError):
        C.CountsTable(np.ones(15))
    with pytest.raises(ValidationError):
        C.CountsTable(-np.ones(16))
    with pytest.raises(ValidationError):
        C.CountsTable(np.full(16, 0.5))


def test_counts_from_rows_accumulates():
    t = C.CountsTable.from_rows([(0, 1, 1, 0, 3), (0, 1, 1, 0, 2), (1, 1, 0, 0, 4)])
    assert t.n[1, 0, 0, 1] == 5 and t.total == 9
    assert (t + t).total == 18


def test_table2_j(table2):
    assert table2.total == 31448708
    assert C.ch_j(table2) == pytest.approx(-1.405e-4, abs=1e-7)


def test_j_trivial_tables():
    n = np.zeros(P.SHAPE, dtype=int)
    n[0, 0] = 100
    assert C.ch_j(C.CountsTable(n)) == 0.0
    pr = np.round(P.pr_box().p * 1000).astype(int)
    assert C.ch_j(C.CountsTable(pr)) == pytest.approx(-0.5)


def test_j_requires_all_settings():
    n = np.zeros(P.SHAPE, dtype=int)
    n[0, 0, 0, 0] = 5
    with pytest.raises(ValidationError, match="01"):
        C.ch_j(C.CountsTable(n))


@given(st.lists(st.integers(0, 50), min_size=36, max_size=36))
def test_j_ignores_how_undetected_events_are_labelled(cells):
    # outcomes {0, 1, u}; u and 0 are indistinguishable to J once folded
    n3 = np.array(cells).reshape(3, 3, 2, 2)
    n3[0, 0] += 1
    fold = np.zeros(P.SHAPE, dtype=int)
    for a3 in range(3):
        for b3 in range(3):
            fold[int(a3 == 1), int(b3 == 1)] += n3[a3, b3]
    swapped = n3.copy()
    swapped[[0, 2]] = swapped[[2, 0]]
    swapped[:, [0, 2]] = swapped[:, [2, 0]]
    fold2 = np.zeros(P.SHAPE, dtype=int)
    for a3 in range(3):
        for b3 in range(3):
            fold2[int(a3 == 1), int(b3 == 1)] += swapped[a3, b3]
    assert C.ch_j(C.CountsTable(fold)) == pytest.approx(C.ch_j(C.CountsTable(fold2)), abs=1e-14)


def test_table2_ztests(table2):
    z = C.nosignaling_ztests(table2)
    assert [t.label for t in z] == ["x=0", "x=1", "y=0", "y=1"]
    assert np.allclose([t.p_value for t in z], TABLE_Z, atol=2e-3)


def test_ztest_matches_statsmodels(table2):
    n, N = table2.n, table2.setting_totals
    clicks = n[1].sum(axis=0)
    z, p, _ = C.two_proportion_ztest(clicks[0, 0], N[0, 0], clicks[0, 1], N[0, 1])
    z_ref, p_ref = proportions_ztest([clicks[0, 0], clicks[0, 1]], [N[0, 0], N[0, 1]])
    assert z == pytest.approx(z_ref, rel=1e-10)
    assert p == pytest.approx(p_ref, rel=1e-10)


def test_ztest_examples():
    assert C.two_proportion_ztest(50, 100, 50, 100)[1] == 1.0
    assert C.two_proportion_ztest(9000, 10000, 1000, 10000)[1] < 1e-15
    z, p, degenerate = C.two_proportion_ztest(0, 10, 0, 10)
    assert degenerate and p == 1.0


@given(st.integers(1, 10**6), st.integers(1, 10**6), st.floats(0, 1), st.floats(0, 1))
def test_ztest_symmetry_and_range(n1, n2, f1, f2):
    k1, k2 = int(f1 * n1), int(f2 * n2)
    z, p, _ = C.two_proportion_ztest(k1, n1, k2, n2)
    z2, p2, _ = C.two_proportion_ztest(k2, n2, k1, n1)
    assert 0 < p <= 1
    assert p == pytest.approx(p2, rel=1e-12)
    assert z == pytest.approx(-z2, rel=1e-12, abs=1e-300)


def test_bias_estimates_reproduce_table():
    for (r, snr), eps in zip(MONITORS_A + MONITORS_B, EPS_A + EPS_B):
        assert C.bias_estimate(C.BiasMonitor(r, snr)) == pytest.approx(eps, abs=1e-5)


def test_bias_estimate_limits():
    assert C.bias_estimate(C.BiasMonitor(1.0, 1e12)) == pytest.approx(0.0, abs=1e-9)
    assert C.bias_estimate(C.BiasMonitor(1.0, math.inf)) == 0.0
    assert C.bias_estimate(C.BiasMonitor(math.inf, math.inf)) == 0.5
    with pytest.raises(ValidationError):
        C.BiasMonitor(1.0, 0.0)


@given(st.floats(0.5, 2.0), st.floats(1, 1e4), st.floats(1, 1e4))
def test_bias_estimate_monotone_and_symmetric(r, s1, s2):
    assume(abs(r - 1) > 1e-6)
    lo, hi = sorted((s1, s2))
    assert C.bias_estimate(C.BiasMonitor(r, hi)) <= C.bias_estimate(C.BiasMonitor(r, lo)) + 1e-15
    assert C.bias_estimate(C.BiasMonitor(r, lo)) == pytest.approx(C.bias_estimate(C.BiasMonitor(1 / r, lo)), abs=1e-14)


def test_hoeffding_examples():
    # the table's epsilons are rounded; the bound is quoted for the unrounded ones
    eps2 = C.bias_estimate(C.BiasMonitor(*MONITORS_A[1]))
    c = C.hoeffding_consistency(4072171, 4048210, eps2)
    assert c == pytest.approx(0.99963, abs=5e-5)
    eps1 = C.bias_estimate(C.BiasMonitor(*MONITORS_A[0]))
    tail = 1 - C.hoeffding_consistency(1486191, 1478591, eps1)
    assert tail == pytest.approx(6.35e-8, rel=0.01)
    assert C.hoeffding_log10_tail(1486191, 1478591, eps1) == pytest.approx(math.log10(6.35e-8), abs=0.01)
    # observed max frequency exactly at 1/2 + eps
    assert C.hoeffding_consistency(600, 400, 0.1) == 0.0


@given(st.integers(10, 10**6), st.floats(0.5, 0.6), st.floats(0, 0.2), st.floats(0, 0.2))
def test_hoeffding_monotone(N, f, e1, e2):
    n0 = int(round(f * N))
    n1 = N - n0
    lo, hi = sorted((e1, e2))
    assert C.hoeffding_consistency(n0, n1, lo) <= C.hoeffding_consistency(n0, n1, hi)
    assert C.hoeffding_consistency(n0, n1, lo) <= C.hoeffding_consistency(4 * n0, 4 * n1, lo)


def test_efficiency_products():
    alice = C.EfficiencyBudget(0.939, 0.959, 0.99, 0.948, 0.932)
    bob = C.EfficiencyBudget(0.944, 0.959, 0.99, 0.952, 0.922)
    assert C.heralding_budget(alice) == pytest.approx(0.788, abs=1e-3)
    assert C.heralding_budget(bob) == pytest.approx(0.787, abs=1e-3)
    assert C.heralding_budget(C.EfficiencyBudget(1, 1, 1, 1, 1)) == 1.0
    so = C.element_product([0.9927, 0.996, (0.9946, 4), 0.9993, 0.996, 0.996])
    assert so == pytest.approx(0.959, abs=1e-3)
    assert C.infer_sc(0.788, 0.959, 0.99, 0.948, 0.932) == pytest.approx(0.939, abs=1e-3)
    with pytest.raises(ValidationError):
        C.EfficiencyBudget(1.1, 1, 1, 1, 1)
    with pytest.raises(ValidationError):
        C.infer_sc(0.5, 0.0, 1, 1, 1)
