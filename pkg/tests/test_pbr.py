import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cosmicbell import pbr, polytopes as P
from cosmicbell.errors import ValidationError
from cosmicbell.qsim import QuantumModel, TrialStream, model_behavior, simulate_trials

from oracles import min_kl_to_hull


def test_pvalue_bound_examples():
    assert pbr.pvalue_bound(0.0) == 1.0
    assert pbr.pvalue_bound(math.log(2)) == pytest.approx(0.5)
    assert pbr.pvalue_bound(-5.0) == 1.0
    assert pbr.pvalue_bound(float("nan")) == 1.0


@given(st.floats(-50, 50), st.floats(0, 50))
def test_pvalue_bound_monotone(x, dx):
    assert pbr.pvalue_bound(x + dx) <= pbr.pvalue_bound(x)


def test_constraint_matrix_shapes():
    assert pbr.constraint_matrix(0.01, 0.02).shape == (64, 16)
    assert pbr.constraint_matrix(0.01, 0.02, P.NS).shape == (96, 16)
    with pytest.raises(ValidationError):
        pbr.constraint_matrix(0, 0, "QM")


def test_lhv_vertex_gives_trivial_score():
    for v in P.lhv_vertices():
        R = pbr.build_pbr(v)
        assert R.is_trivial and R.gain == 0.0


def test_pr_box_gain_matches_kl_oracle():
    R = pbr.build_pbr(P.pr_box())
    kl, _ = min_kl_to_hull(P.pr_box().flat, P.lhv_vertices().array())
    assert R.gain == pytest.approx(kl, abs=1e-6)
    assert pbr.gain_rate(R, P.pr_box()) == pytest.approx(kl, abs=1e-6)
    assert pbr.max_constraint(R, 0, 0) <= 1 + 1e-9


def test_table2_with_biases_has_positive_gain(table2):
    fit = P.ml_no_signaling(table2)
    R = pbr.build_pbr(fit, 0.00295, 0.00552)
    assert R.gain > 0
    assert pbr.max_constraint(R, 0.00295, 0.00552) <= 1 + 1e-9


def test_ns_hypothesis_is_trivial_inside_ns(table2):
    fit = P.ml_no_signaling(table2)
    assert pbr.build_pbr(fit, hypothesis=P.NS).is_trivial
    assert pbr.build_pbr(P.pr_box(), hypothesis=P.NS).is_trivial


def test_gain_rate_examples():
    assert pbr.gain_rate(pbr.PbrFunction.trivial(), P.pr_box()) == 0.0
    # R = 2 on a cell carrying half of the trial mass, tiny elsewhere
    p = np.zeros(P.SHAPE)
    p[0, 0] = 0.5
    p[1, 1] = 0.5
    R = np.full(P.SHAPE, 1e-3)
    R[0, 0] = 2.0
    expected = 0.5 * math.log(2) + 0.5 * math.log(1e-3)
    assert pbr.gain_rate(pbr.PbrFunction(R), P.Behavior(p)) == pytest.approx(expected)
    R[1, 1] = 0.0
    assert pbr.gain_rate(pbr.PbrFunction(R), P.Behavior(p)) == -math.inf


def test_pbr_function_validation():
    with pytest.raises(ValidationError):
        pbr.PbrFunction(-np.ones(16))


def _random_behavior(rng):
    kind = rng.integers(3)
    if kind == 0:
        w = rng.dirichlet(np.full(24, 0.5))
        return P.Behavior(w @ P.ns_vertices().array())
    if kind == 1:
        m = QuantumModel(rng.uniform(0.2, 1), tuple(rng.uniform(-180, 180, 2)), tuple(rng.uniform(-180, 180, 2)),
                         rng.uniform(0.7, 1), rng.uniform(0.7, 1))
        return model_behavior(m)
    w = rng.dirichlet(np.full(16, 0.5))
    return P.Behavior(w @ P.lhv_vertices().array())


@given(st.integers(0, 2**31 - 1), st.floats(0, 0.2), st.floats(0, 0.2), st.sampled_from([P.LHV, P.NS]))
def test_constraints_hold_for_random_estimates(seed, epsA, epsB, hyp):
    p = _random_behavior(np.random.default_rng(seed))
    R = pbr.build_pbr(p, epsA, epsB, hyp)
    assert R.R.min() >= 0
    assert pbr.max_constraint(R, epsA, epsB, hyp) <= 1 + 1e-9


def test_gain_equals_min_kl_on_random_behaviors():
    rng = np.random.default_rng(12)
    lhv = P.lhv_vertices().array()
    for _ in range(15):
        p = _random_behavior(rng)
        kl, _ = min_kl_to_hull(p.flat, lhv)
        R = pbr.build_pbr(p)
        assert R.gain == pytest.approx(kl, abs=1e-6)


def test_bias_reduces_gain():
    g0 = pbr.build_pbr(P.pr_box()).gain
    g1 = pbr.build_pbr(P.pr_box(), 0.05, 0.05).gain
    assert 0 < g1 < g0


def test_block_plan_validation():
    with pytest.raises(ValidationError):
        pbr.BlockPlan(((0, 10, 1), (11, 20, 1)), {1: (0, 0)})
    with pytest.raises(ValidationError):
        pbr.BlockPlan(((0, 0, 1),), {1: (0, 0)})
    plan = pbr.BlockPlan.split_periods([1] * 10 + [2] * 6, 4, {1: (0, 0), 2: (0, 0)})
    assert [(b.start, b.stop, b.period) for b in plan.blocks] == [(0, 5, 1), (5, 10, 1), (10, 13, 2), (13, 16, 2)]
    assert plan.n_trials == 16


def _stream(p, n, seed, period=1, q=None):
    return simulate_trials(p, q or P.JointSettingDistribution.uniform(), n, seed, period=period)


def test_single_block_periods_give_p_one():
    s1 = _stream(P.pr_box(), 1000, 1, period=1)
    s2 = _stream(P.pr_box(), 1000, 2, period=2)
    s2 = TrialStream(s2.index + 1000, s2.period, s2.x, s2.y, s2.a, s2.b)
    trials = TrialStream.concat([s1, s2])
    plan = pbr.BlockPlan(((0, 1000, 1), (1000, 2000, 2)), {1: (0, 0), 2: (0, 0)})
    res = pbr.run_blocked(trials, plan)
    assert res.p_value_bound == 1.0
    assert all(b.trivial for b in res.per_block)


def test_run_blocked_detects_pr_box():
    trials = _stream(P.pr_box(), 4000, 3)
    plan = pbr.BlockPlan.split_periods(trials.period, 1000, {1: (0.0, 0.0)})
    res = pbr.run_blocked(trials, plan)
    # three scored blocks of 1000 trials at gain log(4/3)
    assert res.log_product == pytest.approx(3000 * math.log(4 / 3), rel=0.05)
    assert res.p_value_bound < 1e-100
    assert res.per_block[0].trivial and not res.per_block[1].trivial


def test_run_blocked_uses_previous_block_only():
    # period switches behavior halfway; block 3 must be scored with block 2's fit
    a = _stream(P.pr_box(), 1000, 4)
    b = _stream(P.lhv_vertices()[0], 2000, 5)
    b = TrialStream(b.index + 1000, b.period, b.x, b.y, b.a, b.b)
    trials = TrialStream.concat([a, b])
    plan = pbr.BlockPlan(((0, 1000, 1), (1000, 2000, 1), (2000, 3000, 1)), {1: (0, 0)})
    res = pbr.run_blocked(trials, plan)
    assert not res.per_block[1].trivial
    assert res.per_block[2].trivial


def test_run_blocked_input_errors():
    trials = _stream(P.pr_box(), 100, 6)
    with pytest.raises(ValidationError, match="plan covers"):
        pbr.run_blocked(trials, pbr.BlockPlan(((0, 50, 1),), {1: (0, 0)}))
    with pytest.raises(ValidationError, match="unknown period 7"):
        pbr.run_blocked(trials, pbr.BlockPlan(((0, 100, 7),), {1: (0, 0)}))
    with pytest.raises(ValidationError, match="do not all belong"):
        pbr.run_blocked(trials, pbr.BlockPlan(((0, 50, 1), (50, 100, 2)), {1: (0, 0), 2: (0, 0)}))
    bad = TrialStream(trials.index[::-1].copy(), trials.period, trials.x, trials.y, trials.a, trials.b)
    with pytest.raises(ValidationError, match="increasing"):
        pbr.run_blocked(bad, pbr.BlockPlan(((0, 100, 1),), {1: (0, 0)}))


def test_null_validity_at_a_vertex():
    # LHV-vertex data: every scored block must be trivial, so p = 1 always
    v = P.lhv_vertices()[9]
    for seed in range(20):
        trials = _stream(v, 10_000, seed)
        plan = pbr.BlockPlan.split_periods(trials.period, 5000, {1: (0, 0)})
        assert pbr.run_blocked(trials, plan).p_value_bound == 1.0


@pytest.mark.slow
def test_null_validity_on_boundary_behavior():
    # the LHV point closest to a strongly nonlocal behavior, sampled with the
    # most adversarial settings the bias allows
    qm = model_behavior(QuantumModel(1.0, (0.0, 45.0), (22.5, -22.5)))
    _, w = min_kl_to_hull(qm.flat, P.lhv_vertices().array())
    null = P.Behavior(w @ P.lhv_vertices().array())
    eps = 0.02
    q = P.JointSettingDistribution.from_marginals(0.5 + eps, 0.5 - eps, eps, eps)
    pvals = []
    for seed in range(100):
        trials = _stream(null, 20_000, seed, q=q)
        plan = pbr.BlockPlan.split_periods(trials.period, 10_000, {1: (eps, eps)})
        pvals.append(pbr.run_blocked(trials, plan).p_value_bound)
    pvals = np.array(pvals)
    for alpha in (0.01, 0.05, 0.1):
        slack = 3 * math.sqrt(alpha * (1 - alpha) / len(pvals))
        assert np.mean(pvals <= alpha) <= alpha + slack
