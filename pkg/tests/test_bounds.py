import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import kl as kl_oracle
from tiltlab.bounds import (
    Check,
    Constants,
    estimate_constants,
    estimate_constants_from,
    fixed_target_bound,
    fixed_target_bound_exact,
    frontier_sweep,
    lambda_max,
    lambda_max_series,
    min_total_weight,
    min_total_weight_series,
    pareto_flags,
    response_log_ratio,
    response_tilt_delta,
    safe_range_amplitude,
    verify_first_order_lemma,
    verify_kl_identity,
    verify_multi_step,
    verify_one_step,
    verify_variance_bound,
)
from tiltlab.errors import (
    ConstantsMissing,
    FamilyMismatch,
    InfeasibleT,
    InsufficientRuns,
    LambdaOutOfRange,
    NonpositiveInput,
    SupportViolation,
)
from tiltlab.scenario import SparseShiftScenario, generate
from tiltlab.tilting import TiltingSchedule, run_schedule, smooth_target
from tiltlab.tree import TokenTree, path_distribution, random_model, random_tree

shapes = st.tuples(st.integers(1, 3), st.integers(1, 3))
seeds = st.integers(0, 2**32 - 1)


def rng(seed):
    return np.random.Generator(np.random.Philox(seed))


@pytest.fixture(scope="module")
def scen():
    return generate(SparseShiftScenario(vocab=3, depth=3, seed=4))


def loose(scen):
    return Constants(C1=10.0, C2=10.0, family=scen.params.family(), n_runs=50, percentile=99.0)


# ---- identity


def test_identity_all_equal():
    Q = random_model(2, 2, rng(1))
    assert verify_kl_identity(Q, Q, Q) == 0.0


@given(shapes, seeds)
def test_identity_symmetric_case_against_oracle(shape, seed):
    g = rng(seed)
    P2, Q = random_model(*shape, g), random_model(*shape, g)
    assert verify_kl_identity(P2, Q, P2) < 1e-10
    f = response_log_ratio(Q, P2)
    lhs = float(path_distribution(P2) @ f - path_distribution(Q) @ f)
    assert abs(lhs - (kl_oracle(P2, Q) + kl_oracle(Q, P2))) < 1e-10
    assert lhs >= 0


@given(shapes, seeds)
def test_identity_random_triples(shape, seed):
    g = rng(seed)
    P, Q, Pt = random_tree(*shape, g), random_model(*shape, g), random_model(*shape, g)
    assert verify_kl_identity(P, Q, Pt) <= 1e-10


def test_identity_support():
    P = TokenTree(1, 1, np.array([[0.5, 0.5]]))
    Q = TokenTree(1, 1, np.array([[1.0, 0.0]]))
    with pytest.raises(SupportViolation):
        verify_kl_identity(P, Q, P)


# ---- first-order lemma


@given(shapes, seeds, st.floats(0.001, 0.3))
def test_tilting_own_distribution_never_helps(shape, seed, lam):
    g = rng(seed)
    Q, target = random_model(*shape, g), random_model(*shape, g)
    assert response_tilt_delta(Q, Q, target, lam) >= -1e-15


def test_null_step():
    g = rng(2)
    P, Q, t = random_tree(2, 3, g), random_model(2, 3, g), random_model(2, 3, g)
    assert abs(response_tilt_delta(P, Q, t, 0.0)) < 1e-15
    assert abs(response_tilt_delta(P, Q, t, 1e-9)) < 1e-8


def test_lemma_report_on_instance():
    g = rng(3)
    P, Q, t = random_model(3, 3, g), random_model(3, 3, g), random_model(3, 3, g)
    rep = verify_first_order_lemma(P, Q, t)
    assert rep["cubic_slope"] > 2.0
    # central difference: error shrinks like h^2
    assert 1.8 < rep["derivative_slope"] < 2.2
    with pytest.raises(LambdaOutOfRange):
        verify_first_order_lemma(P, Q, t, lam_grid=(0.5,))


# ---- variance bound


def test_variance_bound_zero_direction(scen):
    out = verify_variance_bound(scen, model=scen.Q0, target=scen.Q0)
    assert out["aggregate_variance"] == 0.0 and out["min_prefix_margin"] >= 0


def test_variance_bound_no_leakage():
    sc = generate(SparseShiftScenario(vocab=3, depth=3, M_l=0.0, seed=5))
    out = verify_variance_bound(sc)
    assert out["min_prefix_margin"] >= -1e-9
    assert abs(out["aggregate_bound"] - out["aggregate_w_S"] * sc.params.M_h**2) < 1e-12


def test_variance_bound_with_leakage():
    base = generate(SparseShiftScenario(vocab=3, depth=3, seed=6))
    leak = generate(SparseShiftScenario(vocab=3, depth=3, beta=0.3, gamma=0.3, seed=6))
    a, b = verify_variance_bound(base), verify_variance_bound(leak)
    assert a["min_prefix_margin"] >= -1e-9 and b["min_prefix_margin"] >= -1e-9
    assert b["aggregate_margin"] >= -1e-9


# ---- one-step and multi-step


def test_one_step_zero_step(scen):
    target = smooth_target(scen.P2, scen.Q0, 0.01)
    rep = verify_one_step(scen.P1, scen.P2, scen.Q0, target, 0.0, loose(scen), scen)
    assert rep.passed
    assert rep.quantities["delta_P1"] == 0.0 and rep.quantities["delta_P2"] == 0.0


def test_one_step_fixed_point_flagged():
    Q = random_model(2, 2, rng(7))
    P2 = TokenTree(2, 2, Q.cond)
    c = Constants(1.0, 1.0, {}, 50, 99.0)
    rep = verify_one_step(P2, P2, Q, Q, 0.1, c)
    assert abs(rep.quantities["delta_P2"]) < 1e-15
    assert any("degenerate" in f for f in rep.flags)


def test_one_step_guards(scen):
    target = smooth_target(scen.P2, scen.Q0, 0.01)
    with pytest.raises(ConstantsMissing):
        verify_one_step(scen.P1, scen.P2, scen.Q0, target, 0.1, None)
    other = Constants(1.0, 1.0, {"vocab": 99}, 50, 99.0)
    with pytest.raises(FamilyMismatch):
        verify_one_step(scen.P1, scen.P2, scen.Q0, target, 0.1, other, scen)
    with pytest.raises(LambdaOutOfRange):
        verify_one_step(scen.P1, scen.P2, scen.Q0, target, 0.5, loose(scen))


def test_multi_step_single_step_matches_one_step(scen):
    sched = TiltingSchedule((0.1,))
    models, _ = run_schedule(scen.Q0, scen.P2, sched)
    c = loose(scen)
    multi = verify_multi_step(models, sched, scen.P1, scen.P2, scen.P2, c, scen)
    target = smooth_target(scen.P2, scen.Q0, sched.alpha)
    one = verify_one_step(scen.P1, scen.P2, scen.Q0, target, 0.1, c, scen)
    m = {ch.name: ch for ch in multi.checks}
    o = {ch.name: ch for ch in one.checks}
    assert multi.quantities["delta_P1"] == one.quantities["delta_P1"]
    assert abs(m["multi_step.P2_kl"].bound - o["one_step.P2"].bound) < 1e-12
    assert abs(m["multi_step.P1"].bound - o["one_step.P1"].bound) < 1e-12


def test_multi_step_null_schedule(scen):
    sched = TiltingSchedule((0.0,) * 3)
    models, _ = run_schedule(scen.Q0, scen.P2, sched)
    rep = verify_multi_step(models, sched, scen.P1, scen.P2, scen.P2, loose(scen), scen)
    assert rep.quantities["delta_P1"] == 0.0 and rep.quantities["delta_P2"] == 0.0
    assert all(abs(c.margin) == 0.0 for c in rep.checks)


def test_check_margin_tolerance():
    assert Check("x", 1.0, 1.0 - 5e-10).passed
    assert not Check("x", 1.0, 1.0 - 2e-9).passed


# ---- step-budget formulas


def test_min_total_weight_examples():
    # mpmath: 50 (1 - sqrt(1 - 0.004))
    assert abs(min_total_weight(1, 1, 0.1, 100) - 0.10010020050140421) < 1e-15
    assert abs(min_total_weight_series(1, 1, 0.1, 100) - 0.1001) < 1e-15
    assert min_total_weight(1, 1, 0.0, 100) == 0.0
    # discriminant zero: double root T mu / (2 C2)
    mu, C2, delta = 0.5, 2.0, 0.3
    T = 4 * C2 * delta / mu**2
    assert abs(min_total_weight(mu, C2, delta, T) - T * mu / (2 * C2)) < 1e-12
    with pytest.raises(InfeasibleT):
        min_total_weight(mu, C2, delta, 0.99 * T)
    with pytest.raises(NonpositiveInput):
        min_total_weight(0.0, 1, 0.1, 10)


@given(st.floats(0.05, 2), st.floats(0, 2), st.floats(0.0, 1), st.floats(1, 1e4))
def test_min_total_weight_solves_quadratic(mu, C2, delta, T):
    if mu * mu < 4 * C2 * delta / T:
        return
    L = min_total_weight(mu, C2, delta, T)
    assert abs(mu * L - C2 * L * L / T - delta) <= 1e-9 * max(1.0, delta)


def test_lambda_max_examples():
    # mpmath: 2 eps / (T (1 + sqrt(1 + 4 eps / T)))
    assert abs(lambda_max(1, 1, 1, 0.01, 100) - 9.999000199950014e-05) < 1e-18
    assert lambda_max_series(1, 1, 1, 0.01, 100) == 1e-4
    assert lambda_max(1, 1, 1, 0.0, 100) == 0.0
    # M_e -> 0: amplitude ~ sqrt(s), so quadrupling s halves the step
    a = lambda_max(1, safe_range_amplitude(2, 10, 2.0, 1e-6), 1, 1e-3, 10)
    b = lambda_max(1, safe_range_amplitude(8, 10, 2.0, 1e-6), 1, 1e-3, 10)
    assert abs(b / a - 0.5) < 0.05


@given(st.floats(0.1, 5), st.floats(0.1, 5), st.floats(0.01, 5), st.floats(0, 1), st.floats(1, 100))
def test_lambda_max_saturates_budget(H, V, C1, eps, T):
    lam = lambda_max(H, V, C1, eps, T)
    assert abs(T * (H * V * lam + C1 * lam * lam) - eps) <= 1e-12 * max(1.0, eps)


def test_fixed_target_bound_decreasing_and_series():
    vals = [fixed_target_bound(1.0, 0.5, 1.0, 1.0, 0.1, T) for T in (5, 10, 20, 40)]
    assert all(b < a for a, b in zip(vals, vals[1:]))
    big = 1e6
    assert abs(fixed_target_bound(1, 0.5, 1, 1, 0.1, big) - fixed_target_bound_exact(1, 0.5, 1, 1, 0.1, big)) < 1e-9


# ---- constants


def test_constants_vanish_without_movement():
    Q = random_model(2, 2, rng(8))
    P = TokenTree(2, 2, Q.cond)
    scheds = [TiltingSchedule.equal_steps(T, lam, reference="model") for lam in (0.05, 0.2) for T in (1, 3)]
    c = estimate_constants_from([(P, P, Q, P)] * 50, scheds, {"synthetic": True})
    assert c.C1 <= 1e-8 and c.C2 <= 1e-8
    with pytest.raises(InsufficientRuns):
        estimate_constants_from([(P, P, Q, P)] * 3, scheds, {})


def test_constants_stable_under_grid_refinement():
    params = SparseShiftScenario(vocab=3, depth=3)
    coarse = (0.01, 0.05, 0.1, 0.15, 0.2)
    fine = tuple(np.linspace(0.01, 0.2, 2 * len(coarse) - 1))
    a = estimate_constants(params, coarse)
    b = estimate_constants(params, fine)
    assert abs(b.C1 - a.C1) < 0.2 * a.C1
    assert abs(b.C2 - a.C2) < 0.2 * a.C2


# ---- sweep


def test_sweep_zero_column(scen):
    rows = frontier_sweep(scen, [0.0, 0.1], [1, 5], ["none", "talr"])
    assert len(rows) == 8
    for r in rows[:4]:
        assert r["domain_gain"] == 0.0 and r["general_change"] == 0.0
    assert all(r["status"] == "ok" for r in rows)


def test_sweep_more_steps_at_equal_total_weight_degrades_less():
    worse = 0
    for seed in range(10):
        sc = generate(SparseShiftScenario(vocab=3, depth=3, seed=seed))
        one, twenty = frontier_sweep(sc, [0.2], [1], ["none"])[0], frontier_sweep(sc, [0.01], [20], ["none"])[0]
        worse += -twenty["general_change"] > -one["general_change"]
    assert worse == 0


def test_pareto():
    rows = [
        {"domain_gain": 1.0, "general_change": -1.0},
        {"domain_gain": 0.5, "general_change": -2.0},
        {"domain_gain": 2.0, "general_change": -0.5},
        {"domain_gain": math.nan, "general_change": 0.0},
    ]
    assert pareto_flags(rows) == [False, False, True, False]
