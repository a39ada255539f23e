"""Seeded verification suites behind ``tiltlab verify-all`` and the acceptance tests.

Each suite returns :class:`SuiteRow` records; a row aggregates one named check
over many instances and keeps the worst margin seen (``bound - measured``, or
``measured - threshold`` for lower-bound checks).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import bounds as B
from .coder import code_length_bits, decode, encode_all, redundancy_bound
from .scenario import SparseShiftScenario, generate, label_only_variant, scenario_rng
from .talr import (
    TalrModulator,
    expected_target_prob,
    objective,
    solve_weights_closed_form,
    solve_weights_oracle,
)
from .tilting import (
    TiltingSchedule,
    approximation_residuals,
    centered_log_shift,
    measure_step_kl,
    run_schedule,
    tilt,
)
from .tree import (
    ModelState,
    expected_code_length,
    leaf_responses,
    node_weights,
    path_distribution,
    random_model,
    random_tree,
)

LEMMA_GRID = (0.01, 0.02, 0.05, 0.1, 0.15, 0.2)
EPS_FIT_GRID = (0.001, 0.002, 0.005, 0.01)
CONSTANT_SEED_BASE = 1_000_000
AUDIT_SEED_BASE = 2_000_000
MATCH_T_GRID = (5, 10, 20, 40)
REFERENCE_RUN = (5, 0.1)  # (T, lambda) whose domain gain sets the matched target


@dataclass
class SuiteRow:
    check: str
    instances: int = 0
    failures: int = 0
    worst_margin: float = math.inf
    details: list = field(default_factory=list, repr=False)

    def record(self, margin: float, ok: bool | None = None, detail=None) -> None:
        self.instances += 1
        ok = (margin >= -B.MARGIN_TOL) if ok is None else ok
        if not ok:
            self.failures += 1
            if detail is not None:
                self.details.append(detail)
        if margin < self.worst_margin:
            self.worst_margin = float(margin)

    @property
    def passed(self) -> bool:
        return self.failures == 0 and self.instances > 0


class Rows(dict):
    """Ordered map ``check -> SuiteRow`` created on first use."""

    def __missing__(self, key):
        row = SuiteRow(key)
        self[key] = row
        return row


def default_family(**kw) -> SparseShiftScenario:
    return SparseShiftScenario(**kw)


def scenarios(family: SparseShiftScenario, seeds: Iterable[int]):
    for seed in seeds:
        yield generate(replace(family, seed=int(seed)))


# --------------------------------------------------------------------------
# lemma battery


def identity_suite(n: int = 1000, seed: int = 0) -> list[SuiteRow]:
    row = SuiteRow("kl_identity")
    rng = scenario_rng(seed, 101)
    for _ in range(n):
        k = int(rng.integers(2, 4))
        d = int(rng.integers(1, 4))
        P = random_tree(k, d, rng, concentration=float(rng.uniform(0.3, 3.0)))
        Q = random_model(k, d, rng)
        Pt = random_model(k, d, rng)
        res = B.verify_kl_identity(P, Q, Pt)
        row.record(1e-10 - res)
    return [row]


def first_order_suite(family: SparseShiftScenario, seeds: Iterable[int], grid=LEMMA_GRID, random_instances: int = 0) -> tuple[list[SuiteRow], list]:
    """Response-level expansion on scenario instances (``P1`` and ``P2``) and random triples."""
    rows = Rows()
    slopes = []

    def one(P, Q, target):
        rep = B.verify_first_order_lemma(P, Q, target, grid)
        slopes.append(rep["cubic_slope"])
        rows["first_order.cubic_slope"].record(rep["cubic_slope"] - 2.7)
        # central differences carry an O(h^2) error
        rows["first_order.derivative_slope"].record(rep["derivative_slope"] - 1.8)

    for scen in scenarios(family, seeds):
        for P in (scen.P1, scen.P2):
            one(P, scen.Q0, scen.target)
        self_delta = B.response_tilt_delta(scen.Q0, scen.Q0, scen.target, grid[-1])
        rows["first_order.self_nonnegative"].record(self_delta)
    for i in range(random_instances):
        rng = scenario_rng(i, 106)
        k = int(rng.integers(2, 4))
        d = int(rng.integers(1, 4))
        one(random_tree(k, d, rng), random_model(k, d, rng), random_model(k, d, rng))
    return list(rows.values()), slopes


def perturbed_update(Q: ModelState, target: ModelState, lam: float, direction: np.ndarray) -> ModelState:
    """A step that follows the tilt to first order with a second-order deviation.

    ``log q_next = log q + lam * log(target / q) + lam**2 * direction`` (then
    normalized), standing in for an update that is only approximately a tilt.
    """
    logits = np.log(Q.cond) + lam * (np.log(target.cond) - np.log(Q.cond)) + lam * lam * direction
    logits -= logits.max(axis=1, keepdims=True)
    out = np.exp(logits)
    out /= out.sum(axis=1, keepdims=True)
    return ModelState(Q.vocab_size, Q.max_depth, out)


def _reach_weighted(Q: ModelState, per_prefix: np.ndarray) -> float:
    reach = node_weights(Q)[: Q.n_prefixes]
    return float(np.dot(reach, per_prefix))


def _approximation_instances(source: str, n: int, seed: int, family: SparseShiftScenario | None):
    if source == "scenario":
        fam = default_family() if family is None else family
        for i in range(n):
            scen = generate(replace(fam, seed=seed + i))
            yield scen.Q0, scen.target, scenario_rng(seed + i, 102)
    elif source == "random":
        for i in range(n):
            rng = scenario_rng(seed + i, 102)
            k = int(rng.integers(2, 5))
            d = int(rng.integers(1, 4))
            yield random_model(k, d, rng, floor=0.02), random_model(k, d, rng, floor=0.02), rng
    else:
        raise ValueError(f"unknown instance source {source!r}")


def approximation_suite(
    n: int = 100,
    seed: int = 0,
    grid=LEMMA_GRID,
    eps_grid=EPS_FIT_GRID,
    source: str = "scenario",
    family: SparseShiftScenario | None = None,
) -> tuple[list[SuiteRow], dict]:
    """Residual of the best tilt against the step size, and the quadratic step-size law.

    The update under test is :func:`perturbed_update` with a seeded Gaussian
    deviation.  ``||s||^2`` and squared residuals are aggregated over prefixes
    with the model's reach probabilities, the same weights under which the
    per-prefix KL values add up to the response-level KL.
    """
    slope_row = SuiteRow("approximation.residual_slope")
    eps_row = SuiteRow("approximation.eps_slope")
    icpt_row = SuiteRow("approximation.eps_intercept")
    slopes, eps_slopes, intercepts = [], [], []
    for Q, target, rng in _approximation_instances(source, n, seed, family):
        direction = rng.normal(size=Q.cond.shape)
        eps, res = [], []
        for lam in grid:
            Qn = perturbed_update(Q, target, lam, direction)
            eps.append(measure_step_kl(Q, Qn))
            r = approximation_residuals(Q, Qn, target)
            res.append(math.sqrt(_reach_weighted(Q, r * r)))
        sl = B._slope(eps, res)
        slopes.append(sl)
        slope_row.record(sl - 0.9)
        e2, s2 = [], []
        for lam in eps_grid:
            Qn = perturbed_update(Q, target, lam, direction)
            e2.append(measure_step_kl(Q, Qn))
            s = centered_log_shift(Q, Qn)
            s2.append(_reach_weighted(Q, np.sum(Q.cond * s * s, axis=1)))
        a, b = np.polyfit(s2, e2, 1)
        eps_slopes.append(a)
        intercepts.append(b)
        eps_row.record(0.05 - abs(a - 0.5))
        icpt_row.record(1e-6 - abs(b))
    stats = {
        "residual_slope_min": float(np.min(slopes)),
        "eps_slope_range": (float(np.min(eps_slopes)), float(np.max(eps_slopes))),
        "eps_intercept_max": float(np.max(np.abs(intercepts))),
    }
    return [slope_row, eps_row, icpt_row], stats


def variance_suite(families: Sequence[SparseShiftScenario], seeds: Iterable[int]) -> list[SuiteRow]:
    rows = Rows()
    seeds = list(seeds)
    for fam in families:
        for scen in scenarios(fam, seeds):
            rep = B.verify_variance_bound(scen)
            rows["variance.prefix"].record(rep["min_prefix_margin"])
            rows["variance.aggregate"].record(rep["aggregate_margin"])
    return list(rows.values())


# --------------------------------------------------------------------------
# step bounds


def family_constants(family: SparseShiftScenario, runs: int = B.MIN_RUNS, grid=B.DEFAULT_GRID, steps=(1, 5)) -> B.Constants:
    return B.estimate_constants(
        family, lam_grid=grid, seeds=range(CONSTANT_SEED_BASE, CONSTANT_SEED_BASE + runs), steps=steps
    )


def random_schedule(rng, alpha: float, reference: str = "uniform") -> TiltingSchedule:
    T = int(rng.choice([1, 2, 5, 10, 20]))
    if rng.random() < 0.5:
        lams = [float(rng.choice(LEMMA_GRID))] * T
    else:
        lams = [float(x) for x in rng.uniform(0.01, 0.2, size=T)]
    return TiltingSchedule(tuple(lams), alpha=alpha, reference=reference)


def bound_suite(
    family: SparseShiftScenario,
    constants: B.Constants,
    pairs: int = 200,
    seed_base: int = AUDIT_SEED_BASE,
    dump_dir: str | Path | None = None,
) -> list[SuiteRow]:
    """One-step and multi-step bounds on randomized (scenario, schedule) pairs."""
    rows = Rows()
    for i in range(pairs):
        scen = generate(replace(family, seed=seed_base + i))
        rng = scenario_rng(seed_base + i, 103)
        sched = random_schedule(rng, family.alpha)
        reports = [B.verify_one_step(scen.P1, scen.P2, scen.Q0, scen.target, sched.lambdas[0], constants, scen=scen)]
        models, _ = run_schedule(scen.Q0, scen.P2, sched, diagnostics=False)
        reports.append(B.verify_multi_step(models, sched, scen.P1, scen.P2, scen.P2, constants, scen=scen))
        P2m = ModelState(scen.P2.vocab_size, scen.P2.max_depth, scen.P2.cond)
        oracle = [scen.Q0]
        for lam in sched.lambdas:
            oracle.append(tilt(oracle[-1], P2m, lam))
        rep_o = B.verify_multi_step(oracle, sched, scen.P1, scen.P2, scen.P2, constants, scen=scen, oracle=True)
        for c in rep_o.checks:
            c.name = "oracle_run." + c.name
        reports.append(rep_o)
        for rep in reports:
            dumped = None
            if not rep.passed and dump_dir is not None:
                dumped = str(B.dump_instance(
                    Path(dump_dir) / f"pair_{i:04d}",
                    {"P1": scen.P1, "P2": scen.P2, "Q0": scen.Q0, "target": scen.target},
                    rep,
                    {"seed": seed_base + i, "lambdas": list(sched.lambdas)},
                ))
            for c in rep.checks:
                rows[c.name].record(c.margin, detail=(i, dumped))
    return list(rows.values())


def matched_runs(scen, T_grid=MATCH_T_GRID, ref=REFERENCE_RUN, modulator_factory=None):
    """Equal-step runs at every ``T`` matched to the reference run's domain gain."""
    alpha = scen.params.alpha
    ref_sched = TiltingSchedule.equal_steps(ref[0], ref[1], alpha=alpha)
    _, d2, _ = B.run_deltas(scen, ref_sched)
    gain = -d2
    out = {}
    for T in T_grid:
        hit = B.match_gain(scen, T, gain, modulator_factory, alpha=alpha)
        out[T] = hit
    return gain, out


def matched_gain_suite(family, seeds, constants: B.Constants, T_grid=MATCH_T_GRID) -> tuple[list[SuiteRow], list]:
    """Degradation at matched domain gain across step counts, and the bound expression in ``T``.

    The bound expression is evaluated twice: with ``mu`` and ``A`` held fixed
    across ``T`` (the smallest measured ``mu_T`` and largest measured ``A`` over
    the grid), and with every run's own measured ``mu_T`` and ``A``.
    """
    mono = SuiteRow("matched_gain.delta_P1_nonincreasing_in_T")
    matched = SuiteRow("matched_gain.within_5pct")
    bound_row = SuiteRow("fixed_target.bound_decreasing_in_T")
    per_run_row = SuiteRow("fixed_target.per_run_bound_decreasing_in_T")
    records = []
    C1, C2 = constants.C1, constants.C2
    for scen in scenarios(family, seeds):
        gain, runs = matched_runs(scen, T_grid)
        d1s, mus, As = [], [], []
        for T in T_grid:
            lam, d1, d2 = runs[T]
            matched.record(0.05 - abs(-d2 - gain) / gain)
            sched = TiltingSchedule.equal_steps(T, lam, alpha=scen.params.alpha)
            models, _ = run_schedule(scen.Q0, scen.P2, sched, diagnostics=False)
            rep = B.verify_multi_step(models, sched, scen.P1, scen.P2, scen.P2, constants, scen=scen)
            mus.append(rep.quantities["mu_T"])
            As.append(rep.quantities["A"])
            d1s.append(d1)
        fixed = [B.fixed_target_bound(max(As), min(mus), C1, C2, gain, T) for T in T_grid]
        own = [B.fixed_target_bound(A, mu, C1, C2, gain, T) for A, mu, T in zip(As, mus, T_grid)]
        steps = np.diff(d1s)
        mono.record(-float(np.max(steps)), ok=bool(np.all(steps <= B.MARGIN_TOL)))
        for row, vals in ((bound_row, fixed), (per_run_row, own)):
            db = np.diff(vals)
            row.record(-float(np.max(db)), ok=bool(np.all(db < 0)))
        records.append({"seed": scen.params.seed, "gain": gain, "delta_P1": d1s, "mu": mus, "A": As,
                        "bound_fixed": fixed, "bound_per_run": own, "lams": [runs[T][0] for T in T_grid]})
    return [mono, matched, bound_row, per_run_row], records


# --------------------------------------------------------------------------
# safe range


def lambda_max_scaling(s_grid=(1, 2, 4, 8, 16), m: float = 32.0, M_h: float = 2.0, M_e: float = 1e-3,
                       H: float = 1.0, C1: float = 1.0, eps_fg: float = 0.01, T: float = 100.0) -> dict:
    lams = [B.lambda_max(H, B.safe_range_amplitude(s, m, M_h, M_e), C1, eps_fg, T) for s in s_grid]
    slope = B._slope(s_grid, lams)
    return {"s": list(s_grid), "lambda_max": lams, "slope": slope}


def safe_range_suite(family, seeds) -> list[SuiteRow]:
    rows = Rows()
    sc = lambda_max_scaling()
    rows["safe_range.slope"].record(0.05 - abs(sc["slope"] + 0.5))
    lm = dict(zip(sc["s"], sc["lambda_max"]))
    rows["safe_range.quadruple_halves"].record(0.1 - abs(lm[16] / lm[4] - 0.5) / 0.5)
    for seed in seeds:
        fam = replace(family, seed=int(seed))
        s_full = generate(fam).stats["s_measured"]
        s_label = generate(label_only_variant(fam)).stats["s_measured"]
        rows["safe_range.label_only_fewer_hard"].record(s_full - s_label, ok=s_label < s_full)
    return list(rows.values())


# --------------------------------------------------------------------------
# TALR


def talr_suite(n: int = 500, seed: int = 0) -> list[SuiteRow]:
    rows = Rows()
    rng = scenario_rng(seed, 104)
    for _ in range(n):
        size = int(rng.integers(1, 101))
        losses = rng.uniform(0.0, 10.0, size=size)
        tau = float(rng.uniform(0.05, 10.0))
        w = solve_weights_closed_form(losses, tau)
        w_or = solve_weights_oracle(losses, tau)
        rows["talr.objective_vs_oracle"].record(objective(w_or, losses, tau) + 1e-9 - objective(w, losses, tau))
        rows["talr.argmin_vs_oracle"].record(1e-6 - float(np.max(np.abs(w - w_or))))
        order = np.argsort(losses, kind="stable")
        rows["talr.monotone_in_loss"].record(-float(np.max(np.diff(w[order]), initial=0.0)))
    p = rng.uniform(0.001, 1.0, size=64)
    ident = np.max(np.abs(solve_weights_closed_form(-np.log(p), 1.0, mode="unnormalized") - p))
    rows["talr.tau_one_identity"].record(1e-15 - ident)
    flat = solve_weights_closed_form(rng.uniform(0, 10, size=32), 1e8)
    rows["talr.tau_large_uniform"].record(1e-6 - float(np.max(np.abs(flat - 1 / 32))))
    sharp = solve_weights_closed_form(np.array([0.5, 0.1, 3.0]), 1e-3)
    rows["talr.tau_small_argmin"].record(1e-12 - abs(1.0 - sharp[1]))
    return list(rows.values())


def curriculum_fraction(model: ModelState, P2, threshold: float = 0.2) -> float:
    """``P2``-visit-weighted share of prefixes whose expected target probability exceeds ``threshold``."""
    reach = node_weights(P2)[: model.n_prefixes]
    e = expected_target_prob(model, P2)
    return float(np.dot(reach, e > threshold) / reach.sum())


def curriculum_suite(family, seeds, epochs: int = 20, lam: float = 0.1) -> tuple[list[SuiteRow], list]:
    row = SuiteRow("curriculum.fraction_nondecreasing")
    traces = []
    for scen in scenarios(family, seeds):
        sched = TiltingSchedule.equal_steps(epochs, lam, alpha=scen.params.alpha)
        models, _ = run_schedule(scen.Q0, scen.P2, sched, modulator=TalrModulator(), diagnostics=False)
        fr = [curriculum_fraction(Q, scen.P2) for Q in models]
        traces.append(fr)
        drop = float(np.max(-np.diff(fr), initial=0.0))
        row.record(-drop, ok=drop <= 0.0)
    return [row], traces


def talr_tradeoff_suite(family, seeds, T: int = REFERENCE_RUN[0]) -> tuple[list[SuiteRow], list]:
    better = SuiteRow("talr_tradeoff.talr_not_worse")
    matched = SuiteRow("talr_tradeoff.within_5pct")
    recs = []
    for scen in scenarios(family, seeds):
        ref = TiltingSchedule.equal_steps(REFERENCE_RUN[0], REFERENCE_RUN[1], alpha=scen.params.alpha)
        d1_none, d2_none, _ = B.run_deltas(scen, ref)
        gain = -d2_none
        hit = B.match_gain(scen, T, gain, TalrModulator, alpha=scen.params.alpha)
        if hit is None:
            better.record(-math.inf, ok=False)
            recs.append({"seed": scen.params.seed, "none": d1_none, "talr": None})
            continue
        lam, d1_talr, d2_talr = hit
        matched.record(0.05 - abs(-d2_talr - gain) / gain)
        better.record(d1_none - d1_talr, ok=d1_talr <= d1_none + B.MARGIN_TOL)
        recs.append({"seed": scen.params.seed, "none": d1_none, "talr": d1_talr, "lam_talr": lam})
    return [better, matched], recs


# --------------------------------------------------------------------------
# coder


def coder_suite(shapes=((2, 1), (2, 2), (2, 3), (2, 4), (3, 1), (3, 2), (3, 3), (3, 4)), seed: int = 0) -> list[SuiteRow]:
    rows = Rows()
    for j, (k, d) in enumerate(shapes):
        rng = scenario_rng(seed + j, 105)
        Q = random_model(k, d, rng)
        P = random_tree(k, d, rng)
        responses = leaf_responses(k, d)
        msgs = encode_all(responses, Q)
        p = path_distribution(P)
        avg_bits = 0.0
        worst_excess = 0.0
        for z, msg, pz in zip(responses, msgs, p):
            rows["coder.round_trip"].record(0.0, ok=decode(msg, Q) == tuple(z))
            ideal = code_length_bits(z, Q)
            R = redundancy_bound(msg.symbol_count)
            rows["coder.redundancy"].record(ideal + R - msg.bit_length)
            rows["coder.floor"].record(msg.bit_length - math.floor(ideal))
            avg_bits += pz * msg.bit_length
            worst_excess = max(worst_excess, R)
        expected = expected_code_length(P, Q) / math.log(2)
        rows["coder.expected_bits"].record(worst_excess - abs(avg_bits - expected))
    return list(rows.values())


# --------------------------------------------------------------------------
# selector table for the CLI

SELECTORS = (
    "all", "identity", "first-order", "approximation", "variance", "one-step", "multi-step",
    "fixed-target", "safe-range", "talr", "curriculum", "coder",
)


def run_selector(selector: str, quick: bool = True, dump_dir=None) -> list[SuiteRow]:
    """Run one suite (or all) at CLI sizes; the acceptance tests use the full sizes."""
    fam = default_family()
    n_small = 10 if quick else 50
    out: list[SuiteRow] = []
    want = (lambda name: selector in ("all", name))
    consts = None
    if any(want(x) for x in ("one-step", "multi-step", "fixed-target")):
        consts = family_constants(fam)
    if want("identity"):
        out += identity_suite(200 if quick else 1000)
    if want("first-order"):
        out += first_order_suite(fam, range(n_small), random_instances=n_small)[0]
    if want("approximation"):
        out += approximation_suite(20 if quick else 100)[0]
    if want("variance"):
        fams = [fam, replace(fam, M_l=0.0), replace(fam, beta=0.05, gamma=0.05)]
        out += variance_suite(fams, range(n_small))
    if want("one-step") or want("multi-step"):
        rows = bound_suite(fam, consts, pairs=40 if quick else 200, dump_dir=dump_dir)
        keep = []
        for r in rows:
            multi = "multi_step" in r.check
            if (multi and want("multi-step")) or (not multi and want("one-step")):
                keep.append(r)
        out += keep
    if want("fixed-target"):
        out += matched_gain_suite(fam, range(5 if quick else 50), consts)[0]
    if want("safe-range"):
        out += safe_range_suite(fam, range(n_small))
    if want("talr"):
        out += talr_suite(100 if quick else 500)
    if want("curriculum"):
        out += curriculum_suite(fam, range(n_small))[0]
    if want("coder"):
        out += coder_suite()
    return out
