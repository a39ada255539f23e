"""Measured code-length changes against the first-order expansions and their bounds.

Two notions of the tilting log-ratio appear at the response level:

* ``f(z) = log P~2(z) - log Q(z)``, the literal response log-ratio.
* ``g(z) = sum_i r_c(a_i | u_i)``, the per-prefix centered directions summed
  along the response.  A per-prefix step of weight ``lam`` shifts
  ``log Q(z)`` by ``lam * g(z) - sum_i phi_{u_i}(lam)`` with
  ``phi_u(lam) = psi_u(lam) - lam * E_q[r_u] >= 0``, so ``-lam * E_P[g]`` is
  the exact first-order change of ``KL(P || Q)`` and the rest is quadratic.

A response-level step instead shifts ``log Q(z)`` by ``lam * f(z) - psi(lam)``;
the expansion in ``lam`` then involves ``f`` only.  The first-order lemma is
checked in that setting.  For per-prefix runs the constants are fitted to the
remainder after the exact first-order term ``-lam * E_P[g]``; the bounds keep
``f`` wherever it appears, and the multi-step domain bound is reported under
both readings of the per-step log-ratio.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    ConstantsMissing,
    FamilyMismatch,
    InfeasibleT,
    InsufficientRuns,
    LambdaOutOfRange,
    NonpositiveInput,
    SupportViolation,
)
from .scenario import Scenario, SparseShiftScenario, generate
from .tilting import (
    TiltingSchedule,
    run_schedule,
    smooth_target,
    tilt,
    tilt_direction,
)
from .tree import (
    ModelState,
    TokenTree,
    divergence,
    dumps,
    kl_paths,
    node_weights,
    path_additive,
    path_distribution,
    path_log_probs,
)

MARGIN_TOL = 1e-9
LAMBDA0 = 0.3
DEFAULT_GRID = (0.01, 0.02, 0.05, 0.1, 0.15, 0.2)
MIN_RUNS = 50
CHI2_GROWTH_FLAG = 100.0


# --------------------------------------------------------------------------
# report types


@dataclass
class Check:
    name: str
    measured: float
    bound: float

    @property
    def margin(self) -> float:
        return self.bound - self.measured

    @property
    def passed(self) -> bool:
        return self.margin >= -MARGIN_TOL

    def row(self) -> dict:
        return {
            "name": self.name,
            "measured": self.measured,
            "bound": self.bound,
            "margin": self.margin,
            "pass": self.passed,
        }


@dataclass
class BoundReport:
    checks: list[Check] = field(default_factory=list)
    quantities: dict = field(default_factory=dict)
    flags: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def worst_margin(self) -> float:
        return min((c.margin for c in self.checks), default=math.inf)

    def add(self, name, measured, bound) -> Check:
        c = Check(name, float(measured), float(bound))
        self.checks.append(c)
        return c

    def rows(self) -> list[dict]:
        return [c.row() for c in self.checks]

    def failures(self) -> list[Check]:
        return [c for c in self.checks if not c.passed]


def dump_instance(path, trees: dict, report: BoundReport | None = None, extra: dict | None = None) -> Path:
    """Write every tree and the report so a failing instance can be replayed."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    for name, tree in trees.items():
        (out / f"{name}.tree").write_text(dumps(tree))
    meta = {"extra": extra or {}}
    if report is not None:
        meta["checks"] = report.rows()
        meta["quantities"] = {k: v for k, v in report.quantities.items() if np.isscalar(v)}
        meta["flags"] = report.flags
    (out / "report.json").write_text(json.dumps(meta, indent=2, default=float))
    return out


# --------------------------------------------------------------------------
# response-level quantities


def _leaves(x) -> np.ndarray:
    return path_distribution(x) if isinstance(x, TokenTree) else np.asarray(x, dtype=np.float64)


def response_log_ratio(Q: ModelState, target: TokenTree) -> np.ndarray:
    """``f(z) = log target(z) - log Q(z)`` in leaf order."""
    return path_log_probs(target) - path_log_probs(Q)


def response_direction(Q: ModelState, target: TokenTree, step=1.0) -> np.ndarray:
    """``sum_i step(u_i) * r_c(a_i | u_i)`` in leaf order (centered under ``Q`` at each prefix)."""
    k, d = Q.shape
    rc = tilt_direction(Q, target)
    step = np.broadcast_to(np.asarray(step, dtype=np.float64), (Q.n_prefixes,))
    return path_additive(k, d, step[:, None] * rc)


def mean(p: np.ndarray, x: np.ndarray) -> float:
    return float(np.dot(p, x))


def var(p: np.ndarray, x: np.ndarray) -> float:
    m = mean(p, x)
    return max(float(np.dot(p, (x - m) ** 2)), 0.0)


def chi_square(P, Q) -> float:
    return divergence("chi_square", _leaves(P), _leaves(Q))


# --------------------------------------------------------------------------
# identity and lemma checks


def verify_kl_identity(P, Q, Ptilde) -> float:
    """``|E_P f - E_Q f - [KL(P||Q) + KL(Q||P~) - KL(P||P~)]|`` with ``f = log P~ - log Q``."""
    p, q, pt = _leaves(P), _leaves(Q), _leaves(Ptilde)
    supp = (p > 0) | (q > 0)
    if np.any(q[p > 0] <= 0) or np.any(pt[supp] <= 0):
        raise SupportViolation("identity needs Q and P~ positive wherever P or Q has mass")
    f = np.zeros_like(p)
    f[supp] = np.log(pt[supp]) - np.log(q[supp])
    lhs = mean(p, f) - mean(q, f)
    rhs = (
        divergence("kl", p, q)
        + divergence("kl", q, pt)
        - divergence("kl", p, pt)
    )
    return abs(lhs - rhs)


def _tilted_leaves(Q, target, lam: float) -> np.ndarray:
    """Response-level interpolation; any real ``lam`` is allowed here."""
    logits = (1.0 - lam) * path_log_probs(Q) + lam * path_log_probs(target)
    logits -= logits.max()
    w = np.exp(logits)
    return w / w.sum()


def response_tilt_delta(P, Q, target, lam: float) -> float:
    """``KL(P || Q_lam) - KL(P || Q)`` for the response-level step."""
    p = _leaves(P)
    logq = path_log_probs(Q)
    logql = np.log(_tilted_leaves(Q, target, lam))
    nz = p > 0
    return float(np.dot(p[nz], logq[nz] - logql[nz]))


def _slope(x, y) -> float:
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    keep = (x > 0) & (y > 0)
    if keep.sum() < 2:
        return math.nan
    return float(np.polyfit(np.log(x[keep]), np.log(y[keep]), 1)[0])


def verify_first_order_lemma(P, Q, target, lam_grid: Sequence[float] = DEFAULT_GRID, h_grid=(1e-2, 5e-3, 2.5e-3)) -> dict:
    """Expansion ``-lam * dE + lam^2/2 * Var_Q(f)`` of the response-level step.

    Reports the log-log slope of the remainder against ``lam`` and a central
    difference estimate of the derivative at zero.
    """
    for lam in lam_grid:
        if not (0.0 < lam <= LAMBDA0):
            raise LambdaOutOfRange(f"lemma grid value {lam} outside (0, {LAMBDA0}]")
    q = path_distribution(Q)
    p = _leaves(P)
    f = response_log_ratio(Q, target)
    dE = mean(p, f) - mean(q, f)
    v = var(q, f)
    deltas, remainders = [], []
    for lam in lam_grid:
        delta = response_tilt_delta(p, Q, target, lam)
        deltas.append(delta)
        remainders.append(abs(delta - (-lam * dE + 0.5 * lam * lam * v)))
    deriv_err = []
    for h in h_grid:
        est = (response_tilt_delta(p, Q, target, h) - response_tilt_delta(p, Q, target, -h)) / (2 * h)
        deriv_err.append(abs(est - (-dE)))
    return {
        "lams": list(lam_grid),
        "delta": deltas,
        "remainder": remainders,
        "cubic_slope": _slope(lam_grid, remainders),
        "first_order": -dE,
        "variance": v,
        "derivative_errors": deriv_err,
        "derivative_slope": _slope(h_grid, deriv_err),
    }


# --------------------------------------------------------------------------
# variance under sparsity


def prefix_hard_mass(model: ModelState, mask: np.ndarray) -> np.ndarray:
    """``q``-mass of the hard set at every prefix."""
    return np.sum(model.cond * mask, axis=1)


def verify_variance_bound(scen: Scenario, model: ModelState | None = None, target=None) -> dict:
    """Per-prefix and position-averaged ``Var_q(f) <= w_S M_h^2 + M_e^2``."""
    model = scen.Q0 if model is None else model
    target = scen.target if target is None else target
    prm = scen.params
    f = np.log(target.cond) - np.log(model.cond)
    q = model.cond
    ef = np.sum(q * f, axis=1)
    v = np.maximum(np.sum(q * f * f, axis=1) - ef * ef, 0.0)
    w = prefix_hard_mass(model, scen.hard_mask())
    bound = w * prm.M_h**2 + prm.M_e**2
    reach = node_weights(model)[: model.n_prefixes]
    pos = reach / reach.sum()
    agg_var = float(np.dot(pos, v))
    agg_w = float(np.dot(pos, w))
    agg_bound = agg_w * prm.M_h**2 + prm.M_e**2
    margins = bound - v
    return {
        "prefix_margins": margins,
        "min_prefix_margin": float(margins.min()),
        "aggregate_variance": agg_var,
        "aggregate_w_S": agg_w,
        "aggregate_bound": agg_bound,
        "aggregate_margin": agg_bound - agg_var,
    }


def response_amplitude(model: ModelState, mask: np.ndarray, M_h: float, M_e: float) -> float:
    """``sqrt(E[s] M_h^2 + E[m - s] M_e^2)`` under ``model``; ``s`` counts positions in the hard set.

    Summing the per-prefix variance bound along a response shows this
    dominates ``sqrt(Var_Q(g))`` whenever the magnitude bounds hold at ``model``.
    """
    reach = node_weights(model)[: model.n_prefixes]
    w = prefix_hard_mass(model, mask)
    s = float(np.dot(reach, w))
    m = float(reach.sum())
    return math.sqrt(s * M_h**2 + (m - s) * M_e**2)


def safe_range_amplitude(s: float, m: float, M_h: float, M_e: float) -> float:
    if s < 0 or m < s:
        raise NonpositiveInput("need 0 <= s <= m")
    return math.sqrt(s * M_h**2 + (m - s) * M_e**2)


# --------------------------------------------------------------------------
# constants


@dataclass
class Constants:
    C1: float
    C2: float
    family: dict
    n_runs: int
    percentile: float
    per_run_1: np.ndarray = field(repr=False, default=None)
    per_run_2: np.ndarray = field(repr=False, default=None)

    def require(self, family: dict | None) -> None:
        if family is not None and family != self.family:
            raise FamilyMismatch("constants were estimated on a different scenario family")


def run_remainders(P1, P2, Q0, p_hat2, sched: TiltingSchedule, models=None):
    """``|Delta L_T(P) - sum_t first-order_t(P)| / S_T`` for ``P1`` and ``P2``."""
    if models is None:
        models, _ = run_schedule(Q0, p_hat2, sched, diagnostics=False)
    lin1 = lin2 = 0.0
    p1, p2 = path_distribution(P1), path_distribution(P2)
    for t, lam in enumerate(sched.lambdas):
        Q = models[t]
        target = smooth_target(p_hat2, Q, sched.alpha, sched.reference)
        g = response_direction(Q, target)
        # E_Q[g] = 0 by construction
        lin1 -= lam * mean(p1, g)
        lin2 -= lam * mean(p2, g)
    d1 = kl_paths(P1, models[-1]) - kl_paths(P1, models[0])
    d2 = kl_paths(P2, models[-1]) - kl_paths(P2, models[0])
    S = sched.total_sq
    if S == 0:
        return 0.0, 0.0
    return abs(d1 - lin1) / S, abs(d2 - lin2) / S


def estimate_constants_from(
    instances: Iterable,
    schedules: Sequence[TiltingSchedule],
    family: dict,
    percentile: float = 99.0,
    min_runs: int = MIN_RUNS,
) -> Constants:
    """Constants from ``(P1, P2, Q0, p_hat2)`` instances; each run takes its worst schedule."""
    r1, r2 = [], []
    for P1, P2, Q0, p_hat2 in instances:
        worst1 = worst2 = 0.0
        for sched in schedules:
            a, b = run_remainders(P1, P2, Q0, p_hat2, sched)
            worst1, worst2 = max(worst1, a), max(worst2, b)
        r1.append(worst1)
        r2.append(worst2)
    if len(r1) < min_runs:
        raise InsufficientRuns(f"{len(r1)} runs given, at least {min_runs} needed")
    r1, r2 = np.array(r1), np.array(r2)
    return Constants(
        C1=float(np.percentile(r1, percentile)),
        C2=float(np.percentile(r2, percentile)),
        family=family,
        n_runs=len(r1),
        percentile=percentile,
        per_run_1=r1,
        per_run_2=r2,
    )


def default_schedules(lam_grid=DEFAULT_GRID, steps=(1, 5), alpha=0.01, reference="uniform"):
    return [TiltingSchedule.equal_steps(T, lam, alpha=alpha, reference=reference) for lam in lam_grid for T in steps]


def estimate_constants(
    params: SparseShiftScenario,
    lam_grid: Sequence[float] = DEFAULT_GRID,
    seeds: Iterable[int] = range(MIN_RUNS),
    steps=(1, 5),
    alpha: float | None = None,
    reference: str = "uniform",
    percentile: float = 99.0,
) -> Constants:
    """Family-level constants over generated scenarios (one run per seed)."""
    from dataclasses import replace

    alpha = params.alpha if alpha is None else alpha
    scheds = default_schedules(lam_grid, steps, alpha, reference)

    def gen():
        for seed in seeds:
            sc = generate(replace(params, seed=int(seed)))
            yield sc.P1, sc.P2, sc.Q0, sc.P2

    return estimate_constants_from(gen(), scheds, params.family(), percentile)


# --------------------------------------------------------------------------
# one-step and multi-step bounds


def _family_of(scen):
    return scen.params.family() if scen is not None else None


def verify_one_step(
    P1: TokenTree,
    P2: TokenTree,
    Q: ModelState,
    target: ModelState,
    lam: float,
    constants: Constants | None,
    scen: Scenario | None = None,
    oracle: bool = True,
    lambda0: float = LAMBDA0,
) -> BoundReport:
    if constants is None:
        raise ConstantsMissing("estimate constants for this family first")
    constants.require(_family_of(scen))
    if not (0.0 <= lam <= lambda0):
        raise LambdaOutOfRange(f"step {lam} outside [0, {lambda0}]")
    C1, C2 = constants.C1, constants.C2
    rep = BoundReport()
    Qn = tilt(Q, target, lam)
    p1, q = path_distribution(P1), path_distribution(Q)
    d1 = kl_paths(P1, Qn) - kl_paths(P1, Q)
    d2 = kl_paths(P2, Qn) - kl_paths(P2, Q)
    kl_q_t = kl_paths(Q, target)
    kl_p2_t = kl_paths(P2, target)
    chi2 = chi_square(p1, q)
    v = var(q, response_log_ratio(Q, target))
    rep.quantities.update(
        lam=lam, delta_P1=d1, delta_P2=d2, kl_Q_target=kl_q_t, kl_P2_target=kl_p2_t,
        chi2_P1_Q=chi2, var_f=v, var_g=var(q, response_direction(Q, target)), C1=C1, C2=C2,
    )
    rep.add("one_step.P2", d2, -lam * (kl_q_t - kl_p2_t) + C2 * lam * lam)
    rep.add("one_step.P1", d1, lam * math.sqrt(v) * math.sqrt(chi2) + C1 * lam * lam)
    if scen is not None:
        amp = response_amplitude(Q, scen.hard_mask(), scen.params.M_h, scen.params.M_e)
        rep.quantities["amplitude"] = amp
        rep.add("one_step.P1_explicit", d1, lam * amp * math.sqrt(chi2) + C1 * lam * lam)
    if oracle and np.min(P2.cond) > 0:
        P2m = ModelState(P2.vocab_size, P2.max_depth, P2.cond)
        Qo = tilt(Q, P2m, lam)
        do = kl_paths(P2, Qo) - kl_paths(P2, Q)
        kl_q_p2 = kl_paths(Q, P2)
        rep.quantities["kl_Q_P2"] = kl_q_p2
        if kl_q_p2 < 1e-15:
            rep.flags.append("degenerate: Q equals P2, the linear gain term vanishes")
        rep.add("one_step.P2_oracle", do, -lam * kl_q_p2 + C2 * lam * lam)
    return rep


def verify_multi_step(
    models: Sequence[ModelState],
    sched: TiltingSchedule,
    P1: TokenTree,
    P2: TokenTree,
    p_hat2: TokenTree,
    constants: Constants | None,
    scen: Scenario | None = None,
    oracle: bool = False,
) -> BoundReport:
    """Bounds for an unmodulated per-prefix run ``models[0..T]``.

    With ``oracle=True`` the run is assumed to tilt straight toward ``P2``.
    """
    if constants is None:
        raise ConstantsMissing("estimate constants for this family first")
    constants.require(_family_of(scen))
    T = sched.steps
    if len(models) != T + 1:
        raise ValueError("trajectory length does not match the schedule")
    C1, C2 = constants.C1, constants.C2
    p1, p2 = path_distribution(P1), path_distribution(P2)
    P2m = ModelState(P2.vocab_size, P2.max_depth, P2.cond) if np.min(P2.cond) > 0 else None
    lin_f = lin_g = lin_kl = lin_oracle = 0.0
    sum_lam_sd = 0.0
    chi2s, kl_q_p2, kl_p2_q, variances, amps = [], [], [], [], []
    for t, lam in enumerate(sched.lambdas):
        Q = models[t]
        target = P2m if oracle else smooth_target(p_hat2, Q, sched.alpha, sched.reference)
        q = path_distribution(Q)
        f = response_log_ratio(Q, target)
        g = response_direction(Q, target)
        lin_f -= lam * (mean(p2, f) - mean(q, f))
        lin_g -= lam * mean(p2, g)
        lin_kl -= lam * (kl_paths(Q, target) - kl_paths(P2, target))
        v = var(q, f)
        variances.append(v)
        sum_lam_sd += lam * math.sqrt(v)
        chi2s.append(chi_square(p1, q))
        if P2m is not None:
            kl_q_p2.append(kl_paths(Q, P2m))
        kl_p2_q.append(kl_paths(P2, Q))
        if scen is not None:
            amps.append(response_amplitude(Q, scen.hard_mask(), scen.params.M_h, scen.params.M_e))
        if P2m is not None:
            lin_oracle -= lam * kl_q_p2[-1]
    d1 = kl_paths(P1, models[-1]) - kl_paths(P1, models[0])
    d2 = kl_paths(P2, models[-1]) - kl_paths(P2, models[0])
    H = math.sqrt(max(chi2s)) if chi2s else 0.0
    Lam, S = sched.total, sched.total_sq
    rep = BoundReport()
    rep.quantities.update(
        T=T, Lambda=Lam, S=S, H_T=H, delta_P1=d1, delta_P2=d2, C1=C1, C2=C2,
        mu_T=min(kl_q_p2) if kl_q_p2 else math.nan,
        chi2=chi2s, variance=variances, kl_Q_P2=kl_q_p2, kl_P2_Q=kl_p2_q,
    )
    if chi2s and chi2s[0] > 0 and max(chi2s) > CHI2_GROWTH_FLAG * chi2s[0]:
        rep.flags.append("chi-square to P1 grew by more than 100x along the run")
    # two readings of the per-step log-ratio: the response-level log-ratio, and
    # the per-prefix log-ratios centered at each prefix and summed along the path
    rep.add("multi_step.P2_response_f", d2, lin_f + C2 * S)
    rep.add("multi_step.P2_centered", d2, lin_g + C2 * S)
    rep.add("multi_step.P2_kl", d2, lin_kl + C2 * S)
    if oracle and P2m is not None:
        rep.add("multi_step.P2_oracle", d2, lin_oracle + C2 * S)
    rep.add("multi_step.P1", d1, H * sum_lam_sd + C1 * S)
    if scen is not None:
        amp = max(amps)
        rep.quantities["amplitude"] = amp
        rep.quantities["A"] = H * amp
        rep.add("multi_step.P1_explicit", d1, H * amp * Lam + C1 * S)
    return rep


# --------------------------------------------------------------------------
# step-budget formulas


def min_total_weight(mu: float, C2: float, delta: float, T: float) -> float:
    """Smaller root of ``mu * L - (C2 / T) * L**2 = delta``."""
    if mu <= 0 or T <= 0 or delta < 0 or C2 < 0:
        raise NonpositiveInput("need mu > 0, T > 0, delta >= 0, C2 >= 0")
    if C2 == 0:
        return delta / mu
    disc = mu * mu - 4.0 * C2 * delta / T
    if disc < 0:
        raise InfeasibleT(f"T={T} is below the feasibility threshold {4 * C2 * delta / mu**2:.6g}")
    # rationalized form of (T / 2 C2) (mu - sqrt(disc)); no cancellation for large T
    return 2.0 * delta / (mu + math.sqrt(disc))


def min_total_weight_series(mu, C2, delta, T) -> float:
    return delta / mu + C2 * delta**2 / (mu**3 * T)


def fixed_target_bound(A: float, mu: float, C1: float, C2: float, delta: float, T: float) -> float:
    """Leading two terms of the minimal degradation bound at domain gain ``delta``."""
    return A * delta / mu + (A * C2 / mu**3 + C1 / mu**2) * delta**2 / T


def fixed_target_bound_exact(A, mu, C1, C2, delta, T) -> float:
    """``A * L + C1 * L**2 / T`` at ``L = min_total_weight``."""
    L = min_total_weight(mu, C2, delta, T)
    return A * L + C1 * L * L / T


def lambda_max(H: float, V: float, C1: float, eps_fg: float, T: float) -> float:
    """Largest equal step with ``T * (H V lam + C1 lam^2) <= eps_fg``."""
    if H <= 0 or V <= 0 or C1 <= 0 or T <= 0 or eps_fg < 0:
        raise NonpositiveInput("H, V, C1 and T must be positive and eps_fg nonnegative")
    hv = H * V
    # rationalized root of C1 lam^2 + hv lam - eps_fg / T = 0
    return 2.0 * eps_fg / (T * (hv + math.sqrt(hv * hv + 4.0 * C1 * eps_fg / T)))


def lambda_max_series(H, V, C1, eps_fg, T) -> float:
    return eps_fg / (H * V * T)


# --------------------------------------------------------------------------
# trade-off measurements


def run_deltas(scen: Scenario, sched: TiltingSchedule, modulator=None):
    models, diags = run_schedule(scen.Q0, scen.P2, sched, modulator=modulator, diagnostics=False)
    d2 = kl_paths(scen.P2, models[-1]) - kl_paths(scen.P2, scen.Q0)
    d1 = kl_paths(scen.P1, models[-1]) - kl_paths(scen.P1, scen.Q0)
    return d1, d2, models


def mean_step_kl(models) -> float:
    from .tilting import measure_step_kl

    if len(models) < 2:
        return 0.0
    return float(np.mean([measure_step_kl(a, b) for a, b in zip(models[:-1], models[1:])]))


def match_gain(
    scen: Scenario,
    steps: int,
    gain: float,
    modulator_factory=None,
    alpha: float = 0.01,
    reference: str = "uniform",
    rel_tol: float = 1e-10,
    max_iter: int = 200,
):
    """Equal step ``lam`` whose run reaches domain gain ``gain``; bisection on ``lam``.

    Returns ``(lam, delta_P1, delta_P2)`` or ``None`` when even ``lam = 1``
    falls short.
    """

    def run(lam):
        sched = TiltingSchedule.equal_steps(steps, lam, alpha=alpha, reference=reference)
        mod = modulator_factory() if modulator_factory else None
        d1, d2, _ = run_deltas(scen, sched, mod)
        return d1, d2

    hi_d1, hi_d2 = run(1.0)
    if -hi_d2 < gain:
        return None
    lo, hi = 0.0, 1.0
    best = (1.0, hi_d1, hi_d2)
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        d1, d2 = run(mid)
        if -d2 < gain:
            lo = mid
        else:
            hi = mid
            best = (mid, d1, d2)
        if abs(-best[2] - gain) <= rel_tol * gain or hi - lo < 1e-15:
            break
    return best


def frontier_sweep(
    scen: Scenario,
    lam_grid: Sequence[float],
    T_grid: Sequence[int],
    modulators: Sequence[str] = ("none", "talr"),
    alpha: float = 0.01,
    reference: str = "uniform",
    talr_cfg=None,
) -> list[dict]:
    """One row per ``(lam, T, modulator)`` in that order."""
    rows = []
    for lam in lam_grid:
        for T in T_grid:
            for mod_name in modulators:
                rows.append(sweep_cell(scen, lam, T, mod_name, alpha, reference, talr_cfg))
    return rows


def sweep_cell(scen, lam, T, mod_name, alpha=0.01, reference="uniform", talr_cfg=None) -> dict:
    from .talr import TalrConfig, TalrModulator

    row = {"lambda": float(lam), "T": int(T), "modulator": mod_name}
    try:
        sched = TiltingSchedule.equal_steps(T, lam, alpha=alpha, reference=reference)
        if mod_name == "none":
            mod = None
        elif mod_name == "talr":
            mod = TalrModulator(talr_cfg or TalrConfig())
        else:
            raise ValueError(f"unknown modulator {mod_name!r}")
        d1, d2, models = run_deltas(scen, sched, mod)
        row.update(domain_gain=-d2, general_change=-d1, mean_step_kl=mean_step_kl(models), status="ok")
    except Exception as exc:  # recorded per cell; the sweep continues
        row.update(domain_gain=math.nan, general_change=math.nan, mean_step_kl=math.nan,
                   status=f"error:{type(exc).__name__}")
    return row


def pareto_flags(rows: Sequence[dict]) -> list[bool]:
    """True where no other row has both more domain gain and less degradation."""
    pts = [(r["domain_gain"], r["general_change"]) for r in rows]
    flags = []
    for i, (g, c) in enumerate(pts):
        if not (np.isfinite(g) and np.isfinite(c)):
            flags.append(False)
            continue
        dominated = any(
            (g2 >= g and c2 >= c and (g2 > g or c2 > c))
            for j, (g2, c2) in enumerate(pts)
            if j != i and np.isfinite(g2) and np.isfinite(c2)
        )
        flags.append(not dominated)
    return flags
