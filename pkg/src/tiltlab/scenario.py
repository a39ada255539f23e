"""Controlled (P1, P2, Q0) triples with a sparse set of hard prefixes.

Construction, per prefix ``u`` (EOS is the last column):

* ``Q0`` rows are Dirichlet draws mixed with uniform mass, so no entry is tiny.
* At a hard prefix one non-EOS token ``h`` gets a large positive log-ratio
  ``x <= M_h`` toward the target while every other token drops by a common
  offset ``c`` (plus small noise).  ``q0(h|u)`` is solved from
  ``q_h * e**x + (1 - q_h) * e**-c = 1`` so the target row normalizes exactly.
  All tokens at a hard prefix belong to the hard set ``S``.
* Easy prefixes get independent log-ratio noise bounded by ``M_l``.
* Optional leakage adds an off-``S`` perturbation whose ``L2(q0)`` norm is
  ``(beta + gamma)`` times that of the on-``S`` log-ratio, and which is
  pointwise bounded by ``(beta + gamma) * M_h``.
* The smoothed target is ``q0 * exp(f)``; the empirical target ``P2`` is the
  smoothed target with the uniform reference mixed back out.
* ``P1`` is ``Q0`` pushed along a random log-space direction until
  ``KL(P1 || Q0)`` reaches a fraction of ``kappa_init``.

Hard prefixes are picked level by level so that the expected number of
designated hard tokens per ``P2`` response approaches ``s``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import InfeasibleParams
from .tree import (
    ModelState,
    TokenTree,
    check_budget,
    dumps,
    kl_paths,
    leaf_lengths,
    leaf_responses,
    level_offsets,
    n_prefixes,
    node_weights,
    path_distribution,
    prefix_of_rank,
)

KAPPA_INIT = 0.01
Q0_UNIFORM_MIX = 0.3
HARD_DROP_MAX = 0.7
DEFAULT_P_HARD = 0.1


def scenario_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Counter-based generator keyed by ``(seed, stream)``."""
    return np.random.Generator(np.random.Philox(key=[int(seed) & (2**64 - 1), int(stream)]))


@dataclass(frozen=True)
class SparseShiftScenario:
    vocab: int = 4
    depth: int = 4
    s: float | None = None
    w_S: float | None = None
    M_h: float = 2.0
    M_l: float = 0.05
    beta: float = 0.0
    gamma: float = 0.0
    m: int | None = None
    seed: int = 0
    alpha: float = 0.01
    kappa_init: float = KAPPA_INIT
    label_only: bool = False

    def __post_init__(self):
        if self.vocab < 2 or self.depth < 1:
            raise InfeasibleParams("need vocab >= 2 and depth >= 1")
        if self.s is not None and self.w_S is not None:
            raise InfeasibleParams("give at most one of s (hard tokens per example) or w_S (hard fraction)")
        if self.w_S is not None and not (0.0 < self.w_S < 1.0):
            raise InfeasibleParams(f"w_S={self.w_S} outside (0, 1)")
        if self.s is not None and self.s <= 0:
            raise InfeasibleParams("s must be positive")
        if self.M_h <= 0 or self.M_l < 0:
            raise InfeasibleParams("magnitudes must be positive")
        if self.M_l > self.M_h:
            raise InfeasibleParams("M_l must not exceed M_h")
        for name in ("beta", "gamma"):
            v = getattr(self, name)
            if not (0.0 <= v < 1.0):
                raise InfeasibleParams(f"{name}={v} outside [0, 1)")
        if not (0.0 < self.alpha < 1.0):
            raise InfeasibleParams("alpha outside (0, 1)")
        if self.m is not None and self.m < 1:
            raise InfeasibleParams("m must be a positive integer")

    @property
    def M_e(self) -> float:
        return self.M_l + (self.beta + self.gamma) * self.M_h

    @property
    def example_length(self) -> int:
        return self.depth if self.m is None else int(self.m)

    def family(self) -> dict:
        """Descriptor shared by every seed of the same family."""
        out = asdict(self)
        out.pop("seed")
        return out


@dataclass
class Scenario:
    params: SparseShiftScenario
    P1: TokenTree
    P2: TokenTree
    Q0: ModelState
    target: ModelState  # smoothed target used to define the log-ratio
    hard_prefixes: np.ndarray  # ranks
    hard_tokens: np.ndarray  # designated token per hard prefix
    stats: dict = field(default_factory=dict)

    @property
    def shape(self):
        return self.Q0.shape

    def hard_mask(self) -> np.ndarray:
        """Boolean ``(n_prefixes, k + 1)`` indicator of the hard set ``S``."""
        mask = np.zeros(self.Q0.cond.shape, dtype=bool)
        mask[self.hard_prefixes] = True
        return mask

    def designated_mask(self) -> np.ndarray:
        mask = np.zeros(self.Q0.cond.shape, dtype=bool)
        mask[self.hard_prefixes, self.hard_tokens] = True
        return mask

    def hard_set(self) -> list[tuple[tuple[int, ...], int]]:
        k, d = self.shape
        out = []
        for rank in self.hard_prefixes:
            prefix = prefix_of_rank(int(rank), k, d)
            out.extend((prefix, a) for a in range(k + 1))
        return out

    def log_ratio(self, model: ModelState | None = None) -> np.ndarray:
        model = self.Q0 if model is None else model
        return np.log(self.target.cond) - np.log(model.cond)


# --------------------------------------------------------------------------
# construction helpers


def _q0_rows(rng, n, width):
    rows = rng.dirichlet(np.ones(width), size=n)
    return (1.0 - Q0_UNIFORM_MIX) * rows + Q0_UNIFORM_MIX / width


def _hard_profile(rng, M_h, M_l):
    """Log-ratio of the designated token and the common drop of the others."""
    x = M_h * rng.uniform(0.85, 0.95)
    c = min(x, HARD_DROP_MAX * M_h, M_h - M_l)
    c = max(c, 1e-3)
    q_h = (1.0 - math.exp(-c)) / (math.exp(x) - math.exp(-c))
    return x, c, q_h


def _fill_hard_row(q_row, token, x, c, noise):
    """Row of q0 and log-ratio for a hard prefix; exact normalization of the target."""
    width = q_row.size
    q_h = (1.0 - math.exp(-c)) / (math.exp(x) - math.exp(-c))
    others = np.delete(q_row, token)
    others = others / others.sum() * (1.0 - q_h)
    q = np.insert(others, token, q_h)
    f = np.full(width, -c) + noise
    f[token] = 0.0
    # re-solve the drop so the target row sums to one with the noise included
    mass_other = float(np.sum(np.delete(q * np.exp(noise), token)))
    remaining = 1.0 - q_h * math.exp(x)
    c_eff = math.log(mass_other / remaining)
    f = noise - c_eff
    f[token] = x
    return q, f


def _reach_children(reach_level, cond_level, k):
    return (reach_level[:, None] * cond_level[:, :k]).reshape(-1)


def _build(params: SparseShiftScenario, rng, s_target: float):
    k, d = params.vocab, params.depth
    check_budget(k, d)
    width = k + 1
    n = n_prefixes(k, d)
    offsets = level_offsets(k, d)

    q0 = _q0_rows(rng, n, width)
    f = np.zeros((n, width))
    profiles = [_hard_profile(rng, params.M_h, params.M_l) for _ in range(n)]
    hard_token = rng.integers(0, k, size=n)
    hard_noise = rng.uniform(-0.5 * params.M_l, 0.5 * params.M_l, size=(n, width))
    easy_noise = rng.uniform(-0.5 * params.M_l, 0.5 * params.M_l, size=(n, width))
    orders = [rng.permutation(offsets[l + 1] - offsets[l]) for l in range(d)]

    # fill easy rows first; hard choices overwrite them level by level
    for r in range(n):
        eps = easy_noise[r]
        c = math.log(float(np.sum(q0[r] * np.exp(eps))))
        f[r] = eps - c

    levels = [d - 1] if params.label_only else list(range(d))
    is_hard = np.zeros(n, dtype=bool)
    reach = np.ones(1)
    deficit = 0.0
    # label-only keeps the per-level budget of the full variant on the last level only
    per_level = s_target / d
    for level in range(d):
        lo, hi = offsets[level], offsets[level + 1]
        if level in levels:
            goal = per_level + deficit
            achieved = 0.0
            for j in orders[level]:
                r = lo + int(j)
                x, c, _ = profiles[r]
                qrow, frow = _fill_hard_row(q0[r], int(hard_token[r]), x, c, hard_noise[r])
                target_h = qrow[hard_token[r]] * math.exp(x)
                contrib = reach[j] * target_h
                # error diffusion: take the prefix if that brings us closer to the goal
                if contrib > 0 and abs(goal - achieved - contrib) < abs(goal - achieved):
                    q0[r], f[r] = qrow, frow
                    is_hard[r] = True
                    achieved += contrib
            deficit = goal - achieved
        if level + 1 < d:
            target_level = q0[lo:hi] * np.exp(f[lo:hi])
            target_level /= target_level.sum(axis=1, keepdims=True)
            reach = _reach_children(reach, target_level, k)
    return q0, f, is_hard, hard_token, easy_noise


def _add_leakage(params, q0, f, is_hard, rng, reach_q, easy_noise):
    """Off-``S`` leakage; raw offsets stay within half the magnitude caps so that
    re-centering (a shift by ``log E_q e**x``, which lies between the extremes
    of ``x``) keeps ``|f| <= M_l + (beta + gamma) * M_h``."""
    scale = params.beta + params.gamma
    if scale == 0.0:
        return f
    n, width = f.shape
    on_s = float(np.sum(reach_q[is_hard, None] * q0[is_hard] * f[is_hard] ** 2))
    if on_s <= 0:
        return f
    easy = ~is_hard
    xi = rng.standard_normal(size=(n, width))
    xi -= np.sum(q0 * xi, axis=1, keepdims=True)
    xi[is_hard] = 0.0
    norm = math.sqrt(float(np.sum(reach_q[easy, None] * q0[easy] * xi[easy] ** 2)))
    if norm == 0:
        return f
    leak = xi * (scale * math.sqrt(on_s) / norm)
    cap = 0.5 * scale * params.M_h
    leak = np.clip(leak, -cap, cap)
    out = f.copy()
    raw = easy_noise[easy] + leak[easy]
    out[easy] = raw - np.log(np.sum(q0[easy] * np.exp(raw), axis=1, keepdims=True))
    return out


def _perturbed_copy(Q0: ModelState, rng, kappa: float) -> TokenTree:
    """Tree whose response distribution sits at ``KL(P1 || Q0) = kappa``."""
    xi = rng.standard_normal(size=Q0.cond.shape)
    logq = np.log(Q0.cond)

    def make(scale):
        cond = np.exp(logq + scale * xi)
        cond /= cond.sum(axis=1, keepdims=True)
        return TokenTree(Q0.vocab_size, Q0.max_depth, cond)

    lo, hi = 0.0, 1.0
    while kl_paths(make(hi), Q0) < kappa:
        hi *= 2.0
        if hi > 1e6:
            raise InfeasibleParams("could not reach the requested initial divergence")
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if kl_paths(make(mid), Q0) < kappa:
            lo = mid
        else:
            hi = mid
    return make(lo)


def generate(params: SparseShiftScenario) -> Scenario:
    """Build a scenario; deterministic given ``params`` (seed included)."""
    k, d = params.vocab, params.depth
    width = k + 1
    rho = 1.0 / width
    alpha = params.alpha
    if params.w_S is not None:
        s_target = params.w_S * d
    else:
        s_target = 1.0 if params.s is None else float(params.s)

    for attempt in range(6):
        rng = scenario_rng(params.seed, attempt)
        q0, f, is_hard, hard_token, easy_noise = _build(params, rng, s_target)
        Q0 = ModelState(k, d, q0)
        reach_q = node_weights(Q0)[: Q0.n_prefixes]
        f = _add_leakage(params, q0, f, is_hard, rng, reach_q, easy_noise)
        target = q0 * np.exp(f)
        target /= target.sum(axis=1, keepdims=True)
        p_hat = (target - alpha * rho) / (1.0 - alpha)
        if np.min(p_hat) <= 0.0:
            # the target cannot be written as a smoothed empirical distribution
            continue
        p_hat /= p_hat.sum(axis=1, keepdims=True)
        P2 = TokenTree(k, d, p_hat)
        target_model = ModelState(k, d, target)
        kappa = params.kappa_init * rng.uniform(0.5, 0.9)
        P1 = _perturbed_copy(Q0, rng, kappa)
        hp = np.flatnonzero(is_hard)
        scen = Scenario(params, P1, P2, Q0, target_model, hp, hard_token[hp].astype(np.int64))
        stats = measure_hard_stats(scen)
        scen.stats = stats
        if params.w_S is not None:
            # aim at the requested hard fraction; rescale the count target and retry
            got = stats["w_S_measured"]
            if got > 0 and abs(got - params.w_S) > 0.05 * params.w_S:
                s_target *= params.w_S / got
                continue
        check_assumptions(scen)
        return scen
    raise InfeasibleParams(
        "could not realize the requested hard-set mass with these magnitudes and vocabulary"
    )


# --------------------------------------------------------------------------
# measurements


def _position_counts(scen: Scenario, token_mask: np.ndarray, model: TokenTree | None = None):
    """Per-response count of positions whose (prefix, symbol) lies in ``token_mask``."""
    k, d = scen.shape
    responses = leaf_responses(k, d)
    offsets = level_offsets(k, d)
    counts = np.zeros(len(responses))
    for i, z in enumerate(responses):
        c = 0
        local = 0
        for level, token in enumerate(z):
            rank = offsets[level] + local
            if token_mask[rank, token]:
                c += 1
            local = local * k + token
        if len(z) < d:
            rank = offsets[len(z)] + local
            if token_mask[rank, k]:
                c += 1
        counts[i] = c
    return counts


def hard_position_mask(model: ModelState, threshold: float) -> np.ndarray:
    return model.cond < threshold


def measure_hard_stats(scen: Scenario, p_hard: float | None = None, model: ModelState | None = None) -> dict:
    """Expected hard positions per ``P2`` response, mean length and the hard fraction.

    With ``p_hard`` given, a position is hard when the model probability of the
    emitted symbol is below the threshold; otherwise the designated hard tokens
    are counted.
    """
    model = scen.Q0 if model is None else model
    k, d = scen.shape
    if p_hard is None:
        mask = scen.designated_mask()
    else:
        if not (0.0 <= p_hard < 1.0):
            raise ValueError("p_hard must lie in [0, 1)")
        mask = hard_position_mask(model, p_hard)
    counts = _position_counts(scen, mask)
    lengths = leaf_lengths(k, d).astype(np.float64)
    p2 = path_distribution(scen.P2)
    s = float(np.dot(p2, counts))
    m_mean = float(np.dot(p2, lengths))
    w = float(np.dot(p2, counts / lengths))
    return {"s_measured": s, "m_mean": m_mean, "w_S_measured": w}


def magnitude_split(scen: Scenario, model: ModelState | None = None) -> dict:
    f = scen.log_ratio(model)
    mask = scen.hard_mask()
    on = float(np.max(np.abs(f[mask]))) if mask.any() else 0.0
    off = float(np.max(np.abs(f[~mask]))) if (~mask).any() else 0.0
    return {"max_abs_f_hard": on, "max_abs_f_easy": off}


def check_assumptions(scen: Scenario) -> None:
    p = scen.params
    split = magnitude_split(scen)
    tol = 1e-12
    if split["max_abs_f_hard"] > p.M_h + tol:
        raise InfeasibleParams(f"hard log-ratio {split['max_abs_f_hard']:.4g} exceeds M_h={p.M_h}")
    if split["max_abs_f_easy"] > p.M_e + tol:
        raise InfeasibleParams(f"easy log-ratio {split['max_abs_f_easy']:.4g} exceeds M_e={p.M_e}")
    if kl_paths(scen.P1, scen.Q0) > p.kappa_init + tol:
        raise InfeasibleParams("initial model is not close enough to P1")


def label_only_variant(params: SparseShiftScenario) -> SparseShiftScenario:
    return replace(params, label_only=True)


def save_scenario(scen: Scenario, directory) -> None:
    from pathlib import Path

    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    (out / "P1.tree").write_text(dumps(scen.P1))
    (out / "P2.tree").write_text(dumps(scen.P2))
    (out / "Q0.tree").write_text(dumps(scen.Q0))
    (out / "target.tree").write_text(dumps(scen.target))
    lines = []
    for prefix, token in scen.hard_set():
        label = ",".join(map(str, prefix)) if prefix else "root"
        lines.append(f"{label}:{token}")
    (out / "hard_set.txt").write_text("\n".join(lines) + ("\n" if lines else ""))
    k, d = scen.shape
    tok_lines = []
    for rank, token in zip(scen.hard_prefixes, scen.hard_tokens):
        prefix = prefix_of_rank(int(rank), k, d)
        label = ",".join(map(str, prefix)) if prefix else "root"
        tok_lines.append(f"{label}:{int(token)}")
    (out / "hard_tokens.txt").write_text("\n".join(tok_lines) + ("\n" if tok_lines else ""))
