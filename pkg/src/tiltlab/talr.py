"""Entropy-regularized token weights.

The weights minimize ``sum_i w_i * loss_i + tau * sum_i w_i log w_i`` over the
probability simplex; the minimizer is a softmax of ``-loss / tau``.  The
unnormalized variant keeps ``exp(-loss / tau) = p ** (1 / tau)`` so that each
weight stays in ``(0, 1]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConvergenceFailure, EmptyBatch, NaNInput, NonpositiveTau
from .tree import ModelState, TokenTree, path_distribution, path_log_probs, leaf_lengths

TAU_MIN = 1e-3
WEIGHT_FLOOR = 0.01
ORACLE_STEP = 0.1
ORACLE_MAX_ITER = 10_000
ORACLE_TOL = 1e-12
MODES = ("simplex", "unnormalized")


def _losses(losses) -> np.ndarray:
    arr = np.asarray(losses, dtype=np.float64).reshape(-1)
    if np.any(np.isnan(arr)):
        raise NaNInput("losses contain NaN")
    if np.any(~np.isfinite(arr)):
        raise ValueError("losses must be finite")
    if np.any(arr < 0):
        raise ValueError("token losses are negative log-probabilities and must be >= 0")
    return arr


def _tau(tau) -> float:
    tau = float(tau)
    if math.isnan(tau):
        raise NaNInput("tau is NaN")
    if tau <= 0:
        raise NonpositiveTau(f"tau must be positive, got {tau}")
    return tau


def objective(weights, losses, tau) -> float:
    """``sum w * loss + tau * sum w log w`` with ``0 log 0 = 0``."""
    w = np.asarray(weights, dtype=np.float64)
    ell = np.asarray(losses, dtype=np.float64)
    nz = w > 0
    return float(np.dot(w, ell) + tau * np.sum(w[nz] * np.log(w[nz])))


def solve_weights_closed_form(losses, tau, mode: str = "simplex") -> np.ndarray:
    ell = _losses(losses)
    tau = _tau(tau)
    if mode == "unnormalized":
        return np.exp(-ell / tau)
    if mode != "simplex":
        raise ValueError(f"unknown mode {mode!r}")
    z = -ell / tau
    z -= z.max()
    w = np.exp(z)
    return w / w.sum()


def solve_weights_oracle(
    losses,
    tau,
    step: float = ORACLE_STEP,
    max_iter: int = ORACLE_MAX_ITER,
    tol: float = ORACLE_TOL,
) -> np.ndarray:
    """Mirror descent with the entropic mirror map, started at the uniform point.

    Each iteration is ``w <- w * exp(-step * grad) / Z`` with
    ``grad = loss + tau * (log w + 1)``.  Iterates stay strictly inside the
    simplex, and the loop stops once the objective changes by less than ``tol``.
    The update is carried out on ``log w`` to stay finite when weights get tiny.
    """
    ell = _losses(losses)
    tau = _tau(tau)
    n = ell.size
    if n == 0:
        raise EmptyBatch("no losses")
    if n == 1:
        return np.ones(1)
    # a fixed step of 0.1 contracts like (1 - 0.1 tau) per iteration; for
    # tau >= 20 the iteration would overshoot, so the step is capped at 1/tau
    eta = min(step, 1.0 / tau)
    logw = np.full(n, -math.log(n))
    prev = objective(np.exp(logw), ell, tau)
    for it in range(max_iter):
        logw = logw - eta * (ell + tau * logw)
        top = logw.max()
        logw -= top + math.log(np.sum(np.exp(logw - top)))
        w = np.exp(logw)
        cur = objective(w, ell, tau)
        if abs(prev - cur) < tol:
            # the objective change stalls well before the iterate does when
            # the contraction is slow; only accept when the iterate is settled
            grad = ell + tau * logw
            spread = float(np.max(grad) - np.min(grad))
            if spread * eta < 1e-9:
                return w
        prev = cur
    gap = cur - objective(solve_weights_closed_form(ell, tau), ell, tau)
    raise ConvergenceFailure(
        f"mirror descent did not settle in {max_iter} iterations (gap {gap:.3e})", best=w, gap=gap
    )


@dataclass(frozen=True)
class TalrConfig:
    tau: float | str = "dynamic-median"
    floor: float = WEIGHT_FLOOR
    mode: str = "unnormalized"

    def __post_init__(self):
        if isinstance(self.tau, str):
            if self.tau not in ("dynamic-median", "median"):
                raise ValueError(f"tau must be a positive number or 'dynamic-median', got {self.tau!r}")
        else:
            _tau(self.tau)
        if not (0.0 <= self.floor < 1.0):
            raise ValueError("weight floor must lie in [0, 1)")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")

    @property
    def dynamic(self) -> bool:
        return isinstance(self.tau, str)


@dataclass
class TokenLossBatch:
    sequences: list

    def __post_init__(self):
        seqs = [np.asarray(_losses(s)) for s in self.sequences]
        self.sequences = seqs

    @classmethod
    def from_probs(cls, probs: Sequence[Sequence[float]]) -> "TokenLossBatch":
        return cls([-np.log(np.asarray(p, dtype=np.float64)) for p in probs])

    @property
    def n_tokens(self) -> int:
        return int(sum(s.size for s in self.sequences))

    @property
    def sequence_means(self) -> np.ndarray:
        return np.array([s.mean() for s in self.sequences])

    def flat(self) -> np.ndarray:
        if not self.sequences:
            return np.zeros(0)
        return np.concatenate(self.sequences)


def median(values, weights=None) -> float:
    """Plain median (mean of the two central values for even counts), or a weighted median."""
    values = np.asarray(values, dtype=np.float64)
    if weights is None:
        return float(np.median(values))
    weights = np.asarray(weights, dtype=np.float64)
    order = np.argsort(values, kind="stable")
    v, w = values[order], weights[order]
    cum = np.cumsum(w) / w.sum()
    lo = int(np.searchsorted(cum, 0.5 - 1e-12))
    # exactly half the mass below: average the straddling values
    if abs(cum[lo] - 0.5) <= 1e-12 and lo + 1 < v.size:
        return float(0.5 * (v[lo] + v[lo + 1]))
    return float(v[lo])


def select_tau(batch: TokenLossBatch, tau_min: float = TAU_MIN) -> float:
    if not batch.sequences:
        raise EmptyBatch("cannot pick a temperature for an empty batch")
    if any(s.size == 0 for s in batch.sequences):
        raise EmptyBatch("every sequence needs at least one token")
    return max(median(batch.sequence_means), tau_min)


def apply_floor(weights, w_min: float = WEIGHT_FLOOR) -> np.ndarray:
    if not (0.0 <= w_min < 1.0):
        raise ValueError("weight floor must lie in [0, 1)")
    return np.maximum(np.asarray(weights, dtype=np.float64), w_min)


def talr_loss(batch: TokenLossBatch, cfg: TalrConfig = TalrConfig()):
    """Mean reweighted loss ``(1/N) sum w * loss`` and the (frozen) weights."""
    ell = batch.flat()
    if ell.size == 0:
        raise EmptyBatch("batch has no tokens")
    tau = select_tau(batch) if cfg.dynamic else float(cfg.tau)
    w = apply_floor(np.exp(-ell / tau), cfg.floor)
    return float(np.dot(w, ell) / ell.size), w


# --------------------------------------------------------------------------
# per-prefix modulator for tilting runs


def path_mean_losses(model: ModelState, target: TokenTree):
    """Per-response mean token loss under ``model`` and the target's response probabilities."""
    k, d = model.shape
    lengths = leaf_lengths(k, d).astype(np.float64)
    losses = -path_log_probs(model)
    probs = path_distribution(target)
    # a response cut at the depth limit has no EOS symbol, so lengths are >= 1
    return losses / lengths, probs


def dynamic_tau(model: ModelState, target: TokenTree, tau_min: float = TAU_MIN) -> float:
    """Probability-weighted median of per-response mean losses of the target's responses."""
    means, probs = path_mean_losses(model, target)
    keep = probs > 0
    return max(median(means[keep], probs[keep]), tau_min)


def expected_target_prob(model: ModelState, target: TokenTree) -> np.ndarray:
    """``E_{a ~ target(.|u)}[q(a|u)]`` at every prefix."""
    return np.sum(model.cond * target.cond, axis=1)


class TalrModulator:
    """Per-prefix step weights ``max(E_target[q]^(1/tau), floor)``."""

    def __init__(self, cfg: TalrConfig = TalrConfig()):
        self.cfg = cfg
        self.taus: list[float] = []

    def __call__(self, model: ModelState, target: TokenTree) -> np.ndarray:
        tau = dynamic_tau(model, target) if self.cfg.dynamic else float(self.cfg.tau)
        self.taus.append(tau)
        return talr_modulator(model, target, tau, self.cfg.floor)


def talr_modulator(model: ModelState, target: TokenTree, tau: float, floor: float = WEIGHT_FLOOR) -> np.ndarray:
    tau = _tau(tau)
    p = expected_target_prob(model, target)
    return apply_floor(np.power(p, 1.0 / tau), floor)
