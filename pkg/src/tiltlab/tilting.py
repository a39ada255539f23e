"""Exponential tilting of model conditionals toward a smoothed target.

One step moves every prefix conditional along the log-space segment between
the model and the target:

    q_next(a|u)  proportional to  q(a|u)**(1 - lam) * target(a|u)**lam

All prefixes are updated from the same frozen snapshot.  ``level="path"``
applies the same interpolation to whole-response probabilities instead, which
is the setting in which the code-length expansions are exact identities.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import (
    AlphaOutOfRange,
    DegenerateDirection,
    LambdaOutOfRange,
    ShapeMismatch,
    ZeroProbability,
)
from .tree import (
    ModelState,
    TokenTree,
    check_same_shape,
    path_distribution,
    path_log_probs,
    prefix_rank,
    tree_from_path_distribution,
)

DEFAULT_ALPHA = 0.01
DEGENERACY_V0 = 1e-12
REFERENCES = ("uniform", "model")


def _cond(x) -> np.ndarray:
    return x.cond if isinstance(x, TokenTree) else np.asarray(x, dtype=np.float64)


def _normalize_reference(reference: str) -> str:
    if reference in ("model", "current_model"):
        return "model"
    if reference != "uniform":
        raise ValueError(f"unknown reference kind {reference!r}")
    return reference


@dataclass(frozen=True)
class TiltingSchedule:
    lambdas: tuple[float, ...]
    alpha: float = DEFAULT_ALPHA
    reference: str = "uniform"
    total: float = field(init=False)
    total_sq: float = field(init=False)

    def __post_init__(self):
        lams = tuple(float(x) for x in self.lambdas)
        if not lams:
            raise ValueError("a schedule needs at least one step")
        for lam in lams:
            # zero steps are allowed so that null schedules can be expressed
            if not (0.0 <= lam <= 1.0) or not np.isfinite(lam):
                raise LambdaOutOfRange(f"step weight {lam} outside [0, 1]")
        if not (0.0 < self.alpha < 1.0):
            raise AlphaOutOfRange(f"alpha={self.alpha} outside (0, 1)")
        object.__setattr__(self, "lambdas", lams)
        object.__setattr__(self, "reference", _normalize_reference(self.reference))
        object.__setattr__(self, "total", float(np.sum(lams)))
        object.__setattr__(self, "total_sq", float(np.sum(np.square(lams))))

    @classmethod
    def equal_steps(cls, steps: int, lam: float, **kw) -> "TiltingSchedule":
        return cls(tuple([lam] * int(steps)), **kw)

    @property
    def steps(self) -> int:
        return len(self.lambdas)


@dataclass
class StepDiagnostics:
    step: int
    lam: float
    step_kl: float  # KL(Q_t || Q_t+1) over responses
    local_kl: np.ndarray  # per prefix
    effective_steps: np.ndarray  # NaN where the direction is degenerate
    log_normalizers: np.ndarray
    residual_norms: np.ndarray
    weights: np.ndarray | None = None  # modulator output, if any


# --------------------------------------------------------------------------
# single-step primitives


def smooth_target(p_hat2: TokenTree, Q_t: TokenTree | None, alpha: float, reference: str = "uniform") -> ModelState:
    """Mix the empirical target with a reference so every entry is positive."""
    if not (0.0 < alpha < 1.0):
        raise AlphaOutOfRange(f"alpha={alpha} outside (0, 1)")
    reference = _normalize_reference(reference)
    p = p_hat2.cond
    if reference == "uniform":
        rho = np.full_like(p, 1.0 / p.shape[1])
    else:
        if Q_t is None:
            raise ValueError("reference='model' needs the current model")
        check_same_shape(p_hat2, Q_t)
        rho = Q_t.cond
    # written as p + alpha * (rho - p) so that rho == p returns p bit for bit
    mixed = p + alpha * (rho - p)
    return ModelState(p_hat2.vocab_size, p_hat2.max_depth, mixed)


def _check_lam(lam, n):
    lam = np.asarray(lam, dtype=np.float64)
    if lam.ndim == 0:
        lam = np.full(n, float(lam))
    if lam.shape != (n,):
        raise ShapeMismatch(f"per-prefix step array has shape {lam.shape}, expected ({n},)")
    if np.any(~np.isfinite(lam)) or np.any(lam < 0.0) or np.any(lam > 1.0):
        raise LambdaOutOfRange("step weights must lie in [0, 1]")
    return lam


def _check_positive(*arrays):
    for a in arrays:
        if np.min(a) <= 0.0:
            raise ZeroProbability("tilting needs strictly positive model and target")


def tilt(Q_t: ModelState, target, lam) -> ModelState:
    """One tilting step; ``lam`` is a scalar or one weight per prefix."""
    q = Q_t.cond
    p = _cond(target)
    if p.shape != q.shape:
        raise ShapeMismatch(f"target shape {p.shape} differs from model shape {q.shape}")
    _check_positive(q, p)
    lam = _check_lam(lam, q.shape[0])
    logits = (1.0 - lam)[:, None] * np.log(q) + lam[:, None] * np.log(p)
    logits -= logits.max(axis=1, keepdims=True)
    out = np.exp(logits)
    out /= out.sum(axis=1, keepdims=True)
    # endpoints are returned bit-exactly
    out[lam == 0.0] = q[lam == 0.0]
    out[lam == 1.0] = p[lam == 1.0]
    return ModelState(Q_t.vocab_size, Q_t.max_depth, out)


def log_normalizer(Q_t: ModelState, target, lam, prefix: Sequence[int] | None = None):
    """``log sum_a q^(1-lam) * target^lam`` per prefix, or at one prefix."""
    q = Q_t.cond
    p = _cond(target)
    if p.shape != q.shape:
        raise ShapeMismatch("target and model shapes differ")
    lam = _check_lam(lam, q.shape[0])
    logits = (1.0 - lam)[:, None] * np.log(q) + lam[:, None] * np.log(p)
    top = logits.max(axis=1)
    psi = top + np.log(np.exp(logits - top[:, None]).sum(axis=1))
    psi[lam == 0.0] = 0.0
    if prefix is not None:
        return float(psi[prefix_rank(prefix, Q_t.vocab_size)])
    return psi


def local_mean(Q_t: ModelState, g: np.ndarray) -> np.ndarray:
    return np.sum(Q_t.cond * g, axis=1)


def local_norm(Q_t: ModelState, g: np.ndarray) -> np.ndarray:
    """``sqrt(E_q[g^2])`` at every prefix."""
    return np.sqrt(np.sum(Q_t.cond * g * g, axis=1))


def tilt_direction(Q_t: ModelState, target) -> np.ndarray:
    """Centered direction ``r - E_q[r]`` with ``r = log(target / q)``."""
    r = np.log(_cond(target)) - np.log(Q_t.cond)
    return r - local_mean(Q_t, r)[:, None]


def centered_log_shift(Q_t: ModelState, Q_next: ModelState) -> np.ndarray:
    check_same_shape(Q_t, Q_next)
    d = np.log(Q_next.cond) - np.log(Q_t.cond)
    return d - local_mean(Q_t, d)[:, None]


def local_step_kl(Q_t: ModelState, Q_next: ModelState) -> np.ndarray:
    """Per-prefix ``KL(q_t(.|u) || q_next(.|u))``."""
    check_same_shape(Q_t, Q_next)
    q = Q_t.cond
    kl = np.sum(q * (np.log(q) - np.log(Q_next.cond)), axis=1)
    return np.maximum(kl, 0.0)


def measure_step_kl(Q_t: ModelState, Q_next: ModelState) -> float:
    """Forward KL between the response distributions of two models."""
    check_same_shape(Q_t, Q_next)
    q = path_distribution(Q_t)
    diff = path_log_probs(Q_t) - path_log_probs(Q_next)
    nz = q > 0
    return max(float(np.sum(q[nz] * diff[nz])), 0.0)


def effective_steps(Q_t: ModelState, Q_next: ModelState, target, v0: float = DEGENERACY_V0) -> np.ndarray:
    """Least-squares step per prefix; NaN where ``Var_q(r) < v0``."""
    s = centered_log_shift(Q_t, Q_next)
    rc = tilt_direction(Q_t, target)
    den = np.sum(Q_t.cond * rc * rc, axis=1)
    num = np.sum(Q_t.cond * s * rc, axis=1)
    out = np.full(den.shape, np.nan)
    ok = den >= v0
    out[ok] = num[ok] / den[ok]
    return out


def effective_step(Q_t: ModelState, Q_next: ModelState, target, prefix: Sequence[int], v0: float = DEGENERACY_V0) -> float:
    rank = prefix_rank(prefix, Q_t.vocab_size)
    rc = tilt_direction(Q_t, target)[rank]
    var = float(np.sum(Q_t.cond[rank] * rc * rc))
    if var < v0:
        raise DegenerateDirection(f"Var_q(r) = {var:.3e} below {v0:g} at prefix {tuple(prefix)}")
    return float(effective_steps(Q_t, Q_next, target, v0=v0)[rank])


def approximation_residuals(Q_t: ModelState, Q_next: ModelState, target, lam_eff: np.ndarray | None = None) -> np.ndarray:
    """Local norm of ``log q_next - [(1-l) log q + l log target - psi(l)]`` per prefix.

    ``l`` is the least-squares effective step; degenerate prefixes use ``l = 0``.
    """
    if lam_eff is None:
        lam_eff = effective_steps(Q_t, Q_next, target)
    lam = np.where(np.isfinite(lam_eff), lam_eff, 0.0)
    logq = np.log(Q_t.cond)
    logp = np.log(_cond(target))
    logits = (1.0 - lam)[:, None] * logq + lam[:, None] * logp
    top = logits.max(axis=1)
    psi = top + np.log(np.exp(logits - top[:, None]).sum(axis=1))
    resid = np.log(Q_next.cond) - (logits - psi[:, None])
    return local_norm(Q_t, resid)


# --------------------------------------------------------------------------
# response-level tilting


def tilt_paths(Q_t: ModelState, target, lam: float) -> ModelState:
    """Interpolate whole-response log-probabilities, then re-express as a tree."""
    lam = float(lam)
    if not (0.0 <= lam <= 1.0):
        raise LambdaOutOfRange(f"step weight {lam} outside [0, 1]")
    if lam == 0.0:
        return Q_t
    target_tree = target if isinstance(target, TokenTree) else ModelState(Q_t.vocab_size, Q_t.max_depth, target)
    check_same_shape(Q_t, target_tree)
    if lam == 1.0:
        return ModelState(Q_t.vocab_size, Q_t.max_depth, target_tree.cond)
    logits = (1.0 - lam) * path_log_probs(Q_t) + lam * path_log_probs(target_tree)
    logits -= logits.max()
    leaves = np.exp(logits)
    leaves /= leaves.sum()
    return tree_from_path_distribution(Q_t.vocab_size, Q_t.max_depth, leaves, cls=ModelState)


# --------------------------------------------------------------------------
# schedules

Modulator = Callable[[ModelState, ModelState], np.ndarray]


def run_schedule(
    Q0: ModelState,
    p_hat2: TokenTree,
    sched: TiltingSchedule,
    modulator: Modulator | None = None,
    level: str = "prefix",
    diagnostics: bool = True,
):
    """Apply the schedule; returns ``(models, diagnostics)`` with ``len(models) == T + 1``.

    ``modulator(Q_t, target)`` returns one weight in ``[0, 1]`` per prefix that
    scales the step at that prefix.
    """
    check_same_shape(Q0, p_hat2)
    if level not in ("prefix", "path"):
        raise ValueError(f"unknown tilting level {level!r}")
    if level == "path" and modulator is not None:
        raise ValueError("a per-prefix modulator has no meaning for response-level steps")
    models = [Q0]
    diags: list[StepDiagnostics] = []
    Q = Q0
    for t, lam in enumerate(sched.lambdas):
        target = smooth_target(p_hat2, Q, sched.alpha, sched.reference)
        weights = None
        if level == "path":
            Q_next = tilt_paths(Q, target, lam)
        else:
            step = lam
            if modulator is not None:
                weights = np.asarray(modulator(Q, target), dtype=np.float64)
                step = lam * weights
            Q_next = tilt(Q, target, step)
        if diagnostics:
            lam_eff = effective_steps(Q, Q_next, target)
            diags.append(
                StepDiagnostics(
                    step=t,
                    lam=lam,
                    step_kl=measure_step_kl(Q, Q_next),
                    local_kl=local_step_kl(Q, Q_next),
                    effective_steps=lam_eff,
                    log_normalizers=log_normalizer(Q, target, np.nan_to_num(np.clip(lam_eff, 0.0, 1.0))),
                    residual_norms=approximation_residuals(Q, Q_next, target, lam_eff),
                    weights=weights,
                )
            )
        models.append(Q_next)
        Q = Q_next
    return models, diags
