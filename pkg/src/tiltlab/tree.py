"""Depth-truncated token trees, model conditionals, and exact path-level measures.

A tree over vocabulary ``V`` (``|V| = k``) and maximum depth ``d`` stores, for
every prefix ``u`` with ``len(u) < d``, a probability vector over ``V + [EOS]``
(EOS is the last column).  Prefixes are ranked level by level; inside a level
the rank is the prefix read as a base-``k`` number.

Responses terminate either at an EOS leaf or at a depth-cut leaf (a prefix of
length ``d``).  Leaves are ordered as: one EOS leaf per prefix in rank order,
then the ``k**d`` depth-cut leaves in base-``k`` order.  Every path-level array
in the package uses this order.
"""
from __future__ import annotations

import hashlib
import math
import os
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    BudgetExceeded,
    EmptyInput,
    NumericalInconsistency,
    ShapeMismatch,
    SupportViolation,
    ZeroProbability,
)

DEFAULT_BUDGET = 10**6
MODEL_FLOOR = 1e-9
SUM_TOL = 1e-12


def enumeration_budget() -> int:
    raw = os.environ.get("TILTLAB_BUDGET")
    return int(raw) if raw else DEFAULT_BUDGET


def check_budget(vocab_size: int, max_depth: int, budget: int | None = None) -> None:
    budget = enumeration_budget() if budget is None else budget
    if vocab_size**max_depth > budget:
        raise BudgetExceeded(
            f"|V|^d = {vocab_size}^{max_depth} exceeds enumeration budget {budget}"
        )


@lru_cache(maxsize=None)
def level_offsets(vocab_size: int, max_depth: int) -> tuple[int, ...]:
    """Rank of the first prefix at each level 0..d (entry d == number of prefixes)."""
    offsets = [0]
    for level in range(max_depth):
        offsets.append(offsets[-1] + vocab_size**level)
    return tuple(offsets)


def n_prefixes(vocab_size: int, max_depth: int) -> int:
    return level_offsets(vocab_size, max_depth)[max_depth]


def prefix_rank(prefix: Sequence[int], vocab_size: int) -> int:
    offset = sum(vocab_size**level for level in range(len(prefix)))
    local = 0
    for token in prefix:
        local = local * vocab_size + int(token)
    return offset + local


def prefix_of_rank(rank: int, vocab_size: int, max_depth: int) -> tuple[int, ...]:
    offsets = level_offsets(vocab_size, max_depth)
    level = int(np.searchsorted(offsets, rank, side="right")) - 1
    local = rank - offsets[level]
    tokens = []
    for _ in range(level):
        local, token = divmod(local, vocab_size)
        tokens.append(token)
    return tuple(reversed(tokens))


@lru_cache(maxsize=None)
def prefix_depths(vocab_size: int, max_depth: int) -> np.ndarray:
    offsets = level_offsets(vocab_size, max_depth)
    depths = np.empty(offsets[-1], dtype=np.int64)
    for level in range(max_depth):
        depths[offsets[level] : offsets[level + 1]] = level
    depths.setflags(write=False)
    return depths


def n_leaves(vocab_size: int, max_depth: int) -> int:
    return n_prefixes(vocab_size, max_depth) + vocab_size**max_depth


@lru_cache(maxsize=64)
def leaf_responses(vocab_size: int, max_depth: int) -> tuple[tuple[int, ...], ...]:
    """Responses in leaf order (EOS leaves first, then depth-cut leaves)."""
    check_budget(vocab_size, max_depth)
    out = [
        prefix_of_rank(r, vocab_size, max_depth)
        for r in range(n_prefixes(vocab_size, max_depth))
    ]
    for local in range(vocab_size**max_depth):
        tokens = []
        for _ in range(max_depth):
            local, token = divmod(local, vocab_size)
            tokens.append(token)
        out.append(tuple(reversed(tokens)))
    return tuple(out)


@lru_cache(maxsize=64)
def leaf_lengths(vocab_size: int, max_depth: int) -> np.ndarray:
    """Number of coded symbols per leaf (EOS counts as a symbol, a depth cut does not)."""
    depths = prefix_depths(vocab_size, max_depth)
    out = np.concatenate([depths + 1, np.full(vocab_size**max_depth, max_depth)])
    out.setflags(write=False)
    return out


def response_leaf(response: Sequence[int], vocab_size: int, max_depth: int) -> int:
    if len(response) < max_depth:
        return prefix_rank(response, vocab_size)
    local = 0
    for token in response:
        local = local * vocab_size + int(token)
    return n_prefixes(vocab_size, max_depth) + local


@dataclass(frozen=True, eq=False)
class TokenTree:
    """Conditional next-token distributions over a depth-truncated prefix tree.

    ``cond[r]`` is the distribution over ``V + [EOS]`` at the prefix of rank ``r``.
    Instances are immutable: the array is copied and flagged read-only.
    """

    vocab_size: int
    max_depth: int
    cond: np.ndarray

    def __post_init__(self):
        if self.vocab_size < 1 or self.max_depth < 1:
            raise ShapeMismatch("vocab_size and max_depth must be positive")
        cond = np.array(self.cond, dtype=np.float64)
        expected = (n_prefixes(self.vocab_size, self.max_depth), self.vocab_size + 1)
        if cond.shape != expected:
            raise ShapeMismatch(f"conditionals have shape {cond.shape}, expected {expected}")
        if not np.all(np.isfinite(cond)) or np.any(cond < 0):
            raise ValueError("conditionals must be finite and nonnegative")
        sums = cond.sum(axis=1)
        if np.max(np.abs(sums - 1.0)) > SUM_TOL:
            raise ValueError(
                f"conditional rows must sum to 1 (worst deviation {np.max(np.abs(sums - 1.0)):.3e})"
            )
        cond.setflags(write=False)
        object.__setattr__(self, "cond", cond)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.vocab_size, self.max_depth)

    @property
    def n_prefixes(self) -> int:
        return self.cond.shape[0]

    def conditional(self, prefix: Sequence[int]) -> np.ndarray:
        return self.cond[prefix_rank(prefix, self.vocab_size)]

    def digest(self) -> bytes:
        h = hashlib.blake2b(digest_size=16)
        h.update(f"{self.vocab_size},{self.max_depth};".encode())
        h.update(np.ascontiguousarray(self.cond).tobytes())
        return h.digest()


class ModelState(TokenTree):
    """A model: every conditional entry strictly positive (no ``-log 0`` anywhere)."""

    def __post_init__(self):
        super().__post_init__()
        if np.min(self.cond) <= 0.0:
            raise ZeroProbability("model conditionals must be strictly positive")

    @classmethod
    def from_probs(cls, vocab_size, max_depth, cond, floor: float = MODEL_FLOOR):
        """Build a model, mixing rows with uniform only where an entry falls below ``floor``."""
        cond = np.array(cond, dtype=np.float64)
        cond = cond / cond.sum(axis=1, keepdims=True)
        width = vocab_size + 1
        low = cond.min(axis=1) < floor
        if floor > 0 and np.any(low):
            eps = floor * width
            cond[low] = (1.0 - eps) * cond[low] + eps / width
            cond[low] /= cond[low].sum(axis=1, keepdims=True)
        return cls(vocab_size, max_depth, cond)

    @classmethod
    def from_tree(cls, tree: TokenTree, floor: float = MODEL_FLOOR) -> "ModelState":
        return cls.from_probs(tree.vocab_size, tree.max_depth, tree.cond, floor=floor)

    @property
    def model_id(self) -> bytes:
        return self.digest()


def check_same_shape(*trees: TokenTree) -> None:
    first = trees[0]
    for other in trees[1:]:
        if other.shape != first.shape:
            raise ShapeMismatch(f"tree shapes differ: {first.shape} vs {other.shape}")


def uniform_tree(vocab_size: int, max_depth: int, cls=ModelState):
    width = vocab_size + 1
    return cls(vocab_size, max_depth, np.full((n_prefixes(vocab_size, max_depth), width), 1.0 / width))


def random_tree(vocab_size, max_depth, rng, concentration=1.0, cls=TokenTree):
    """Conditionals drawn i.i.d. from a symmetric Dirichlet."""
    width = vocab_size + 1
    cond = rng.dirichlet(np.full(width, concentration), size=n_prefixes(vocab_size, max_depth))
    cond = np.maximum(cond, 1e-300)
    cond /= cond.sum(axis=1, keepdims=True)
    if cls is ModelState:
        return ModelState.from_probs(vocab_size, max_depth, cond)
    return cls(vocab_size, max_depth, cond)


def random_model(vocab_size, max_depth, rng, concentration=1.0, floor=1e-3) -> ModelState:
    tree = random_tree(vocab_size, max_depth, rng, concentration)
    return ModelState.from_probs(vocab_size, max_depth, tree.cond, floor=floor)


# --------------------------------------------------------------------------
# reach masses and path distributions


def node_weights(tree: TokenTree) -> np.ndarray:
    """Reach probability of every node at levels 0..d, in rank order.

    The first ``n_prefixes`` entries are the internal prefixes; the last
    ``k**d`` are the depth-d nodes.  A node's weight equals the total mass of
    the leaves below it.
    """
    k, d = tree.shape
    offsets = level_offsets(k, d)
    total = offsets[-1] + k**d
    reach = np.empty(total)
    reach[0] = 1.0
    for level in range(d):
        lo, hi = offsets[level], offsets[level + 1]
        children = reach[lo:hi, None] * tree.cond[lo:hi, :k]
        start = hi
        reach[start : start + children.size] = children.reshape(-1)
    return reach


def log_node_weights(model: TokenTree) -> np.ndarray:
    k, d = model.shape
    offsets = level_offsets(k, d)
    total = offsets[-1] + k**d
    logcond = np.log(model.cond)
    out = np.empty(total)
    out[0] = 0.0
    for level in range(d):
        lo, hi = offsets[level], offsets[level + 1]
        children = out[lo:hi, None] + logcond[lo:hi, :k]
        out[hi : hi + children.size] = children.reshape(-1)
    return out


def path_additive(vocab_size: int, max_depth: int, values: np.ndarray) -> np.ndarray:
    """Sum a per-(prefix, symbol) table along every response, in leaf order.

    ``values`` has the conditional table's shape; the EOS column contributes
    only to EOS leaves.
    """
    k, d = vocab_size, max_depth
    check_budget(k, d)
    offsets = level_offsets(k, d)
    n = offsets[-1]
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (n, k + 1):
        raise ShapeMismatch(f"value table has shape {values.shape}, expected {(n, k + 1)}")
    acc = np.empty(n + k**d)
    acc[0] = 0.0
    for level in range(d):
        lo, hi = offsets[level], offsets[level + 1]
        children = acc[lo:hi, None] + values[lo:hi, :k]
        acc[hi : hi + children.size] = children.reshape(-1)
    return np.concatenate([acc[:n] + values[:, k], acc[n:]])


def path_distribution(tree: TokenTree) -> np.ndarray:
    """Leaf probabilities (EOS leaves, then depth-cut leaves)."""
    check_budget(*tree.shape)
    reach = node_weights(tree)
    n = tree.n_prefixes
    return np.concatenate([reach[:n] * tree.cond[:, -1], reach[n:]])


def path_log_probs(model: TokenTree) -> np.ndarray:
    check_budget(*model.shape)
    with np.errstate(divide="ignore"):
        logreach = log_node_weights(model)
        n = model.n_prefixes
        return np.concatenate([logreach[:n] + np.log(model.cond[:, -1]), logreach[n:]])


def enumerate_paths(tree: TokenTree) -> list[tuple[tuple[int, ...], float]]:
    """All responses with positive mass, paired with their probability."""
    probs = path_distribution(tree)
    responses = leaf_responses(*tree.shape)
    return [(responses[i], float(p)) for i, p in enumerate(probs) if p > 0.0]


def tree_from_path_distribution(vocab_size, max_depth, leaf_probs, cls=TokenTree):
    """Inverse of :func:`path_distribution`: conditionals from leaf masses.

    Unreached prefixes get the uniform conditional.
    """
    leaf_probs = np.asarray(leaf_probs, dtype=np.float64)
    k, d = vocab_size, max_depth
    offsets = level_offsets(k, d)
    n = offsets[-1]
    if leaf_probs.shape != (n + k**d,):
        raise ShapeMismatch("leaf vector has wrong length")
    weights = np.empty(n + k**d)
    weights[n:] = leaf_probs[n:]
    for level in range(d - 1, -1, -1):
        lo, hi = offsets[level], offsets[level + 1]
        child_lo = hi
        children = weights[child_lo : child_lo + (hi - lo) * k].reshape(hi - lo, k)
        weights[lo:hi] = children.sum(axis=1) + leaf_probs[lo:hi]
    cond = np.empty((n, k + 1))
    for level in range(d):
        lo, hi = offsets[level], offsets[level + 1]
        children = weights[hi : hi + (hi - lo) * k].reshape(hi - lo, k)
        cond[lo:hi, :k] = children
        cond[lo:hi, k] = leaf_probs[lo:hi]
    mass = cond.sum(axis=1, keepdims=True)
    dead = mass[:, 0] <= 0
    cond[~dead] /= mass[~dead]
    cond[dead] = 1.0 / (k + 1)
    if cls is ModelState:
        return ModelState(k, d, cond)
    return cls(k, d, cond)


# --------------------------------------------------------------------------
# code lengths and divergences


def _paths(x) -> np.ndarray:
    if isinstance(x, TokenTree):
        return path_distribution(x)
    return np.asarray(x, dtype=np.float64)


def shannon_entropy(tree_or_probs) -> float:
    p = _paths(tree_or_probs)
    nz = p > 0
    return float(-np.sum(p[nz] * np.log(p[nz])))


def expected_code_length(P: TokenTree, Q: ModelState) -> float:
    """Cross-entropy ``E_{z~P}[-ln Q(z)]`` in nats."""
    check_same_shape(P, Q)
    p = path_distribution(P)
    logq = path_log_probs(Q)
    nz = p > 0
    return float(-np.sum(p[nz] * logq[nz]))


def kl_paths(P, Q) -> float:
    """KL over path distributions; accepts trees or leaf vectors."""
    if isinstance(P, TokenTree) and isinstance(Q, TokenTree):
        check_same_shape(P, Q)
        p = path_distribution(P)
        logq = path_log_probs(Q)
        nz = p > 0
        if np.any(~np.isfinite(logq[nz])):
            raise SupportViolation("Q assigns zero mass where P is positive")
        return float(np.sum(p[nz] * (np.log(p[nz]) - logq[nz])))
    return divergence("kl", _paths(P), _paths(Q))


def delta_code_length(P: TokenTree, Q1: ModelState, Q2: ModelState, tol: float = 1e-10) -> float:
    """Change in expected code length on ``P`` when moving from ``Q1`` to ``Q2``.

    Computed as ``KL(P||Q2) - KL(P||Q1)`` and cross-checked against the
    difference of cross-entropies.
    """
    check_same_shape(P, Q1, Q2)
    via_kl = kl_paths(P, Q2) - kl_paths(P, Q1)
    via_ce = expected_code_length(P, Q2) - expected_code_length(P, Q1)
    if abs(via_kl - via_ce) > tol * max(1.0, abs(via_ce)):
        raise NumericalInconsistency(f"KL route {via_kl!r} vs cross-entropy route {via_ce!r}")
    return via_kl


def divergence(kind: str, p, q=None) -> float:
    """``kl``, ``chi_square`` or ``entropy`` of (path) distributions ``p`` and ``q``."""
    p = _paths(p)
    if kind == "entropy":
        return shannon_entropy(p)
    q = _paths(q)
    if p.shape != q.shape:
        raise ShapeMismatch(f"{p.shape} vs {q.shape}")
    nz = p > 0
    if np.any(q[nz] <= 0):
        raise SupportViolation("q(z) = 0 where p(z) > 0")
    if kind == "kl":
        value = float(np.sum(p[nz] * np.log(p[nz] / q[nz])))
    elif kind in ("chi_square", "chi2"):
        value = float(np.sum(p[nz] ** 2 / q[nz]) - 1.0)
    else:
        raise ValueError(f"unknown divergence kind {kind!r}")
    # exact zero is only reachable up to rounding
    return max(value, 0.0)


# --------------------------------------------------------------------------
# joining datasets


def join_trees(trees: Iterable[tuple[TokenTree, float]]) -> TokenTree:
    """Count-weighted union of datasets: node weights mix as ``sum |D_i| p_i / sum |D_i|``."""
    trees = list(trees)
    if not trees:
        raise EmptyInput("join_trees needs at least one tree")
    check_same_shape(*[t for t, _ in trees])
    counts = np.array([c for _, c in trees], dtype=np.float64)
    if np.any(counts <= 0):
        raise ValueError("dataset counts must be positive")
    k, d = trees[0][0].shape
    n = trees[0][0].n_prefixes
    total = counts.sum()
    num = np.zeros((n, k + 1))
    den = np.zeros(n)
    fallback = np.zeros((n, k + 1))
    for (tree, count) in trees:
        reach = node_weights(tree)[:n]
        num += count * reach[:, None] * tree.cond
        den += count * reach
        fallback += count * tree.cond
    cond = fallback / total
    live = den > 0
    cond[live] = num[live] / den[live, None]
    cond /= cond.sum(axis=1, keepdims=True)
    return TokenTree(k, d, cond)


# --------------------------------------------------------------------------
# text serialization


def dumps(tree: TokenTree) -> str:
    k, d = tree.shape
    lines = [f"vocab={k} depth={d}"]
    for rank in range(tree.n_prefixes):
        prefix = prefix_of_rank(rank, k, d)
        label = ",".join(str(t) for t in prefix) if prefix else "root"
        probs = " ".join(f"{x:.17g}" for x in tree.cond[rank])
        lines.append(f"{label}: {probs}")
    return "\n".join(lines) + "\n"


def loads(text: str, cls=TokenTree) -> TokenTree:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise EmptyInput("empty tree file")
    header = dict(item.split("=") for item in lines[0].split())
    k, d = int(header["vocab"]), int(header["depth"])
    cond = np.full((n_prefixes(k, d), k + 1), np.nan)
    for line in lines[1:]:
        label, _, values = line.partition(":")
        label = label.strip()
        prefix = () if label == "root" else tuple(int(t) for t in label.split(","))
        if len(prefix) >= d or any(not 0 <= t < k for t in prefix):
            raise ShapeMismatch(f"prefix {label!r} outside a vocab={k} depth={d} tree")
        row = np.array([float(v) for v in values.split()])
        if row.shape != (k + 1,):
            raise ShapeMismatch(f"prefix {label!r} has {row.size} probabilities, expected {k + 1}")
        cond[prefix_rank(prefix, k)] = row
    if np.any(np.isnan(cond)):
        raise ShapeMismatch("tree file does not list every prefix")
    if cls is ModelState:
        return ModelState(k, d, cond)
    return cls(k, d, cond)


def save(tree: TokenTree, path) -> None:
    with open(path, "w") as fh:
        fh.write(dumps(tree))


def load(path, cls=TokenTree) -> TokenTree:
    with open(path) as fh:
        return loads(fh.read(), cls=cls)


def entropy_bits(nats: float) -> float:
    return nats / math.log(2.0)
