"""Combinatorial kernels: matchings, permanents, permutation enumeration,
and Birkhoff-von Neumann decomposition of doubly stochastic matrices."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .market import MarketError, PermutationOutcome

PERMANENT_CAP = 20
ENUMERATION_CAP = 10

__all__ = [
    "BvnDecomposition",
    "PermanentEstimate",
    "enumerate_permutations",
    "max_weight_matching",
    "permanent",
    "permanent_stack",
    "log_permanent_exp",
    "estimate_permanent",
    "exact_permanent_backend",
    "estimate_within_contract",
    "bvn_decompose",
]


def enumerate_permutations(n: int):
    """Yield all n! outcomes in lexicographic order of their mappings."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if n > ENUMERATION_CAP:
        raise ValueError(f"n={n} exceeds enumeration cap {ENUMERATION_CAP}")
    for mapping in itertools.permutations(range(n)):
        yield PermutationOutcome(mapping)


def max_weight_matching(weights) -> tuple[float, PermutationOutcome]:
    """Maximum-weight perfect matching of a square matrix.

    Among optimal assignments, returns the lexicographically smallest
    permutation (ties resolved within a 1e-9 relative slack) so repeated
    runs are reproducible.
    """
    weights = np.asarray(weights, dtype=float)
    if weights.ndim != 2 or weights.shape[0] != weights.shape[1]:
        raise MarketError(f"weight matrix must be square, got shape {weights.shape}")
    if not np.all(np.isfinite(weights)):
        raise MarketError("weight matrix has non-finite entries")
    n = weights.shape[0]
    rows, cols = linear_sum_assignment(weights, maximize=True)
    best = float(weights[rows, cols].sum())
    tol = 1e-9 * (1.0 + abs(best))

    # Lexicographic refinement: fix positions row by row, keeping optimality.
    mapping: list[int] = []
    free_cols = list(range(n))
    prefix = 0.0
    for i in range(n):
        chosen = None
        for j in sorted(free_cols):
            rest_cols = [c for c in free_cols if c != j]
            sub = weights[np.ix_(range(i + 1, n), rest_cols)]
            if sub.size:
                r, c = linear_sum_assignment(sub, maximize=True)
                rest = float(sub[r, c].sum())
            else:
                rest = 0.0
            if prefix + weights[i, j] + rest >= best - tol:
                chosen = j
                break
        if chosen is None:  # numerically impossible, guard anyway
            chosen = free_cols[0]
        prefix += weights[i, chosen]
        free_cols.remove(chosen)
        mapping.append(chosen)
    outcome = PermutationOutcome(tuple(mapping))
    value = float(weights[np.arange(n), mapping].sum())
    return value, outcome


def _neumaier_add(total: float, comp: float, term: float) -> tuple[float, float]:
    t = total + term
    if abs(total) >= abs(term):
        comp += (total - t) + term
    else:
        comp += (term - t) + total
    return t, comp


def permanent(matrix, cap: int = PERMANENT_CAP) -> float:
    """Exact matrix permanent via Ryser's formula with Gray-code subsets.

    O(2^n * n); compensated accumulation keeps the alternating sum accurate
    for n up to the cap.
    """
    mat = np.asarray(matrix, dtype=float)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise MarketError(f"permanent needs a square matrix, got shape {mat.shape}")
    n = mat.shape[0]
    if n > cap:
        raise ValueError(f"n={n} exceeds exact permanent cap {cap}")
    if n == 0:
        return 1.0
    row_sums = np.zeros(n)
    total = 0.0
    comp = 0.0
    gray = 0
    sign_n = -1.0 if n % 2 else 1.0
    for k in range(1, 1 << n):
        j = (k & -k).bit_length() - 1
        bit = 1 << j
        gray ^= bit
        if gray & bit:
            row_sums += mat[:, j]
        else:
            row_sums -= mat[:, j]
        subset_sign = -1.0 if (gray.bit_count() % 2) else 1.0
        total, comp = _neumaier_add(total, comp, subset_sign * float(np.prod(row_sums)))
    return sign_n * (total + comp)


def permanent_stack(mats: np.ndarray) -> np.ndarray:
    """Ryser permanents of a stack of equal-size square matrices at once."""
    mats = np.asarray(mats, dtype=float)
    if mats.ndim != 3 or mats.shape[1] != mats.shape[2]:
        raise MarketError(f"expected (batch, k, k) stack, got shape {mats.shape}")
    b, n, _ = mats.shape
    if n == 0:
        return np.ones(b)
    row_sums = np.zeros((b, n))
    total = np.zeros(b)
    gray = 0
    for k in range(1, 1 << n):
        j = (k & -k).bit_length() - 1
        bit = 1 << j
        gray ^= bit
        if gray & bit:
            row_sums += mats[:, :, j]
        else:
            row_sums -= mats[:, :, j]
        subset_sign = -1.0 if (gray.bit_count() % 2) else 1.0
        total += subset_sign * np.prod(row_sums, axis=1)
    if n % 2:
        total = -total
    return total


def log_permanent_exp(log_matrix) -> float:
    """log(perm(exp(L))) for a matrix L that may contain -inf entries.

    Row maxima are factored out before Ryser so deeply negative parameters
    do not underflow; returns -inf when the support has no permutation with
    finite total weight.
    """
    log_mat = np.asarray(log_matrix, dtype=float)
    n = log_mat.shape[0]
    if n == 0:
        return 0.0
    shifts = np.max(log_mat, axis=1)
    if np.any(np.isneginf(shifts)):
        return float("-inf")
    scaled = np.exp(log_mat - shifts[:, None])
    value = permanent(scaled)
    if value <= 0.0:
        return float("-inf")
    return float(np.log(value) + shifts.sum())


@dataclass(frozen=True)
class PermanentEstimate:
    """Interval estimate [low, high] guaranteed to bracket the permanent."""

    low: float
    high: float

    def __post_init__(self):
        if not (0.0 <= self.low <= self.high):
            raise ValueError(f"invalid permanent interval [{self.low}, {self.high}]")

    @property
    def midpoint(self) -> float:
        return 0.5 * (self.low + self.high)


def exact_permanent_backend(matrix, delta: float) -> PermanentEstimate:
    value = permanent(matrix)
    return PermanentEstimate(value, value)


def estimate_permanent(matrix, delta: float, backend=None) -> PermanentEstimate:
    """(1 +- delta)-accurate permanent estimate behind a pluggable backend.

    The default backend is the exact Ryser permanent (zero-width interval),
    which trivially meets the contract at desk scale; a sampling-based
    estimator can be substituted without touching callers.
    """
    if not delta > 0:
        raise ValueError("delta must be positive")
    backend = backend or exact_permanent_backend
    estimate = backend(matrix, delta)
    if not isinstance(estimate, PermanentEstimate):
        estimate = PermanentEstimate(*estimate)
    return estimate


def estimate_within_contract(estimate: PermanentEstimate, true_value: float,
                             delta: float) -> bool:
    """Check the estimator contract: bracket the truth, relative width <= 2*delta."""
    if not (estimate.low <= true_value <= estimate.high):
        return False
    width = estimate.high - estimate.low
    return width <= 2.0 * delta * max(true_value, estimate.low)


@dataclass(frozen=True)
class BvnDecomposition:
    """Convex combination of permutation matrices reconstructing a matrix."""

    terms: tuple[tuple[float, PermutationOutcome], ...]

    @property
    def weights(self) -> np.ndarray:
        return np.array([w for w, _ in self.terms])

    def reconstruct(self, n: int | None = None) -> np.ndarray:
        if not self.terms:
            raise ValueError("empty decomposition")
        n = n or self.terms[0][1].n
        out = np.zeros((n, n))
        for w, outcome in self.terms:
            out += w * outcome.matrix_view
        return out


def _support_matching(support: np.ndarray) -> PermutationOutcome | None:
    n = support.shape[0]
    value, outcome = max_weight_matching(support.astype(float))
    if value < n - 0.5:
        return None
    return outcome


def _reduce_terms(weights: list[float], outcomes: list[PermutationOutcome],
                  bound: int) -> tuple[list[float], list[PermutationOutcome]]:
    # Caratheodory pruning: permutation matrices span an affine space of
    # dimension (n-1)^2, so any surplus term admits a dependence direction
    # that can be followed until some weight vanishes.
    while len(weights) > bound:
        vecs = np.stack([o.matrix_view.ravel() for o in outcomes], axis=1)
        _, _, vh = np.linalg.svd(vecs)
        alpha = vh[-1]
        if np.max(np.abs(alpha)) < 1e-12:
            break
        if not np.any(alpha > 1e-12):
            alpha = -alpha
        w = np.array(weights)
        with np.errstate(divide="ignore"):
            ratios = np.where(alpha > 1e-12, w / alpha, np.inf)
        step = float(np.min(ratios))
        w = w - step * alpha
        keep = w > 1e-12
        weights = [float(x) for x in w[keep]]
        outcomes = [o for o, k in zip(outcomes, keep) if k]
    return weights, outcomes


def bvn_decompose(price_matrix, tol: float = 1e-9) -> BvnDecomposition:
    """Birkhoff-von Neumann decomposition by greedy peeling.

    Repeatedly extracts a perfect matching on the positive support of the
    residual and subtracts its minimum entry.  Requires a doubly stochastic
    input; failure to find a perfect matching before the residual vanishes
    signals that the input was not doubly stochastic.
    """
    q = getattr(price_matrix, "q", price_matrix)
    residual = np.array(q, dtype=float)
    if residual.ndim != 2 or residual.shape[0] != residual.shape[1]:
        raise MarketError("decomposition input must be a square matrix")
    n = residual.shape[0]
    check_tol = max(tol, 1e-12) * n * 10
    if (np.any(residual < -check_tol)
            or np.max(np.abs(residual.sum(axis=1) - 1.0)) > check_tol
            or np.max(np.abs(residual.sum(axis=0) - 1.0)) > check_tol):
        raise MarketError("input is not doubly stochastic within tolerance")

    bound = n * n - 2 * n + 2
    weights: list[float] = []
    outcomes: list[PermutationOutcome] = []
    max_iters = n * n + 2
    for _ in range(max_iters):
        if residual.max() <= tol:
            break
        outcome = _support_matching(residual > tol)
        if outcome is None:
            raise MarketError(
                "residual support admits no perfect matching; input not doubly stochastic")
        idx = np.arange(n), np.array(outcome.mapping)
        weight = float(residual[idx].min())
        weights.append(weight)
        outcomes.append(outcome)
        residual[idx] -= weight
        residual[residual < tol * 1e-3] = 0.0
    else:
        raise MarketError("decomposition did not terminate; input not doubly stochastic")

    weights, outcomes = _reduce_terms(weights, outcomes, bound)
    terms = tuple(sorted(zip(weights, outcomes), key=lambda t: t[1].mapping))
    return BvnDecomposition(terms=terms)
