"""Dense revised simplex with Bland's rule.

Kept deliberately small and dependency-free so the brute-force oracles stay
auditable end to end.  Solves

    max  c^T z   s.t.  A z <= b,  z >= 0,   with b >= 0,

starting from the all-slack basis.  Returns primal solution, objective, and
the dual vector of the inequality rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["SimplexError", "SimplexResult", "solve_max_lp"]

_PIVOT_TOL = 1e-9
_COST_TOL = 1e-9


class SimplexError(RuntimeError):
    """Simplex failed: unbounded problem or iteration budget exhausted."""


@dataclass(frozen=True)
class SimplexResult:
    x: np.ndarray
    objective: float
    duals: np.ndarray
    slacks: np.ndarray
    iterations: int


def solve_max_lp(c, a_ub, b_ub, max_iters: int = 200_000) -> SimplexResult:
    c = np.asarray(c, dtype=float)
    a = np.asarray(a_ub, dtype=float)
    b = np.asarray(b_ub, dtype=float)
    n_rows, n_vars = a.shape
    if c.shape != (n_vars,) or b.shape != (n_rows,):
        raise ValueError("inconsistent LP dimensions")
    if np.any(b < 0):
        raise ValueError("solve_max_lp requires b >= 0 for the slack-basis start")

    # Columns 0..n_vars-1 are structural, n_vars..n_vars+n_rows-1 are slacks.
    full_c = np.concatenate([c, np.zeros(n_rows)])
    basis = np.arange(n_vars, n_vars + n_rows)
    b_inv = np.eye(n_rows)
    x_basic = b.copy()

    iterations = 0
    while True:
        if iterations > max_iters:
            raise SimplexError(f"iteration budget {max_iters} exhausted")
        duals = full_c[basis] @ b_inv
        # Reduced costs of structural then slack columns.
        reduced = np.concatenate([c - duals @ a, -duals])
        reduced[basis] = 0.0
        candidates = np.flatnonzero(reduced > _COST_TOL)
        if candidates.size == 0:
            break
        entering = int(candidates[0])  # Bland: smallest improving index

        col = a[:, entering] if entering < n_vars else np.eye(n_rows)[:, entering - n_vars]
        direction = b_inv @ col
        positive = direction > _PIVOT_TOL
        if not np.any(positive):
            raise SimplexError("LP is unbounded")
        with np.errstate(divide="ignore"):
            ratios = np.where(positive, x_basic / direction, np.inf)
        min_ratio = np.min(ratios)
        ties = np.flatnonzero(ratios <= min_ratio + _PIVOT_TOL * (1.0 + abs(min_ratio)))
        leaving_row = int(ties[np.argmin(basis[ties])])  # Bland: smallest basic index

        pivot = direction[leaving_row]
        b_inv[leaving_row] /= pivot
        x_basic[leaving_row] /= pivot
        scale = direction.copy()
        scale[leaving_row] = 0.0
        b_inv -= np.outer(scale, b_inv[leaving_row])
        x_basic -= scale * x_basic[leaving_row]
        basis[leaving_row] = entering
        iterations += 1

    x = np.zeros(n_vars + n_rows)
    x[basis] = np.maximum(x_basic, 0.0)
    duals = full_c[basis] @ b_inv
    objective = float(full_c[basis] @ x_basic)
    return SimplexResult(
        x=x[:n_vars],
        objective=objective,
        duals=np.maximum(duals, 0.0),
        slacks=x[n_vars:],
        iterations=iterations,
    )
