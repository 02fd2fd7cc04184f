"""Clearing engine for proportional permutation betting.

Solves the organizer's compact problems in two modes:

* ``clear_lp``      -- the linear program (no seed wagers); any optimal dual
  price matrix is returned.
* ``clear_barrier`` -- the log-barrier program seeded with starting orders
  theta, whose dual price matrix is unique and strictly positive.

The barrier solve runs damped Newton with a fraction-to-boundary rule on
the dual program (variables: price matrix entries and per-order duals,
with the doubly stochastic equalities kept explicit).  Working on the dual
side keeps every variable well scaled however small the seed wagers get;
the primal quantities, potentials, and slack matrix are recovered from the
multipliers, and the slack identity s = theta / Q holds by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import linprog

from .market import MarketError, MarketInstance, PriceMatrix
from .permcomb import max_weight_matching

__all__ = [
    "SolverError",
    "HomotopyError",
    "CertificationReport",
    "ClearingResult",
    "HomotopyTrace",
    "worst_case_payout",
    "clear_lp",
    "clear_barrier",
    "certify",
    "limit_prices",
    "homotopy_trace",
    "dual_objective_at",
]

# Relative fill thresholds splitting rejected / interior / fully-filled.
_FILL_REL_TOL = 1e-6


class SolverError(RuntimeError):
    """A clearing solve failed to converge or the backend rejected it."""


class HomotopyError(SolverError):
    """The theta -> 0 homotopy did not settle; carries the last iterates."""

    def __init__(self, message, last_iterates=None):
        super().__init__(message)
        self.last_iterates = last_iterates


@dataclass(frozen=True)
class CertificationReport:
    """Residuals certifying a clearing result against its instance."""

    parimutuel_residual: float
    consistency_violations: tuple[tuple[str, str, float], ...]
    kkt_max_residual: float
    doubly_stochastic_residual: float
    threshold: float
    details: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return (self.parimutuel_residual <= self.threshold
                and self.kkt_max_residual <= self.threshold
                and self.doubly_stochastic_residual <= self.threshold
                and not self.consistency_violations)


@dataclass(frozen=True)
class ClearingResult:
    """Primal/dual bundle of one clearing solve."""

    x: np.ndarray
    v: np.ndarray
    w: np.ndarray
    s: np.ndarray
    r: float
    q: PriceMatrix
    y: np.ndarray
    objective_primal: float
    objective_dual: float
    theta_used: np.ndarray
    mode: str
    kkt_report: CertificationReport | None = None
    stats: dict = field(default_factory=dict)


@dataclass(frozen=True)
class HomotopyTrace:
    scales: tuple[float, ...]
    prices: tuple[np.ndarray, ...]
    diffs: tuple[float, ...]
    dual_objectives: tuple[float, ...]


def worst_case_payout(weights) -> tuple[float, "PermutationOutcome"]:
    """Worst-case total payout of aggregate accepted weights: the maximum
    weight perfect matching over outcome permutations."""
    weights = np.asarray(weights, dtype=float)
    if weights.ndim != 2 or weights.shape[0] != weights.shape[1]:
        raise MarketError("worst_case_payout needs a square matrix")
    if np.any(weights < 0):
        raise MarketError("aggregate weights must be nonnegative")
    return max_weight_matching(weights)


def _exposure(instance: MarketInstance, x: np.ndarray) -> np.ndarray:
    """Aggregate accepted weight per candidate-position cell."""
    if instance.m == 0:
        return np.zeros((instance.n, instance.n))
    return np.tensordot(x, instance.bid_stack(), axes=1)


def clear_lp(instance: MarketInstance) -> ClearingResult:
    """Solve the compact clearing LP; theta is ignored.

    The dual price matrix returned by the LP backend is doubly stochastic
    and optimal but need not be unique.
    """
    n, m = instance.n, instance.m
    pi = instance.limit_prices_vector()
    qty = instance.limit_quantities_vector()
    bids = instance.bid_stack()

    n_vars = m + 2 * n
    cost = np.concatenate([-pi, np.ones(2 * n)])
    a_ub = np.zeros((n * n, n_vars))
    if m:
        a_ub[:, :m] = bids.reshape(m, n * n).T
    for i in range(n):
        for j in range(n):
            a_ub[i * n + j, m + i] = -1.0
            a_ub[i * n + j, m + n + j] = -1.0
    b_ub = np.zeros(n * n)
    bounds = [(0.0, float(qk)) for qk in qty] + [(None, None)] * (2 * n)

    res = linprog(cost, A_ub=a_ub, b_ub=b_ub, bounds=bounds, method="highs",
                  options={"presolve": True})
    if res.status != 0:
        raise SolverError(f"LP backend failed (status {res.status}): {res.message}")

    x = np.clip(res.x[:m], 0.0, qty) if m else np.zeros(0)
    v = res.x[m:m + n]
    w = res.x[m + n:]
    q_mat = -np.asarray(res.ineqlin.marginals).reshape(n, n)
    q_mat = np.clip(q_mat, 0.0, None)
    exposure = _exposure(instance, x)
    s = v[:, None] + w[None, :] - exposure
    r = float(v.sum() + w.sum())
    costs = bids.reshape(m, n * n) @ q_mat.ravel() if m else np.zeros(0)
    y = np.maximum(0.0, pi - costs)
    objective_primal = float(pi @ x - r)
    objective_dual = float(qty @ y)

    result = ClearingResult(
        x=x, v=v, w=w, s=s, r=r,
        q=PriceMatrix(q_mat, tol=instance.tolerances.certification_tol),
        y=y,
        objective_primal=objective_primal,
        objective_dual=objective_dual,
        theta_used=np.zeros((n, n)),
        mode="lp",
        stats={"iterations": int(getattr(res, "nit", 0))},
    )
    return replace(result, kkt_report=certify(instance, result))


def _barrier_center(instance: MarketInstance, theta: np.ndarray, mu: float,
                    state: dict, tol: float, prox: float = 0.0,
                    max_newton: int = 120):
    """Newton iterations to the mu-center of the seeded dual program.

    Variables are the price matrix entries, the per-order duals y, and the
    per-order constraint slacks d, all kept strictly positive; the slack
    definition is carried as an equality constraint so small slacks never
    form by catastrophic cancellation.  The multipliers of those equalities
    are the accepted quantities x.
    """
    n, m = instance.n, instance.m
    pi = instance.limit_prices_vector()
    qty = instance.limit_quantities_vector()
    a_rows = instance.bid_stack().reshape(m, n * n)
    n_u = n * n + 2 * m

    # Doubly stochastic equalities (last column sum implied), then the
    # slack-defining rows  pi_k - A_k.Q - y_k + d_k = 0.
    n_eq = 2 * n - 1 + m
    jac = np.zeros((n_eq, n_u))
    for i in range(n):
        jac[i, i * n:(i + 1) * n] = 1.0
    for j in range(n - 1):
        jac[n + j, j:n * n:n] = 1.0
    if m:
        rows = 2 * n - 1 + np.arange(m)
        jac[rows, :n * n] = -a_rows
        jac[rows, n * n + np.arange(m)] = -1.0
        jac[rows, n * n + m + np.arange(m)] = 1.0
    eq_rhs = np.concatenate([np.ones(2 * n - 1), -pi])

    def split(u):
        return u[:n * n], u[n * n:n * n + m], u[n * n + m:]

    def residual(u, z):
        qv, yv, dv = split(u)
        grad = np.empty(n_u)
        grad[:n * n] = -theta.ravel() / qv
        grad[n * n:n * n + m] = qty - mu / yv
        grad[n * n + m:] = -mu / dv
        return np.concatenate([grad + jac.T @ z, jac @ u - eq_rhs])

    u = np.concatenate([state["q"].ravel(), state["y"], state["d"]])
    z = state["mult"].copy()
    res_vec = residual(u, z)
    for _ in range(max_newton):
        if np.max(np.abs(res_vec)) <= tol:
            break
        qv, yv, dv = split(u)
        # The proximal term damps steps along directions the barrier can no
        # longer resolve in double precision (tiny theta scales); it alters
        # the Newton path, not the converged point.
        hdiag = np.concatenate([theta.ravel() / qv ** 2 + prox,
                                mu / yv ** 2, mu / dv ** 2])
        kkt = np.zeros((n_u + n_eq, n_u + n_eq))
        kkt[np.arange(n_u), np.arange(n_u)] = hdiag
        kkt[:n_u, n_u:] = jac.T
        kkt[n_u:, :n_u] = jac
        try:
            step = np.linalg.solve(kkt, -res_vec)
            # One refinement pass; the system gets stiff as mu shrinks.
            step += np.linalg.solve(kkt, -res_vec - kkt @ step)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(kkt, -res_vec, rcond=None)[0]
        if not np.all(np.isfinite(step)):
            step = np.linalg.lstsq(kkt, -res_vec, rcond=None)[0]
        du, dz = step[:n_u], step[n_u:]

        # Fraction-to-boundary on every positive variable.
        alpha = 1.0
        neg = du < 0
        if np.any(neg):
            alpha = min(alpha, 0.995 * float(np.min(u[neg] / -du[neg])))

        base = np.linalg.norm(res_vec)
        accepted = False
        for _ in range(60):
            u_try = u + alpha * du
            z_try = z + alpha * dz
            if np.all(u_try > 0):
                res_try = residual(u_try, z_try)
                if (np.all(np.isfinite(res_try))
                        and np.linalg.norm(res_try) <= (1 - 1e-4 * alpha) * base):
                    u, z, res_vec = u_try, z_try, res_try
                    accepted = True
                    break
            alpha *= 0.5
        if not accepted:
            # Stalled at this centering accuracy; the caller decides if the
            # achieved residual is acceptable.
            break
    qv, yv, dv = split(u)
    state = {"q": qv.reshape(n, n), "y": yv, "d": dv, "mult": z}
    return state, float(np.max(np.abs(res_vec)))


def clear_barrier(instance: MarketInstance, theta_scale: float = 1.0,
                  start=None, warm_state: dict | None = None) -> ClearingResult:
    """Solve the seeded clearing program; the price matrix is unique.

    ``start`` optionally carries ``(Q0, y0)`` to begin from a different
    interior point (the optimum does not depend on it).  ``warm_state`` is
    the ``stats["state"]`` of a previous solve of the same book at a nearby
    theta scale; it lets the homotopy re-center at the final barrier weight
    directly instead of replaying the whole schedule.
    """
    if not theta_scale > 0:
        raise SolverError("theta scale must be positive")
    n, m = instance.n, instance.m
    theta = instance.theta * theta_scale
    pi = instance.limit_prices_vector()
    qty = instance.limit_quantities_vector()
    a_rows = instance.bid_stack().reshape(m, n * n)

    scale = max(1.0, float(np.max(pi)) if m else 1.0, float(np.max(qty)) if m else 1.0)
    # The auxiliary barrier weight rides down with the theta scale so the
    # two barriers keep a fixed ratio along the homotopy; otherwise the
    # accepted-quantity face position would slide as theta shrinks.
    mu_final = 1e-13 * scale * min(1.0, theta_scale)
    tol_final = 1e-13 * scale * max(1.0, n)

    prox = 1e-6 * scale
    res_norm = np.inf
    if warm_state is not None:
        state = {k: np.array(v) for k, v in warm_state.items()}
        state, res_norm = _barrier_center(instance, theta, mu_final, state,
                                          tol_final, prox=prox)
    if res_norm > 1e-8 * scale:
        if start is not None:
            q_mat = np.array(start[0], dtype=float)
            if q_mat.shape != (n, n) or np.any(q_mat <= 0):
                raise SolverError("start price matrix must be strictly positive n x n")
            y = np.array(start[1], dtype=float) if start[1] is not None else np.ones(m)
            y = np.maximum(y, 1e-8)
        else:
            q_mat = np.full((n, n), 1.0 / n)
            y = np.ones(m)
        if m:
            d0 = a_rows @ q_mat.ravel() + y - pi
            y = y + np.maximum(0.0, 1.0 - d0)
            d = a_rows @ q_mat.ravel() + y - pi
        else:
            d = np.zeros(0)
        state = {"q": q_mat, "y": y, "d": d,
                 "mult": np.zeros(2 * n - 1 + m)}
        mu = scale
        while True:
            stage_tol = max(tol_final, mu * 1e-4)
            state, res_norm = _barrier_center(instance, theta, mu, state,
                                              stage_tol, prox=prox)
            if mu <= mu_final:
                break
            mu = max(mu * 0.12, mu_final)

    if res_norm > 1e-8 * scale:
        raise SolverError(f"barrier solve did not converge (residual {res_norm:.3e})")

    q_mat = state["q"]
    y = state["y"]
    mult = state["mult"]
    s = theta / q_mat
    v = mult[:n].copy()
    w = np.concatenate([mult[n:2 * n - 1], [0.0]])
    x = np.clip(mult[2 * n - 1:], 0.0, qty) if m else np.zeros(0)
    r = float(v.sum() + w.sum())
    objective_primal = float(pi @ x - r + np.sum(theta * np.log(s)))
    objective_dual = float(qty @ y - np.sum(theta * np.log(q_mat))
                           + np.sum(theta * (np.log(theta) - 1.0)))

    result = ClearingResult(
        x=x, v=v, w=w, s=s, r=r,
        q=PriceMatrix(q_mat, tol=instance.tolerances.certification_tol),
        y=y.copy(),
        objective_primal=objective_primal,
        objective_dual=objective_dual,
        theta_used=theta,
        mode="barrier",
        stats={"mu_final": mu_final, "residual": res_norm,
               "theta_scale": theta_scale, "state": state},
    )
    return replace(result, kkt_report=certify(instance, result))


def certify(instance: MarketInstance, result: ClearingResult) -> CertificationReport:
    """Evaluate the parimutuel, price-consistency, and KKT residuals."""
    n, m = instance.n, instance.m
    pi = instance.limit_prices_vector()
    qty = instance.limit_quantities_vector()
    q_mat = result.q.q
    theta = result.theta_used
    tol = instance.tolerances.certification_tol

    ds_residual = result.q.doubly_stochastic_residual()

    exposure = _exposure(instance, result.x)
    costs = (instance.bid_stack().reshape(m, n * n) @ q_mat.ravel()
             if m else np.zeros(0))
    parimutuel = abs(result.r - float(result.x @ costs) - float(theta.sum()))

    residuals = {
        "primal_slack_identity": float(np.max(np.abs(
            result.v[:, None] + result.w[None, :] - result.s - exposure))),
        "slack_nonneg": float(max(0.0, -np.min(result.s))) if result.s.size else 0.0,
        "price_nonneg": float(max(0.0, -np.min(q_mat))),
        "dual_feasibility": float(np.max(np.maximum(0.0, pi - costs - result.y))) if m else 0.0,
        "stationarity_complementarity": float(np.max(np.abs(
            result.x * (pi - costs - result.y)))) if m else 0.0,
        "bound_complementarity": float(np.max(np.abs(result.y * (qty - result.x)))) if m else 0.0,
        "box": float(np.max(np.maximum(0.0, np.maximum(-result.x, result.x - qty)))) if m else 0.0,
    }
    if result.mode == "barrier":
        residuals["centering"] = float(np.max(np.abs(q_mat * result.s - theta)))
    else:
        residuals["complementarity"] = float(np.max(np.abs(q_mat * result.s)))
    kkt_max = max(residuals.values())

    violations = []
    for k, order in enumerate(instance.orders):
        c_k = float(costs[k])
        fill = result.x[k] / qty[k]
        if fill <= _FILL_REL_TOL:
            amount = max(0.0, pi[k] - c_k)
            label = "rejected-above-price"
        elif fill >= 1.0 - _FILL_REL_TOL:
            amount = max(0.0, c_k - pi[k])
            label = "accepted-below-price"
        else:
            amount = abs(c_k - pi[k])
            label = "accepted-below-price" if c_k > pi[k] else "rejected-above-price"
        if amount > tol:
            violations.append((order.id, label, float(amount)))

    return CertificationReport(
        parimutuel_residual=float(parimutuel),
        consistency_violations=tuple(violations),
        kkt_max_residual=float(kkt_max),
        doubly_stochastic_residual=float(ds_residual),
        threshold=tol,
        details=residuals,
    )


def dual_objective_at(instance: MarketInstance, q_mat: np.ndarray) -> float:
    """Value of the LP dual at a fixed price matrix (optimal y filled in)."""
    if instance.m == 0:
        return 0.0
    pi = instance.limit_prices_vector()
    qty = instance.limit_quantities_vector()
    costs = instance.bid_stack().reshape(instance.m, -1) @ np.asarray(q_mat).ravel()
    return float(qty @ np.maximum(0.0, pi - costs))


def homotopy_trace(instance: MarketInstance, schedule=None) -> HomotopyTrace:
    """Barrier solves along a decreasing theta-scale schedule, warm-started."""
    schedule = tuple(schedule) if schedule is not None else instance.tolerances.homotopy_schedule
    if len(schedule) < 2 or any(c <= 0 for c in schedule) or \
            any(b >= a for a, b in zip(schedule, schedule[1:])):
        raise SolverError("homotopy schedule must be strictly decreasing and positive")
    prices = []
    dual_objs = []
    warm = None
    for scale in schedule:
        result = clear_barrier(instance, theta_scale=scale, warm_state=warm)
        prices.append(result.q.q)
        dual_objs.append(dual_objective_at(instance, result.q.q))
        warm = result.stats["state"]
    diffs = tuple(float(np.max(np.abs(b - a))) for a, b in zip(prices, prices[1:]))
    return HomotopyTrace(scales=tuple(schedule), prices=tuple(prices),
                         diffs=diffs, dual_objectives=tuple(dual_objs))


def limit_prices(instance: MarketInstance, schedule=None) -> PriceMatrix:
    """Limit price matrix as the starting orders are scaled to zero.

    Runs the homotopy and checks the iterates settle: the max-entry
    differences over the last three scales must not grow (beyond a small
    noise floor).  The final iterate is returned.
    """
    trace = homotopy_trace(instance, schedule)
    floor = 1e-9
    tail = trace.diffs[-3:] if len(trace.diffs) >= 3 else trace.diffs
    for earlier, later in zip(tail, tail[1:]):
        if later > earlier + floor:
            raise HomotopyError(
                f"homotopy iterates not settling: diffs {trace.diffs}",
                last_iterates=trace.prices[-2:])
    return PriceMatrix(trace.prices[-1], tol=instance.tolerances.certification_tol)
