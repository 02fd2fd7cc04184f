"""Domain types and order-book ingestion for permutation betting markets.

A market ranks ``n`` candidates into ``n`` positions.  A trader's bet is an
``n x n`` 0/1 bidding matrix marking the candidate-position pairs wagered
on; the realized outcome is a permutation, and the proportional payout of a
bet is the number of marked pairs the outcome hits.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

DEFAULT_THETA = 1e-4

__all__ = [
    "MarketError",
    "BidOrder",
    "PermutationOutcome",
    "SolverConfig",
    "MarketInstance",
    "PriceMatrix",
    "load_market",
    "payout",
    "fixed_reward_payout",
]


class MarketError(ValueError):
    """Invalid market document or inconsistent market data."""


def _as_matrix(values, n: int | None = None, what: str = "matrix") -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise MarketError(f"{what} must be square, got shape {arr.shape}")
    if n is not None and arr.shape[0] != n:
        raise MarketError(f"{what} must be {n}x{n}, got {arr.shape[0]}x{arr.shape[1]}")
    if not np.all(np.isfinite(arr)):
        raise MarketError(f"{what} has non-finite entries")
    return arr


@dataclass(frozen=True)
class BidOrder:
    """One trader's bid: bidding matrix, limit price, limit quantity.

    The bidding matrix is 0/1; per accepted unit the trader is paid one
    dollar for each matrix entry that coincides with the outcome
    permutation, so the unit payout ranges over ``0..n`` and the limit
    price may legitimately exceed 1.
    """

    id: str
    bid_matrix: np.ndarray
    limit_price: float
    limit_quantity: float

    def __post_init__(self):
        mat = _as_matrix(self.bid_matrix, what=f"bid matrix of {self.id!r}")
        if not np.all((mat == 0.0) | (mat == 1.0)):
            raise MarketError(f"order {self.id!r}: bid matrix entries must be 0 or 1")
        if not mat.any():
            raise MarketError(f"order {self.id!r}: bid matrix has no nonzero entry")
        mat.flags.writeable = False
        object.__setattr__(self, "bid_matrix", mat)
        object.__setattr__(self, "limit_price", float(self.limit_price))
        object.__setattr__(self, "limit_quantity", float(self.limit_quantity))
        if not self.limit_price > 0:
            raise MarketError(f"order {self.id!r}: limit price must be positive")
        if not self.limit_quantity > 0:
            raise MarketError(f"order {self.id!r}: limit quantity must be positive")

    @property
    def n(self) -> int:
        return self.bid_matrix.shape[0]


@dataclass(frozen=True)
class PermutationOutcome:
    """An outcome ranking: entry ``i`` of ``mapping`` is candidate i's position."""

    mapping: tuple[int, ...]

    def __post_init__(self):
        mapping = tuple(int(j) for j in self.mapping)
        object.__setattr__(self, "mapping", mapping)
        n = len(mapping)
        if sorted(mapping) != list(range(n)):
            raise MarketError(f"mapping {mapping} is not a permutation of 0..{n - 1}")

    @property
    def n(self) -> int:
        return len(self.mapping)

    @property
    def matrix_view(self) -> np.ndarray:
        mat = np.zeros((self.n, self.n))
        mat[np.arange(self.n), list(self.mapping)] = 1.0
        return mat

    @classmethod
    def from_matrix(cls, mat) -> "PermutationOutcome":
        mat = _as_matrix(mat, what="permutation matrix")
        n = mat.shape[0]
        if not (np.all((mat == 0.0) | (mat == 1.0))
                and np.all(mat.sum(axis=0) == 1.0) and np.all(mat.sum(axis=1) == 1.0)):
            raise MarketError("matrix is not a permutation matrix")
        return cls(tuple(int(np.argmax(mat[i])) for i in range(n)))


@dataclass(frozen=True)
class SolverConfig:
    feasibility_tol: float = 1e-8
    gap_tol: float = 1e-7
    certification_tol: float = 1e-6
    homotopy_schedule: tuple[float, ...] = tuple(10.0 ** -k for k in range(1, 9))

    def __post_init__(self):
        sched = tuple(float(c) for c in self.homotopy_schedule)
        if len(sched) < 2 or any(c <= 0 for c in sched) or any(b >= a for a, b in zip(sched, sched[1:])):
            raise MarketError("homotopy schedule must be strictly decreasing with >= 2 positive scales")
        object.__setattr__(self, "homotopy_schedule", sched)


@dataclass(frozen=True)
class MarketInstance:
    """A call-auction round: dimension, order book, starting orders, tolerances."""

    n: int
    orders: tuple[BidOrder, ...]
    theta: np.ndarray = None
    tolerances: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        if int(self.n) < 2:
            raise MarketError("market dimension n must be >= 2")
        object.__setattr__(self, "n", int(self.n))
        object.__setattr__(self, "orders", tuple(self.orders))
        for order in self.orders:
            if order.n != self.n:
                raise MarketError(
                    f"order {order.id!r}: bid matrix is {order.n}x{order.n}, market has n={self.n}")
        theta = self.theta
        if theta is None:
            theta = np.full((self.n, self.n), DEFAULT_THETA)
        theta = _as_matrix(theta, self.n, "theta")
        if np.any(theta <= 0):
            raise MarketError("starting orders theta must be strictly positive")
        theta.flags.writeable = False
        object.__setattr__(self, "theta", theta)

    @property
    def m(self) -> int:
        return len(self.orders)

    def limit_prices_vector(self) -> np.ndarray:
        return np.array([o.limit_price for o in self.orders])

    def limit_quantities_vector(self) -> np.ndarray:
        return np.array([o.limit_quantity for o in self.orders])

    def bid_stack(self) -> np.ndarray:
        """All bidding matrices stacked as an (m, n, n) array."""
        if not self.orders:
            return np.zeros((0, self.n, self.n))
        return np.stack([o.bid_matrix for o in self.orders])


@dataclass(frozen=True)
class PriceMatrix:
    """Doubly stochastic matrix of marginal candidate-position prices."""

    q: np.ndarray
    tol: float = 1e-6

    def __post_init__(self):
        q = _as_matrix(self.q, what="price matrix")
        tol = float(self.tol)
        if np.any(q < -tol) or np.any(q > 1 + tol):
            raise MarketError("price matrix entries must lie in [0, 1]")
        if (np.max(np.abs(q.sum(axis=1) - 1.0)) > tol
                or np.max(np.abs(q.sum(axis=0) - 1.0)) > tol):
            raise MarketError("price matrix is not doubly stochastic within tolerance")
        q.flags.writeable = False
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "tol", tol)

    @property
    def n(self) -> int:
        return self.q.shape[0]

    def doubly_stochastic_residual(self) -> float:
        return float(max(np.max(np.abs(self.q.sum(axis=1) - 1.0)),
                         np.max(np.abs(self.q.sum(axis=0) - 1.0))))


def load_market(source, format: str = "json") -> MarketInstance:
    """Parse and validate an order-book document into a MarketInstance.

    ``source`` may be a byte/str payload or a readable stream.  Candidate
    and position indices are 0-based.  A missing ``theta`` defaults to a
    uniform 1e-4 seed on every pair.
    """
    if format != "json":
        raise MarketError(f"unsupported format {format!r}")
    if hasattr(source, "read"):
        source = source.read()
    if isinstance(source, bytes):
        source = source.decode("utf-8")
    try:
        doc = json.loads(source)
    except json.JSONDecodeError as exc:
        raise MarketError(f"malformed JSON document: {exc}") from exc
    if not isinstance(doc, dict):
        raise MarketError("top-level document must be an object")
    try:
        n = int(doc["n"])
    except (KeyError, TypeError, ValueError) as exc:
        raise MarketError("document must carry an integer field 'n'") from exc
    orders = []
    for entry in doc.get("orders", []):
        try:
            order_id = str(entry["id"])
            pairs = entry["pairs"]
            limit_price = float(entry["limit_price"])
            limit_quantity = float(entry["limit_quantity"])
        except (KeyError, TypeError, ValueError) as exc:
            raise MarketError(f"malformed order entry {entry!r}") from exc
        mat = np.zeros((n, n))
        for pair in pairs:
            if len(pair) != 2:
                raise MarketError(f"order {order_id!r}: pair {pair!r} must be [candidate, position]")
            cand, pos = int(pair[0]), int(pair[1])
            if not (0 <= cand < n and 0 <= pos < n):
                raise MarketError(
                    f"order {order_id!r}: pair index out of range for n={n}: ({cand}, {pos})")
            mat[cand, pos] = 1.0
        orders.append(BidOrder(order_id, mat, limit_price, limit_quantity))
    ids = [o.id for o in orders]
    if len(set(ids)) != len(ids):
        raise MarketError("duplicate order ids in document")
    theta = doc.get("theta")
    tol_overrides = doc.get("tolerances", {})
    config = SolverConfig(**tol_overrides) if tol_overrides else SolverConfig()
    return MarketInstance(n=n, orders=tuple(orders), theta=theta, tolerances=config)


def payout(order: BidOrder, outcome: PermutationOutcome) -> float:
    """Proportional payout: count of bid entries hit by the outcome."""
    if order.n != outcome.n:
        raise MarketError(f"dimension mismatch: order is {order.n}, outcome is {outcome.n}")
    idx = np.arange(order.n)
    return float(order.bid_matrix[idx, list(outcome.mapping)].sum())


def fixed_reward_payout(order: BidOrder, outcome: PermutationOutcome) -> float:
    """All-or-nothing payout: 1 if any bid entry is hit, else 0."""
    return 1.0 if payout(order, outcome) > 0 else 0.0
