"""Sensor placements that keep the constrained ML consistent.

A placement is proper when ``U' J U`` has full rank ``N`` on the topology
with every changeable pipeline open, using the explicit null basis
``U = [I; -diag(c)^-1 B]``.  ``U' J U`` is a sum of one rank-one term per
sensor:

* pressure sensor at node ``n``: ``e_n e_n' / sigma_p^2``;
* flow meter on pipeline ``l``: ``b_l b_l' / (c_l sigma_phi)^2`` with
  ``b_l`` row ``l`` of ``B``;
* injection sensor at node ``n``: ``B' diag(c)^-1 a_n a_n' diag(c)^-1 B /
  sigma_q^2`` with ``a_n`` column ``n`` of ``A``.

Sensors are indexed in the order pressure, injection, fixed-pipeline flow,
changeable-pipeline flow.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .network import GasNetwork, TopologyState, build_incidence
from .sensing import NoiseModel, SensorPlacement

__all__ = [
    "PlacementCosts",
    "RankCheck",
    "sensor_vectors",
    "placement_rank_condition",
    "placement_cost",
    "greedy_placement",
    "exhaustive_placement",
    "PlacementResult",
]

RANK_RTOL = 1e-10


@dataclass(frozen=True, eq=False)
class PlacementCosts:
    """Per-sensor costs; all entries must be non-negative."""

    d_p: np.ndarray
    d_q: np.ndarray
    d_F: np.ndarray
    d_C: np.ndarray

    def __post_init__(self):
        for name in ("d_p", "d_q", "d_F", "d_C"):
            v = np.array(getattr(self, name), dtype=float).ravel()
            if np.any(v < 0) or not np.all(np.isfinite(v)):
                raise ValueError(f"{name} must be finite and non-negative")
            v.setflags(write=False)
            object.__setattr__(self, name, v)

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.d_p, self.d_q, self.d_F, self.d_C])

    @classmethod
    def from_vector(cls, network: GasNetwork, d) -> "PlacementCosts":
        d = np.asarray(d, dtype=float)
        N, LF = network.N, network.L_F
        if d.shape != (2 * N + network.L,):
            raise ValueError(f"expected {2 * N + network.L} costs, got {d.shape}")
        return cls(d[:N], d[N:2 * N], d[2 * N:2 * N + LF], d[2 * N + LF:])

    @classmethod
    def uniform(cls, network: GasNetwork, value: float = 1.0) -> "PlacementCosts":
        return cls.from_vector(network, np.full(2 * network.N + network.L, float(value)))

    @classmethod
    def random(cls, network: GasNetwork, rng: np.random.Generator, low: float = 1.0,
               high: float = 70.0) -> "PlacementCosts":
        """Independent uniform costs on ``[low, high]``."""
        return cls.from_vector(network, rng.uniform(low, high, 2 * network.N + network.L))

    def check(self, network: GasNetwork) -> None:
        if (len(self.d_p), len(self.d_q), len(self.d_F), len(self.d_C)) != \
                (network.N, network.N, network.L_F, network.L_C):
            raise ValueError("cost vector lengths do not match the network")


@dataclass(frozen=True)
class RankCheck:
    proper: bool
    rank: int


@dataclass(frozen=True, eq=False)
class PlacementResult:
    placement: SensorPlacement
    cost: float
    checks_performed: int
    swaps: int = 0


def _unit_noise(noise):
    return NoiseModel(1.0, 1.0, 1.0) if noise is None else noise


def sensor_vectors(network: GasNetwork, noise: NoiseModel | None = None) -> np.ndarray:
    """Rows ``v_s`` with ``U' J U = sum_s delta_s v_s v_s'`` (per sample).

    Built on the topology with all changeable pipelines open.
    """
    noise = _unit_noise(noise)
    noise.require_positive()
    open_all = TopologyState.make(network, [False] * network.L_C)
    inc = build_incidence(network, open_all)
    A, B, c = inc.A_declared, inc.B, network.c
    N = network.N
    W = B / c[:, None]                          # diag(c)^-1 B, L x N
    v_p = np.eye(N) / noise.sigma_p
    v_q = (A.T @ W) / noise.sigma_q             # row n: a_n' diag(c)^-1 B
    v_f = W / noise.sigma_phi
    return np.vstack([v_p, v_q, v_f])


def _rank(G) -> int:
    if G.size == 0:
        return 0
    s = np.linalg.svd(G, compute_uv=False)
    if s.max(initial=0.0) <= 0:
        return 0
    return int(np.sum(s > RANK_RTOL * s.max()))


def placement_rank_condition(network: GasNetwork, placement: SensorPlacement,
                             noise: NoiseModel | None = None) -> RankCheck:
    """Rank of ``U' J U`` on the all-open topology; proper iff it equals ``N``.

    Unit noise is used when ``noise`` is None; the rank does not depend on
    the (positive) noise levels.
    """
    placement.check(network)
    V = sensor_vectors(network, noise)
    d = placement.vector.astype(bool)
    G = V[d].T @ V[d]
    r = _rank(G)
    return RankCheck(proper=r == network.N, rank=r)


def placement_cost(placement: SensorPlacement, costs: PlacementCosts) -> float:
    """Total cost of the installed sensors."""
    if len(placement.vector) != len(costs.vector):
        raise ValueError("placement and cost vectors have different lengths")
    return float(placement.vector @ costs.vector)


def _proper_mask(V, mask, N) -> bool:
    return _rank(V[mask].T @ V[mask]) == N if mask.any() else N == 0


def greedy_placement(network: GasNetwork, costs: PlacementCosts,
                     noise: NoiseModel | None = None) -> PlacementResult:
    """Local search by single sensor swaps, starting from all pressure sensors.

    Installed sensors are tried for removal in order of decreasing cost; for
    each, uninstalled cheaper sensors are tried in order of increasing cost.
    The first swap that keeps the placement proper is applied and the scan
    restarts.  The search stops when no swap lowers the cost.
    """
    costs.check(network)
    V = sensor_vectors(network, noise)
    d = costs.vector
    N = network.N
    mask = np.zeros(len(d), dtype=bool)
    mask[:N] = True
    checks = 1
    if not _proper_mask(V, mask, N):
        raise RuntimeError("the all-pressure placement is not proper")
    swaps = 0
    improved = True
    while improved:
        improved = False
        installed = sorted(np.flatnonzero(mask), key=lambda i: (-d[i], i))
        spare = sorted(np.flatnonzero(~mask), key=lambda i: (d[i], i))
        for out in installed:
            for add in spare:
                if d[add] >= d[out]:
                    break
                trial = mask.copy()
                trial[out] = False
                trial[add] = True
                checks += 1
                if _proper_mask(V, trial, N):
                    mask = trial
                    swaps += 1
                    improved = True
                    break
            if improved:
                break
    pl = SensorPlacement.from_vector(network, mask.astype(int))
    return PlacementResult(pl, placement_cost(pl, costs), checks, swaps)


def exhaustive_placement(network: GasNetwork, costs: PlacementCosts,
                         noise: NoiseModel | None = None, size_cap: int = 2_000_000,
                         *, prune: bool = True) -> PlacementResult:
    """Minimum-cost proper placement by enumeration.

    With ``prune`` a depth-first search over sensors sorted by cost only
    extends sets whose vectors are linearly independent (a proper placement
    of minimum cost never needs more than ``N`` sensors once costs are
    non-negative) and cuts branches whose cost plus the cheapest possible
    completion cannot beat the incumbent.  Without ``prune`` every subset of
    at least ``N`` sensors is checked.

    Raises
    ------
    ValueError
        If more than ``size_cap`` nodes (or subsets) would be visited.
    """
    costs.check(network)
    V = sensor_vectors(network, noise)
    d = costs.vector
    N = network.N
    n_all = len(d)
    if not prune:
        total = 2**n_all
        if total > size_cap:
            raise ValueError(f"{total} subsets exceed size_cap={size_cap}")
        best, best_cost, checks = None, np.inf, 0
        for k in range(N, n_all + 1):
            for sub in itertools.combinations(range(n_all), k):
                idx = list(sub)
                cost = d[idx].sum()
                if cost >= best_cost:
                    continue
                mask = np.zeros(n_all, dtype=bool)
                mask[idx] = True
                checks += 1
                if _proper_mask(V, mask, N):
                    best, best_cost = mask, cost
        pl = SensorPlacement.from_vector(network, best.astype(int))
        return PlacementResult(pl, placement_cost(pl, costs), checks)

    order = np.argsort(d, kind="stable")
    dv = d[order]
    Vo = V[order]
    # cheapest completion with m more sensors from position i onward
    incumbent = greedy_placement(network, costs, noise)
    best_cost = incumbent.cost
    best = incumbent.placement.vector.astype(bool)
    visited = 0
    tol = RANK_RTOL * max(1.0, np.abs(V).max())

    def extend(start, basis, chosen, cost):
        # basis: orthonormal rows spanning the chosen vectors
        nonlocal best_cost, best, visited
        visited += 1
        if visited > size_cap:
            raise ValueError(f"search exceeded size_cap={size_cap} nodes")
        k = len(chosen)
        if k == N:
            if cost < best_cost - 1e-12:
                best_cost = cost
                best = np.zeros(n_all, dtype=bool)
                best[order[chosen]] = True
            return
        need = N - k
        for i in range(start, n_all - need + 1):
            if cost + dv[i:i + need].sum() >= best_cost - 1e-12:
                break
            v = Vo[i]
            r = v - basis.T @ (basis @ v) if len(basis) else v.copy()
            nr = np.linalg.norm(r)
            if nr <= tol * max(1.0, np.linalg.norm(v)):
                continue
            extend(i + 1, np.vstack([basis, r / nr]) if len(basis) else (r / nr)[None],
                   chosen + [i], cost + dv[i])

    extend(0, np.zeros((0, N)), [], 0.0)
    pl = SensorPlacement.from_vector(network, best.astype(int))
    return PlacementResult(pl, placement_cost(pl, costs), visited)
