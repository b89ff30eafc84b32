"""Topology decisions built on the relaxed ML.

The relaxed GLRT compares ``xi(A) - xi(A_H0)`` maximised over a candidate
set with ``ln rho``.  The efficient variant first checks whether ``A_H0``
fits the data at all (fitness test) and otherwise climbs through one-link
neighbours of ``A_H0`` instead of enumerating every candidate.

All comparisons use the centred objective ``Tr(M_c X)``: the normalising
constant and the data scatter are common to every topology, so
``xi(A) - xi(A') = (Tr(M_c X') - Tr(M_c X)) / 2``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .likelihood import normalising_constant, quadratic_data, topology_model
from .network import (
    GasNetwork,
    NetworkError,
    SolverError,
    TopologyState,
    iter_closed_patterns,
    physical_topology,
    solve_steady_state,
)
from .sdr import BatchSolution, relaxed_batch
from .sensing import NoiseModel, ObservationBatch, ObservationSet, SensorPlacement

__all__ = [
    "SearchStep",
    "VerificationReport",
    "RelaxedSolver",
    "enumerate_topologies",
    "flippable_pipelines",
    "default_epsilon",
    "relaxed_glrt",
    "fitness_test",
    "gradient_guided_search",
    "efficient_verify",
    "neighbours",
]

ENUMERATION_CAP = 12


@dataclass(frozen=True)
class SearchStep:
    """One relaxed-ML evaluation: topology, ``xi`` and whether it is rank one."""

    topo: TopologyState
    value: float
    exact: bool


@dataclass(frozen=True)
class VerificationReport:
    """Outcome of one verification.

    ``statistic`` and ``threshold`` are on the log-likelihood scale
    (``ln rho``).  ``fitness_value`` is ``nan`` when no fitness test ran.
    ``estimated_topology`` is ``A_H0`` under an H0 decision, otherwise the
    best alternative; it is None when the fitness test decided H1 without
    searching.
    """

    decision: str
    statistic: float
    threshold: float
    fitness_value: float
    fitness_triggered: bool
    estimated_topology: TopologyState | None
    best_alternative: TopologyState | None
    search_path: tuple
    n_solves: int

    def to_dict(self, network: GasNetwork | None = None) -> dict:
        lab = (lambda t: None if t is None else t.label(network))
        return {
            "decision": self.decision,
            "statistic": self.statistic,
            "threshold": self.threshold,
            "fitness_value": self.fitness_value,
            "fitness_triggered": self.fitness_triggered,
            "estimated_topology": lab(self.estimated_topology),
            "best_alternative": lab(self.best_alternative),
            "search_path": [
                {"topology": lab(s.topo), "xi": s.value, "exact": s.exact} for s in self.search_path
            ],
            "n_solves": self.n_solves,
        }


# ---------------------------------------------------------------------------
# candidate sets
# ---------------------------------------------------------------------------

def _physical_patterns(network: GasNetwork) -> list:
    out = []
    for pattern in iter_closed_patterns(network.L_C):
        try:
            out.append(physical_topology(network, pattern))
        except (NetworkError, SolverError):
            continue
    return out


def flippable_pipelines(network: GasNetwork) -> list:
    """Pipelines whose physical flow direction differs between patterns."""
    phys = _physical_patterns(network)
    out = []
    for l in range(network.L):
        seen = {t.orientation[l] for t in phys if t.active_mask(network)[l]}
        if len(seen) > 1:
            out.append(l)
    return out


def enumerate_topologies(network: GasNetwork, include_orientation_flips: bool = False, *,
                         cap: int = ENUMERATION_CAP) -> list:
    """Candidate topologies of a network.

    Each open/closed pattern whose active graph is connected and solvable
    enters with the orientation of its own steady-state flows.  With
    ``include_orientation_flips`` every pattern is also crossed with all
    sign choices of the pipelines in :func:`flippable_pipelines`.

    Raises
    ------
    ValueError
        If the number of changeable pipelines exceeds ``cap``.
    """
    if network.L_C > cap:
        raise ValueError(f"{network.L_C} changeable pipelines exceed the enumeration cap {cap}")
    phys = _physical_patterns(network)
    if not include_orientation_flips:
        return phys
    flips = flippable_pipelines(network)
    out, seen = [], set()
    for topo in phys:
        active = topo.active_mask(network)
        idx = [l for l in flips if active[l]]
        for signs in itertools.product((1, -1), repeat=len(idx)):
            orient = list(topo.orientation)
            for l, s in zip(idx, signs):
                orient[l] = s
            cand = topo.with_orientation(network, orient)
            if cand not in seen:
                seen.add(cand)
                out.append(cand)
    return out


def neighbours(topo: TopologyState, candidates, network: GasNetwork) -> list:
    """Candidates one link away from ``topo``.

    A link move either reverses one pipeline, or toggles one changeable
    pipeline.  Toggling can reverse flows elsewhere, so for each pattern one
    toggle away the candidates with the fewest reversals relative to
    ``topo`` are taken.
    """
    active = topo.active_mask(network)
    orient = np.asarray(topo.orientation)
    flips, toggles = [], {}
    for cand in candidates:
        if cand == topo:
            continue
        n_state = sum(a != b for a, b in zip(cand.closed, topo.closed))
        both = active & cand.active_mask(network)
        n_flip = int(np.sum(np.asarray(cand.orientation)[both] != orient[both]))
        if n_state == 0 and n_flip == 1:
            flips.append(cand)
        elif n_state == 1:
            toggles.setdefault(cand.closed, []).append((n_flip, cand))
    out = list(flips)
    for group in toggles.values():
        least = min(n for n, _ in group)
        out.extend(c for n, c in group if n == least)
    return out


# ---------------------------------------------------------------------------
# cached relaxed solves
# ---------------------------------------------------------------------------

class RelaxedSolver:
    """Relaxed-ML solves of one observation batch, cached per topology.

    Parameters
    ----------
    obs : ObservationSet or ObservationBatch
    method : {"auto", "ipm"}
        Passed to :func:`~gasnet_verify.sdr.relaxed_batch`.
    """

    def __init__(self, network: GasNetwork, placement: SensorPlacement, noise: NoiseModel,
                 obs, *, method: str = "auto"):
        noise.require_positive()
        self.network = network
        self.placement = placement
        self.noise = noise
        self.batch = obs.batch() if isinstance(obs, ObservationSet) else obs
        self.method = method
        self._cache = {}
        self.n_solves = 0

    @property
    def runs(self) -> int:
        return self.batch.runs

    def solve(self, topo: TopologyState) -> BatchSolution:
        sol = self._cache.get(topo)
        if sol is None:
            model = topology_model(self.network, topo)
            qd = quadratic_data(self.batch, self.placement, self.noise, model.A)
            try:
                warm = solve_steady_state(self.network, topo).omega
            except (NetworkError, SolverError):
                warm = None
            try:
                sol = relaxed_batch(model, qd, warm=warm, method=self.method)
            except SolverError as exc:
                raise SolverError(f"relaxed ML failed for topology {topo.label(self.network)}: {exc}") from exc
            self._cache[topo] = sol
            self.n_solves += 1
        return sol

    def objective(self, topo: TopologyState) -> np.ndarray:
        """Centred objective ``Tr(M_c X)`` per run."""
        return self.solve(topo).objective

    def xi(self, topo: TopologyState) -> np.ndarray:
        """Relaxed ML value ``xi(A)`` per run."""
        qd = quadratic_data(self.batch, self.placement, self.noise,
                            topology_model(self.network, topo).A)
        C = normalising_constant(self.batch.T_a, self.placement, self.noise)
        return C - (self.objective(topo) + qd.scatter) / 2


def default_epsilon(p_fa: float, network: GasNetwork) -> float:
    """Fitness threshold: the chi-squared ``L + N`` upper quantile at ``p_fa``."""
    return float(stats.chi2.isf(p_fa, network.L + network.N))


def _log_rho(network, rho, log_rho, p_fa):
    if log_rho is not None:
        return float(log_rho)
    if rho is not None:
        if rho <= 0:
            raise ValueError("rho must be positive")
        return float(np.log(rho))
    return float(stats.chi2.isf(p_fa, network.L + network.N) / 2)


def _single(solver: RelaxedSolver):
    if solver.runs != 1:
        raise ValueError("this operation expects a single observation set")


# ---------------------------------------------------------------------------
# decisions
# ---------------------------------------------------------------------------

def relaxed_glrt(obs, network: GasNetwork, placement: SensorPlacement, noise: NoiseModel,
                 A_H0: TopologyState, candidates, rho: float | None = None, *,
                 p_fa: float = 1e-3, log_rho: float | None = None,
                 solver: RelaxedSolver | None = None) -> VerificationReport:
    """Relaxed GLRT over an explicit candidate set.

    ``A_H0`` is removed from ``candidates`` if present.  The threshold is
    ``log_rho`` if given, else ``ln rho``, else the asymptotic value at
    ``p_fa``.

    Raises
    ------
    ValueError
        If no candidate remains.
    SolverError
        If a relaxed solve fails; the message names the topology.
    """
    candidates = [c for c in candidates if c != A_H0]
    if not candidates:
        raise ValueError("the candidate set is empty")
    thr = _log_rho(network, rho, log_rho, p_fa)
    solver = solver or RelaxedSolver(network, placement, noise, obs)
    _single(solver)
    xi0 = float(solver.xi(A_H0)[0])
    sol0 = solver.solve(A_H0)
    path = [SearchStep(A_H0, xi0, bool(sol0.rank[0] == 1))]
    best, best_val = None, -np.inf
    for topo in candidates:
        val = float(solver.xi(topo)[0])
        path.append(SearchStep(topo, val, bool(solver.solve(topo).rank[0] == 1)))
        if val > best_val:
            best, best_val = topo, val
    stat = best_val - xi0
    h1 = stat > thr
    return VerificationReport(
        decision="H1" if h1 else "H0",
        statistic=float(stat),
        threshold=thr,
        fitness_value=float(sol0.objective[0] / 2),
        fitness_triggered=False,
        estimated_topology=best if h1 else A_H0,
        best_alternative=best,
        search_path=tuple(path),
        n_solves=solver.n_solves,
    )


def fitness_test(obs, network: GasNetwork, placement: SensorPlacement, noise: NoiseModel,
                 A_H0: TopologyState, epsilon: float | None = None, *, p_fa: float = 1e-3,
                 solver: RelaxedSolver | None = None) -> dict:
    """Check whether ``A_H0`` explains the data.

    The value is half the centred deviance ``Tr(M_c X)/2`` of the
    ``A_H0`` relaxed solve; it stays near half its degrees of freedom when
    ``A_H0`` is right and grows linearly in ``T_a`` otherwise.

    Returns
    -------
    dict
        ``triggered`` (bool array when ``obs`` is a batch), ``value`` and
        ``epsilon``.
    """
    if epsilon is None:
        epsilon = default_epsilon(p_fa, network)
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    solver = solver or RelaxedSolver(network, placement, noise, obs)
    value = solver.objective(A_H0) / 2
    trig = value > epsilon
    if solver.runs == 1:
        return {"triggered": bool(trig[0]), "value": float(value[0]), "epsilon": float(epsilon)}
    return {"triggered": trig, "value": value, "epsilon": float(epsilon)}


def gradient_guided_search(obs, network: GasNetwork, placement: SensorPlacement,
                           noise: NoiseModel, A_H0: TopologyState, candidates=None, *,
                           solver: RelaxedSolver | None = None) -> dict:
    """Greedy ascent on ``xi`` through one-link neighbours, starting at ``A_H0``.

    Each step evaluates every neighbour of the current topology inside the
    candidate set and moves to the best one if it strictly improves
    ``xi``; ties go to the lowest candidate index.

    Returns
    -------
    dict
        ``best`` (the last topology), ``best_alternative`` (the highest
        ``xi`` among visited topologies other than ``A_H0``, or None),
        ``path`` (topologies moved through, with ``xi``) and ``evaluated``
        (every :class:`SearchStep` computed).
    """
    if candidates is None:
        candidates = enumerate_topologies(network)
    candidates = list(candidates)
    if A_H0 not in candidates:
        candidates = [A_H0] + candidates
    order = {t: i for i, t in enumerate(candidates)}
    solver = solver or RelaxedSolver(network, placement, noise, obs)
    _single(solver)
    values = {}

    def xi(t):
        if t not in values:
            values[t] = float(solver.xi(t)[0])
        return values[t]

    cur = A_H0
    path = [SearchStep(cur, xi(cur), bool(solver.solve(cur).rank[0] == 1))]
    visited = {cur}
    while True:
        nb = [t for t in neighbours(cur, candidates, network) if t not in visited]
        if not nb:
            break
        nb.sort(key=order.get)
        vals = [xi(t) for t in nb]
        k = int(np.argmax(vals))
        visited.update(nb)
        if vals[k] <= xi(cur):
            break
        cur = nb[k]
        path.append(SearchStep(cur, vals[k], bool(solver.solve(cur).rank[0] == 1)))
    alts = [(v, -order[t], t) for t, v in values.items() if t != A_H0]
    best_alt = max(alts, key=lambda a: (a[0], a[1]))[2] if alts else None
    evaluated = tuple(SearchStep(t, v, bool(solver.solve(t).rank[0] == 1))
                      for t, v in sorted(values.items(), key=lambda kv: order[kv[0]]))
    return {"best": cur, "best_alternative": best_alt, "path": tuple(path),
            "evaluated": evaluated, "values": values}


def efficient_verify(obs, network: GasNetwork, placement: SensorPlacement, noise: NoiseModel,
                     A_H0: TopologyState, epsilon: float | None = None, rho: float | None = None,
                     *, candidates=None, p_fa: float = 1e-3, log_rho: float | None = None,
                     solver: RelaxedSolver | None = None) -> VerificationReport:
    """Fitness test, then a one-link search when the fit is acceptable.

    A triggered fitness test decides H1 after a single relaxed solve.
    Otherwise the relaxed GLRT statistic is formed from the best
    alternative met during :func:`gradient_guided_search`.
    """
    thr = _log_rho(network, rho, log_rho, p_fa)
    solver = solver or RelaxedSolver(network, placement, noise, obs)
    _single(solver)
    fit = fitness_test(obs, network, placement, noise, A_H0, epsilon, p_fa=p_fa, solver=solver)
    if fit["triggered"]:
        sol0 = solver.solve(A_H0)
        return VerificationReport(
            decision="H1",
            statistic=float("inf"),
            threshold=thr,
            fitness_value=fit["value"],
            fitness_triggered=True,
            estimated_topology=None,
            best_alternative=None,
            search_path=(SearchStep(A_H0, float(solver.xi(A_H0)[0]), bool(sol0.rank[0] == 1)),),
            n_solves=solver.n_solves,
        )
    res = gradient_guided_search(obs, network, placement, noise, A_H0, candidates, solver=solver)
    alt = res["best_alternative"]
    if alt is None:
        raise ValueError("A_H0 has no neighbours in the candidate set")
    stat = res["values"][alt] - res["values"][A_H0]
    h1 = stat > thr
    return VerificationReport(
        decision="H1" if h1 else "H0",
        statistic=float(stat),
        threshold=thr,
        fitness_value=fit["value"],
        fitness_triggered=False,
        estimated_topology=alt if h1 else A_H0,
        best_alternative=alt,
        search_path=res["path"],
        n_solves=solver.n_solves,
    )
