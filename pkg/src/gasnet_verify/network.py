"""Pipeline graph, incidence matrices and steady-state gas flow.

Conventions
-----------
* Node ``reference_node`` is the supply node with known pressure ``p0``; it is
  column 0 of the full incidence matrix.  The remaining ``N`` nodes follow in
  ascending id order.
* Fixed pipelines come first, then changeable ones, so ``A = [A_F; A_C]``.
* A changeable pipeline is *closed* when it is in service (carries flow) and
  *open* when it is out of service.  Open rows of ``a, A, B, b`` are zero.
* Flows stored on :class:`SteadyState` are signed relative to the declared
  pipeline direction.  The incidence matrices of a :class:`TopologyState` may
  flip rows; use :meth:`IncidenceSet.to_frame` to express flows in that frame.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "Pipeline",
    "GasNetwork",
    "TopologyState",
    "IncidenceSet",
    "SteadyState",
    "NetworkError",
    "SolverError",
    "build_incidence",
    "weymouth_residual",
    "mass_residual",
    "solve_steady_state",
    "physical_topology",
    "load_network",
    "shipped_networks",
]


class NetworkError(ValueError):
    """Invalid network description or topology."""


class SolverError(RuntimeError):
    """A numerical solver failed to produce a valid answer."""


@dataclass(frozen=True)
class Pipeline:
    id: str
    from_node: int
    to_node: int
    c: float
    alpha: float = 1.0
    changeable: bool = False

    def __post_init__(self):
        if self.from_node == self.to_node:
            raise NetworkError(f"pipeline {self.id}: from_node == to_node")
        if not self.c > 0:
            raise NetworkError(f"pipeline {self.id}: c must be positive")
        if not self.alpha > 0:
            raise NetworkError(f"pipeline {self.id}: alpha must be positive")


@dataclass(frozen=True)
class GasNetwork:
    """Immutable description of a gas network.

    Parameters
    ----------
    name : str
    reference_node : int
        Id of the supply node whose pressure ``p0`` is known.
    p0 : float
        Reference pressure.
    nodes : sequence of int
        All node ids, reference included.
    injections : sequence of float
        Injection per entry of ``nodes`` (positive = injection).
    pipelines : sequence of Pipeline
        Fixed pipelines must precede changeable ones.
    """

    name: str
    reference_node: int
    p0: float
    nodes: tuple
    injections: tuple
    pipelines: tuple
    notes: str = field(default="", compare=False)

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(int(n) for n in self.nodes))
        object.__setattr__(self, "injections", tuple(float(q) for q in self.injections))
        object.__setattr__(self, "pipelines", tuple(self.pipelines))
        if len(set(self.nodes)) != len(self.nodes):
            raise NetworkError("duplicate node ids")
        if len(self.injections) != len(self.nodes):
            raise NetworkError("one injection per node is required")
        if self.reference_node not in self.nodes:
            raise NetworkError("reference node is not a network node")
        if not self.p0 > 0:
            raise NetworkError("p0 must be positive")
        known = set(self.nodes)
        seen_changeable = False
        for pipe in self.pipelines:
            if pipe.from_node not in known or pipe.to_node not in known:
                raise NetworkError(f"pipeline {pipe.id} has an unknown endpoint")
            if pipe.changeable:
                seen_changeable = True
            elif seen_changeable:
                raise NetworkError("fixed pipelines must be listed before changeable ones")

    # -- sizes -------------------------------------------------------------
    @property
    def N(self) -> int:
        return len(self.nodes) - 1

    @property
    def L(self) -> int:
        return len(self.pipelines)

    @property
    def L_C(self) -> int:
        return sum(p.changeable for p in self.pipelines)

    @property
    def L_F(self) -> int:
        return self.L - self.L_C

    @property
    def S(self) -> int:
        """Size of the lifted SDR matrix, ``N + L + 1``."""
        return self.N + self.L + 1

    # -- vectors -----------------------------------------------------------
    @property
    def c(self) -> np.ndarray:
        return np.array([p.c for p in self.pipelines])

    @property
    def alpha(self) -> np.ndarray:
        return np.array([p.alpha for p in self.pipelines])

    @property
    def non_reference_nodes(self) -> tuple:
        return tuple(sorted(n for n in self.nodes if n != self.reference_node))

    def column(self, node: int) -> int:
        """Column of ``node`` in the full incidence matrix (reference = 0)."""
        if node == self.reference_node:
            return 0
        return self.non_reference_nodes.index(node) + 1

    @property
    def q(self) -> np.ndarray:
        """Injections of the ``N`` non-reference nodes, in column order."""
        lookup = dict(zip(self.nodes, self.injections))
        return np.array([lookup[n] for n in self.non_reference_nodes])

    @property
    def q0(self) -> float:
        return dict(zip(self.nodes, self.injections))[self.reference_node]

    @property
    def pipeline_ids(self) -> tuple:
        return tuple(p.id for p in self.pipelines)

    def changeable_index(self) -> np.ndarray:
        return np.flatnonzero([p.changeable for p in self.pipelines])

    # -- serialisation -----------------------------------------------------
    @classmethod
    def from_dict(cls, data: dict) -> "GasNetwork":
        pipes = [
            Pipeline(
                id=str(p["id"]),
                from_node=int(p["from"]),
                to_node=int(p["to"]),
                c=float(p["c"]),
                alpha=float(p.get("alpha", 1.0)),
                changeable=bool(p.get("changeable", False)),
            )
            for p in data["pipelines"]
        ]
        return cls(
            name=data.get("name", "network"),
            reference_node=int(data["reference_node"]),
            p0=float(data["p0"]),
            nodes=[n["id"] for n in data["nodes"]],
            injections=[n["injection"] for n in data["nodes"]],
            pipelines=pipes,
            notes=data.get("notes", ""),
        )

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "reference_node": self.reference_node,
            "p0": self.p0,
            "nodes": [{"id": n, "injection": q} for n, q in zip(self.nodes, self.injections)],
            "pipelines": [
                {
                    "id": p.id,
                    "from": p.from_node,
                    "to": p.to_node,
                    "c": p.c,
                    "alpha": p.alpha,
                    "changeable": p.changeable,
                }
                for p in self.pipelines
            ],
            "notes": self.notes,
        }


def load_network(source) -> GasNetwork:
    """Load a network from a JSON file path or a shipped network name."""
    path = Path(source)
    if not path.exists():
        name = str(source)
        if not name.endswith(".json"):
            name += ".json"
        ref = resources.files("gasnet_verify").joinpath("networks").joinpath(name)
        if not ref.is_file():
            raise NetworkError(f"no such network: {source}")
        return GasNetwork.from_dict(json.loads(ref.read_text()))
    return GasNetwork.from_dict(json.loads(path.read_text()))


def shipped_networks() -> list:
    folder = resources.files("gasnet_verify").joinpath("networks")
    return sorted(p.name[:-5] for p in folder.iterdir() if p.name.endswith(".json"))


@dataclass(frozen=True)
class TopologyState:
    """Open/closed pattern of the changeable pipelines plus row orientations.

    ``closed[k]`` is True when changeable pipeline ``k`` is in service.
    ``orientation[l]`` is +1 or -1 for every pipeline; open pipelines are
    normalised to +1.
    """

    closed: tuple
    orientation: tuple

    def __post_init__(self):
        object.__setattr__(self, "closed", tuple(bool(s) for s in self.closed))
        orient = tuple(int(o) for o in self.orientation)
        if any(o not in (1, -1) for o in orient):
            raise NetworkError("orientation entries must be +1 or -1")
        object.__setattr__(self, "orientation", orient)

    @classmethod
    def make(cls, network: GasNetwork, closed=None, orientation=None) -> "TopologyState":
        """Build a normalised state; ``closed`` accepts bools or 'closed'/'open'."""
        if closed is None:
            closed = [True] * network.L_C
        closed = [_parse_state(s) for s in closed]
        if len(closed) != network.L_C:
            raise NetworkError(
                f"expected {network.L_C} changeable states, got {len(closed)}"
            )
        if orientation is None:
            orientation = [1] * network.L
        orientation = list(orientation)
        if len(orientation) != network.L:
            raise NetworkError(f"expected {network.L} orientations, got {len(orientation)}")
        for k, idx in enumerate(network.changeable_index()):
            if not closed[k]:
                orientation[idx] = 1
        return cls(tuple(closed), tuple(orientation))

    def active_mask(self, network: GasNetwork) -> np.ndarray:
        mask = np.ones(network.L, dtype=bool)
        mask[network.changeable_index()] = self.closed
        return mask

    def label(self, network: GasNetwork | None = None) -> str:
        states = "".join("C" if s else "O" for s in self.closed)
        flips = [i for i, o in enumerate(self.orientation) if o < 0]
        if network is not None:
            flips = [network.pipelines[i].id for i in flips]
        return states + ("|rev:" + ",".join(map(str, flips)) if flips else "")

    def with_orientation(self, network: GasNetwork, orientation) -> "TopologyState":
        return TopologyState.make(network, self.closed, orientation)


def _parse_state(s) -> bool:
    if isinstance(s, str):
        s = s.strip().lower()
        if s in ("closed", "c", "1", "true", "on"):
            return True
        if s in ("open", "o", "0", "false", "off"):
            return False
        raise NetworkError(f"unknown pipeline state {s!r}")
    return bool(s)


@dataclass(frozen=True)
class IncidenceSet:
    a: np.ndarray
    A: np.ndarray
    B: np.ndarray
    b: np.ndarray
    active: np.ndarray
    orientation: np.ndarray

    @property
    def A_tilde(self) -> np.ndarray:
        return np.column_stack([self.a, self.A])

    @property
    def A_declared(self) -> np.ndarray:
        """Rows of ``A`` in the declared pipeline direction."""
        return self.orientation[:, None] * self.A

    def to_frame(self, phi) -> np.ndarray:
        """Convert declared-direction flows to this incidence's row frame."""
        return self.orientation * np.asarray(phi, dtype=float)


def build_incidence(network: GasNetwork, topo: TopologyState) -> IncidenceSet:
    if len(topo.closed) != network.L_C or len(topo.orientation) != network.L:
        raise NetworkError("topology dimensions do not match the network")
    L, N = network.L, network.N
    full = np.zeros((L, N + 1))
    for row, pipe in enumerate(network.pipelines):
        full[row, network.column(pipe.from_node)] = 1.0
        full[row, network.column(pipe.to_node)] = -1.0
    orientation = np.array(topo.orientation, dtype=float)
    active = topo.active_mask(network)
    full *= (orientation * active)[:, None]
    alpha = network.alpha[:, None]
    weighted = alpha * np.maximum(full, 0.0) - np.maximum(-full, 0.0)
    return IncidenceSet(
        a=full[:, 0].copy(),
        A=full[:, 1:].copy(),
        B=weighted[:, 1:].copy(),
        b=weighted[:, 0].copy(),
        active=active,
        orientation=orientation,
    )


@dataclass(frozen=True)
class SteadyState:
    """Node pressures (reference excluded), declared-direction flows, injections."""

    p: np.ndarray
    phi: np.ndarray
    q: np.ndarray

    @property
    def omega(self) -> np.ndarray:
        return np.concatenate([self.p, self.phi])


def weymouth_residual(state: SteadyState, inc: IncidenceSet, c, p0: float) -> np.ndarray:
    """``B(p*p) - c*phi*|phi| + b*p0^2`` on active rows, ``phi`` on open rows.

    ``state.phi`` must be expressed in the row frame of ``inc``.
    """
    p = np.asarray(state.p, dtype=float)
    phi = np.asarray(state.phi, dtype=float)
    c = np.asarray(c, dtype=float)
    res = inc.B @ (p * p) - c * phi * np.abs(phi) + inc.b * p0**2
    return np.where(inc.active, res, phi)


def mass_residual(inc: IncidenceSet, phi, q) -> np.ndarray:
    return inc.A.T @ np.asarray(phi, dtype=float) - np.asarray(q, dtype=float)


def _check_connected(network: GasNetwork, active: np.ndarray) -> None:
    adj = {n: [] for n in network.nodes}
    for pipe, on in zip(network.pipelines, active):
        if on:
            adj[pipe.from_node].append(pipe.to_node)
            adj[pipe.to_node].append(pipe.from_node)
    seen = {network.reference_node}
    queue = deque(seen)
    while queue:
        n = queue.popleft()
        for m in adj[n]:
            if m not in seen:
                seen.add(m)
                queue.append(m)
    if len(seen) != len(network.nodes):
        missing = sorted(set(network.nodes) - seen)
        raise NetworkError(f"active graph is disconnected from the reference node: {missing}")


def _tree_flows(network: GasNetwork, active: np.ndarray) -> np.ndarray:
    """Flows carrying all injections over a BFS spanning tree (declared frame)."""
    adj = {n: [] for n in network.nodes}
    for row, (pipe, on) in enumerate(zip(network.pipelines, active)):
        if on:
            adj[pipe.from_node].append((pipe.to_node, row))
            adj[pipe.to_node].append((pipe.from_node, row))
    parent = {network.reference_node: None}
    order = [network.reference_node]
    queue = deque(order)
    while queue:
        n = queue.popleft()
        for m, row in adj[n]:
            if m not in parent:
                parent[m] = (n, row)
                order.append(m)
                queue.append(m)
    inj = dict(zip(network.nodes, network.injections))
    subtree = {n: inj[n] for n in network.nodes}
    phi = np.zeros(network.L)
    for n in reversed(order[1:]):
        up, row = parent[n]
        # flow from parent into the subtree equals the subtree's net withdrawal
        out_of_parent = -subtree[n]
        pipe = network.pipelines[row]
        phi[row] = out_of_parent if pipe.from_node == up else -out_of_parent
        subtree[up] += subtree[n]
    return phi


def solve_steady_state(
    network: GasNetwork,
    topo: TopologyState,
    *,
    initial: SteadyState | None = None,
    tol: float = 1e-10,
    max_iter: int = 100,
) -> SteadyState:
    """Solve the Weymouth + mass-conservation equations for ``topo``.

    Damped Newton on ``(Pi, phi)`` with ``Pi = p*p``.  The returned flows are
    in the declared pipeline direction and exactly zero on open pipelines.
    ``initial`` seeds the iteration; by default it starts from ``p = p0``
    and spanning-tree flows.
    """
    inc = build_incidence(network, TopologyState.make(network, topo.closed))
    active = inc.active
    _check_connected(network, active)
    total = sum(network.injections)
    scale = max(1.0, max(abs(q) for q in network.injections))
    if abs(total) > 1e-9 * scale * len(network.nodes):
        raise NetworkError(f"injections do not balance (sum = {total:g})")

    N, L = network.N, network.L
    c = network.c
    p0sq = network.p0**2
    q = network.q
    A, B, b = inc.A, inc.B, inc.b

    if initial is None:
        x = np.concatenate([np.full(N, p0sq), _tree_flows(network, active)])
    else:
        x = np.concatenate([np.asarray(initial.p, dtype=float) ** 2,
                            np.where(active, np.asarray(initial.phi, dtype=float), 0.0)])

    def residual(x):
        Pi, phi = x[:N], x[N:]
        w = np.where(active, B @ Pi - c * phi * np.abs(phi) + b * p0sq, phi)
        return np.concatenate([A.T @ phi - q, w / p0sq])

    def jacobian(x):
        phi = x[N:]
        jac = np.zeros((N + L, N + L))
        jac[:N, N:] = A.T
        dphi = np.where(active, -2.0 * c * np.maximum(np.abs(phi), 1e-12), 1.0)
        jac[N:, :N] = np.where(active[:, None], B, 0.0) / p0sq
        jac[N:, N:] = np.diag(np.where(active, dphi / p0sq, 1.0))
        try:
            return np.linalg.solve(jac, -residual(x))
        except np.linalg.LinAlgError as exc:
            raise SolverError("singular Jacobian in steady-state solve") from exc

    # Newton on the mixed residual; Weymouth rows are normalised by p0^2.
    r = residual(x)
    for _ in range(max_iter):
        if np.max(np.abs(r[:N])) <= tol * scale and np.max(np.abs(r[N:])) <= tol:
            break
        step = jacobian(x)
        norm0 = np.linalg.norm(r)
        t = 1.0
        while t > 1e-6:
            trial = x + t * step
            rt = residual(trial)
            if np.linalg.norm(rt) < (1 - 1e-4 * t) * norm0:
                break
            t *= 0.5
        x, r = trial, rt
    else:
        raise SolverError("steady-state Newton iteration did not converge")
    # polish to rounding level; keep a step only while it lowers the residual
    for _ in range(4):
        trial = x + jacobian(x)
        rt = residual(trial)
        if np.linalg.norm(rt) >= np.linalg.norm(r):
            break
        x, r = trial, rt

    Pi, phi = x[:N], x[N:]
    if np.any(Pi <= 0):
        raise SolverError("negative squared pressure: p0 too low for these injections")
    phi = np.where(active, phi, 0.0)
    return SteadyState(p=np.sqrt(Pi), phi=phi, q=q.copy())


def physical_topology(network: GasNetwork, closed, state: SteadyState | None = None) -> TopologyState:
    """Topology whose row orientations follow the actual flow directions.

    Pipes with (numerically) zero flow keep their declared direction.
    """
    base = TopologyState.make(network, closed)
    if state is None:
        state = solve_steady_state(network, base)
    scale = max(1.0, np.max(np.abs(state.phi)))
    orient = np.where(state.phi < -1e-9 * scale, -1, 1)
    return TopologyState.make(network, closed, orient)


def topology_from_labels(network: GasNetwork, states: Sequence[str]) -> TopologyState:
    return TopologyState.make(network, states)


def iter_closed_patterns(n: int) -> Iterable[tuple]:
    """All 2**n open/closed patterns, all-closed first."""
    for code in range(2**n):
        yield tuple(not bool((code >> (n - 1 - k)) & 1) for k in range(n))
