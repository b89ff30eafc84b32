"""Gaussian log-likelihood, the Weymouth constraint and the constrained ML.

Flows in ``omega`` are always expressed in the declared pipeline direction.
The orientation of a candidate topology only decides which end of a
pipeline is the high-pressure end, so it enters through the weighted
incidence ``B`` of the constraint.  Mass balance uses the declared incidence
with open rows removed and the constraint uses ``phi**2``, which makes both
independent of the flow frame.

The data enter the log-likelihood only through the quadratic form

    ln g = C - (omega' P omega - 2 g' omega + s) / 2,

with ``P`` the Fisher information, ``g`` the weighted data sums and ``s``
the weighted sum of squares.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import optimize

from .network import (
    GasNetwork,
    SolverError,
    TopologyState,
    build_incidence,
    solve_steady_state,
)
from .sensing import NoiseModel, ObservationBatch, ObservationSet, SensorPlacement

__all__ = [
    "Theta",
    "MlResult",
    "TopologyModel",
    "topology_model",
    "QuadraticData",
    "quadratic_data",
    "fisher_blocks",
    "normalising_constant",
    "log_likelihood",
    "constraint_f",
    "raw_estimate",
    "constrained_ml",
    "standard_glrt",
    "asymptotic_log_threshold",
]


@dataclass(frozen=True, eq=False)
class Theta:
    """Discrete topology plus continuous state ``omega = (p, phi)``."""

    topo: TopologyState
    omega: np.ndarray

    def split(self, network: GasNetwork):
        w = np.asarray(self.omega, dtype=float)
        if w.shape != (network.N + network.L,):
            raise ValueError(f"omega must have length {network.N + network.L}")
        return w[: network.N], w[network.N:]


@dataclass(frozen=True, eq=False)
class MlResult:
    omega_hat: np.ndarray
    value: float
    converged: bool
    kkt_residual: float
    feasibility: float = np.nan
    multipliers: np.ndarray | None = None


@dataclass(frozen=True, eq=False)
class TopologyModel:
    """Matrices of one candidate topology.

    Attributes
    ----------
    A : (L, N) declared-direction incidence, open rows zero.
    B, b : weighted incidence in the topology's orientation frame.
    active : mask of in-service pipelines.
    free : indices of ``omega`` that are not pinned to zero (open flows are).
    scale : per-entry scaling of ``omega`` (``p0`` for pressures, the largest
        injection magnitude for flows).
    """

    network: GasNetwork
    topo: TopologyState
    A: np.ndarray
    B: np.ndarray
    b: np.ndarray
    active: np.ndarray
    free: np.ndarray
    scale: np.ndarray

    @property
    def N(self):
        return self.network.N

    @property
    def L(self):
        return self.network.L

    @property
    def rows(self) -> np.ndarray:
        """Indices of active pipelines (one Weymouth constraint each)."""
        return np.flatnonzero(self.active)

    def constraint(self, omega) -> np.ndarray:
        """``B p^2 + b p0^2 - c phi^2`` on active rows, ``phi`` on open rows."""
        w = np.asarray(omega, dtype=float)
        p, phi = w[..., : self.N], w[..., self.N:]
        c = self.network.c
        res = (p * p) @ self.B.T + self.b * self.network.p0**2 - c * phi * phi
        return np.where(self.active, res, phi)

    def constraint_jacobian(self, omega) -> np.ndarray:
        """``[2 B diag(p), -2 diag(c phi)]``; open rows are ``e_l`` on the flow."""
        w = np.asarray(omega, dtype=float)
        p, phi = w[: self.N], w[self.N:]
        F = np.zeros((self.L, self.N + self.L))
        F[:, : self.N] = 2.0 * self.B * p[None, :]
        F[:, self.N:] = np.diag(np.where(self.active, -2.0 * self.network.c * phi, 1.0))
        return F

    # scaled constraint rows used by the solvers: sum_k zd[m, k] x_k^2 + beta_m = 0
    def scaled_constraints(self):
        """Diagonal constraint data in scaled, reduced coordinates.

        Returns ``(zd, beta)`` such that for ``x = omega[free] / scale[free]``
        each active Weymouth row reads ``zd @ x**2 + beta = 0`` (divided by
        ``p0**2``).
        """
        N = self.N
        p0 = self.network.p0
        rows = self.rows
        fs = self.scale[N]
        kappa = self.network.c * fs**2 / p0**2
        full = np.zeros((len(rows), N + self.L))
        full[:, :N] = self.B[rows]
        full[np.arange(len(rows)), N + rows] = -kappa[rows]
        return full[:, self.free], self.b[rows].astype(float)


@lru_cache(maxsize=512)
def topology_model(network: GasNetwork, topo: TopologyState) -> TopologyModel:
    inc = build_incidence(network, topo)
    N, L = network.N, network.L
    flow_scale = max(abs(q) for q in network.injections)
    scale = np.concatenate([np.full(N, network.p0), np.full(L, flow_scale)])
    free = np.concatenate([np.arange(N), N + np.flatnonzero(inc.active)])
    return TopologyModel(
        network=network,
        topo=topo,
        A=inc.A_declared,
        B=inc.B,
        b=inc.b,
        active=inc.active,
        free=free,
        scale=scale,
    )


def _stats(obs):
    if isinstance(obs, ObservationSet):
        return obs.batch()
    if isinstance(obs, ObservationBatch):
        return obs
    raise TypeError("expected an ObservationSet or ObservationBatch")


def fisher_blocks(A, placement: SensorPlacement, noise: NoiseModel):
    """Per-sample information blocks ``(J_pp, J_phiphi)``."""
    noise.require_positive()
    Jpp = np.diag(placement.delta_p / noise.sigma_p**2)
    Jff = (A * placement.delta_q) @ A.T / noise.sigma_q**2 + np.diag(
        placement.delta_phi / noise.sigma_phi**2
    )
    return Jpp, Jff


@dataclass(frozen=True, eq=False)
class QuadraticData:
    """Quadratic form of the log-likelihood for a batch of runs.

    ``P`` is shared by all runs; ``g`` has shape ``(R, N+L)``; ``s`` and
    ``scatter`` have shape ``(R,)``.  ``scatter`` is the part of ``s`` that no
    model can explain (within-run variation around the channel means).
    """

    P: np.ndarray
    g: np.ndarray
    s: np.ndarray
    scatter: np.ndarray
    T_a: int

    @property
    def s_centered(self):
        return self.s - self.scatter

    def value(self, omega) -> np.ndarray:
        """``omega' P omega - 2 g' omega + s`` for each run."""
        w = np.asarray(omega, dtype=float)
        return np.einsum("...i,ij,...j->...", w, self.P, w) - 2 * np.sum(self.g * w, -1) + self.s


def quadratic_data(obs, placement: SensorPlacement, noise: NoiseModel, A) -> QuadraticData:
    noise.require_positive()
    st = _stats(obs)
    T = st.T_a
    sp2, sq2, sf2 = noise.sigma_p**2, noise.sigma_q**2, noise.sigma_phi**2
    dp, dq, df = placement.delta_p, placement.delta_q, placement.delta_phi
    Jpp, Jff = fisher_blocks(A, placement, noise)
    N = A.shape[1]
    L = A.shape[0]
    P = np.zeros((N + L, N + L))
    P[:N, :N] = T * Jpp
    P[N:, N:] = T * Jff
    g = np.concatenate(
        [dp * st.sum_p / sp2, (dq * st.sum_q / sq2) @ A.T + df * st.sum_phi / sf2], axis=-1
    )
    s = st.sumsq_p @ dp / sp2 + st.sumsq_q @ dq / sq2 + st.sumsq_phi @ df / sf2
    centred = (st.sum_p**2 @ dp / sp2 + st.sum_q**2 @ dq / sq2 + st.sum_phi**2 @ df / sf2) / T
    return QuadraticData(P=P, g=g, s=s, scatter=s - centred, T_a=T)


def normalising_constant(T_a: int, placement: SensorPlacement, noise: NoiseModel) -> float:
    """Log of the Gaussian normalising factor of ``T_a`` masked snapshots."""
    noise.require_positive()
    n_p = placement.delta_p.sum()
    n_q = placement.delta_q.sum()
    n_f = placement.delta_phi.sum()
    return float(
        -T_a * (n_p + n_q + n_f) * np.log(2 * np.pi) / 2
        - T_a * (n_q * np.log(noise.sigma_q) + n_f * np.log(noise.sigma_phi)
                 + n_p * np.log(noise.sigma_p))
    )


def log_likelihood(obs: ObservationSet, placement: SensorPlacement, noise: NoiseModel,
                   theta: Theta, network: GasNetwork) -> float:
    """Exact Gaussian log-likelihood of the masked observations."""
    noise.require_positive()
    theta.split(network)
    model = topology_model(network, theta.topo)
    qd = quadratic_data(obs, placement, noise, model.A)
    C = normalising_constant(obs.T_a, placement, noise)
    return float(C - qd.value(theta.omega)[0] / 2)


def constraint_f(theta: Theta, network: GasNetwork) -> np.ndarray:
    """Weymouth constraint of ``theta``.

    Active rows give ``B p^2 + b p0^2 - c phi^2`` in the topology's frame;
    open rows give the flow itself.  This agrees with
    :func:`~gasnet_verify.network.weymouth_residual` whenever each active
    flow runs along the topology's orientation.
    """
    theta.split(network)
    return topology_model(network, theta.topo).constraint(theta.omega)


def asymptotic_log_threshold(p_fa: float, dof: int) -> float:
    """``ln rho`` such that ``2 (ln-likelihood difference) > chi2_dof`` quantile."""
    from scipy.stats import chi2

    if not 0 < p_fa < 1:
        raise ValueError("p_fa must lie in (0, 1)")
    return float(chi2.isf(p_fa, dof) / 2)


# ---------------------------------------------------------------------------
# constrained ML by augmented Lagrangian
# ---------------------------------------------------------------------------

def raw_estimate(obs: ObservationSet, placement: SensorPlacement, model: TopologyModel
                 ) -> np.ndarray:
    """Noise-averaged measurements completed to a full ``omega``.

    Unmeasured pressures are set to the mean of the measured ones (or
    ``p0``); flows solve a small ridge-regularised least-squares fit to the
    measured flows and injections.
    """
    N, L = model.N, model.L
    dp = placement.delta_p > 0
    p = np.full(N, model.network.p0, dtype=float)
    if dp.any():
        p[:] = obs.mean_p[dp].mean()
        p[dp] = obs.mean_p[dp]
    df = placement.delta_phi
    dq = placement.delta_q
    A = model.A
    lhs = np.diag(df) + (A * dq) @ A.T + 1e-6 * np.eye(L)
    rhs = df * obs.mean_phi + A @ (dq * obs.mean_q)
    phi = np.linalg.solve(lhs, rhs)
    phi[~model.active] = 0.0
    return np.concatenate([p, phi])


def _al_solve(qd: QuadraticData, model: TopologyModel, x0, *, feas_tol, opt_tol, max_outer):
    free, scale = model.free, model.scale
    D = scale[free]
    P = qd.P[np.ix_(free, free)] * np.outer(D, D)
    g = qd.g[0, free] * D
    norm = max(np.trace(P) / len(free), 1e-300)
    P, g = P / norm, g / norm
    zd, beta = model.scaled_constraints()

    def h(x):
        return zd @ (x * x) + beta

    x = np.asarray(x0, dtype=float).copy()
    y = np.zeros(len(beta))
    mu = 10.0
    prev = np.inf
    ok = False
    for _ in range(max_outer):
        def fun(x, y=y, mu=mu):
            hx = h(x)
            Px = P @ x
            val = 0.5 * x @ Px - g @ x - y @ hx + 0.5 * mu * hx @ hx
            grad = Px - g + 2 * x * (zd.T @ (mu * hx - y))
            return val, grad

        res = optimize.minimize(fun, x, jac=True, method="BFGS",
                                options={"maxiter": 5000, "gtol": 1e-12, "xrtol": 1e-15})
        x = res.x
        hx = h(x)
        y = y - mu * hx
        feas = np.max(np.abs(hx)) if len(hx) else 0.0
        stat = P @ x - g - 2 * x * (zd.T @ y)
        kkt = np.max(np.abs(stat)) / max(1.0, np.max(np.abs(g)))
        if feas <= feas_tol and kkt <= opt_tol:
            ok = True
            break
        if feas > 0.25 * prev:
            mu = min(mu * 10.0, 1e5)
        prev = feas
    return x, y, ok, kkt, feas


def constrained_ml(obs: ObservationSet, topo: TopologyState, network: GasNetwork,
                   placement: SensorPlacement, noise: NoiseModel, *, starts=None,
                   feas_tol: float = 1e-8, opt_tol: float = 1e-6,
                   max_outer: int = 60) -> MlResult:
    """Local maximiser of the log-likelihood on the Weymouth manifold.

    Augmented-Lagrangian outer loop with BFGS inner minimisations, run in
    scaled coordinates from each start point; the best converged point wins.

    Parameters
    ----------
    starts : sequence of array_like, optional
        Extra start points (full ``omega``), e.g. a relaxed-ML recovery.  The
        noise-averaged raw measurements are always tried.

    Raises
    ------
    SolverError
        If no start point reaches the feasibility and optimality tolerances.
    """
    model = topology_model(network, topo)
    qd = quadratic_data(obs, placement, noise, model.A)
    C = normalising_constant(obs.T_a, placement, noise)
    cand = [raw_estimate(obs, placement, model)]
    if starts is not None:
        cand = [np.asarray(s, dtype=float) for s in starts] + cand
    best = None
    for w0 in cand:
        x0 = w0[model.free] / model.scale[model.free]
        x, y, ok, kkt, feas = _al_solve(qd, model, x0, feas_tol=feas_tol, opt_tol=opt_tol,
                                        max_outer=max_outer)
        omega = np.zeros(model.N + model.L)
        omega[model.free] = x * model.scale[model.free]
        value = float(C - qd.value(omega)[0] / 2)
        if best is None or (ok, value) > (best.converged, best.value):
            best = MlResult(omega, value, ok, float(kkt), float(feas), y)
    if not best.converged:
        raise SolverError(
            f"constrained ML did not converge for topology {topo.label(network)} "
            f"(kkt={best.kkt_residual:.2e}, feas={best.feasibility:.2e})"
        )
    return best


def standard_glrt(obs: ObservationSet, network: GasNetwork, placement: SensorPlacement,
                  noise: NoiseModel, A_H0: TopologyState, candidates, rho: float | None = None,
                  *, p_fa: float = 1e-3, log_rho: float | None = None):
    """GLRT with the nonconvex constrained ML on every hypothesis.

    The statistic is ``max_A mu(A) - mu(A_H0)`` over the candidates; H1 is
    chosen when it exceeds ``ln rho``.  Without ``rho`` the asymptotic
    threshold at ``p_fa`` is used.
    """
    from .network import NetworkError
    from .verify import SearchStep, VerificationReport

    candidates = [c for c in candidates if c != A_H0]
    if not candidates:
        raise ValueError("the candidate set is empty")
    if log_rho is None:
        log_rho = (np.log(rho) if rho is not None
                   else asymptotic_log_threshold(p_fa, network.L + network.N))
    h0 = constrained_ml(obs, A_H0, network, placement, noise)
    path = [SearchStep(A_H0, h0.value, True)]
    best, best_val = None, -np.inf
    for topo in candidates:
        try:
            start = solve_steady_state(network, topo).omega
            res = constrained_ml(obs, topo, network, placement, noise, starts=[start])
        except (SolverError, NetworkError):
            continue
        path.append(SearchStep(topo, res.value, True))
        if res.value > best_val:
            best, best_val = topo, res.value
    if best is None:
        raise SolverError("no candidate topology could be fitted")
    stat = best_val - h0.value
    return VerificationReport(
        decision="H1" if stat > log_rho else "H0",
        statistic=float(stat),
        threshold=float(log_rho),
        fitness_value=float("nan"),
        fitness_triggered=False,
        estimated_topology=best if stat > log_rho else A_H0,
        best_alternative=best,
        search_path=tuple(path),
        n_solves=len(path),
    )
