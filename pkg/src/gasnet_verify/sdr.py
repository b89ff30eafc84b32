"""Semidefinite relaxation of the constrained maximum likelihood.

The continuous state is lifted to ``X = [omega; 1][omega; 1]'`` of size
``S = N + L + 1``.  The log-likelihood becomes ``C - Tr(M X)/2`` and each
Weymouth row becomes the linear constraint ``Tr(Z_m X) + b_m p0^2 = 0``.
Dropping ``rank X = 1`` gives a convex problem whose value ``xi(A)`` bounds
the constrained ML value ``mu(A)`` from above.

Solving strategy
----------------
1. Newton's method on the KKT system of the nonconvex problem, started
   from a nearby feasible point.
2. Dual certificate: with multipliers ``y`` the matrix
   ``P - diag(Zd' y)`` (the Hessian of the Lagrangian) being PSD proves that
   the rank-one lift of the Newton point solves the relaxation.
3. Otherwise the relaxation is solved by :func:`~gasnet_verify.sdp.solve_diagonal_sdp`.

Open pipelines force ``X`` to vanish on their flow row and column, so their
flow variables are removed before solving (the relaxation would otherwise
have no strictly feasible point).  All solves run in scaled coordinates
(pressures over ``p0``, flows over the largest injection).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .likelihood import (
    QuadraticData,
    TopologyModel,
    normalising_constant,
    quadratic_data,
    topology_model,
)
from .network import GasNetwork, SolverError, TopologyState, solve_steady_state
from .sdp import solve_diagonal_sdp
from .sensing import NoiseModel, ObservationSet, SensorPlacement

__all__ = [
    "MMatrix",
    "SdpSolution",
    "BatchSolution",
    "build_M",
    "z_matrices",
    "relaxed_ml",
    "relaxed_batch",
    "recover_omega",
    "thresholded_rank",
    "exactness_condition",
    "ExactnessResult",
]

EPS_RANK = 1e-4


@dataclass(frozen=True, eq=False)
class MMatrix:
    """Lifted objective matrix of one topology and data set.

    ``matrix`` is ``[[P, -g], [-g', s]]`` in physical units.  ``scatter`` is
    the part of ``s`` that does not depend on the model.
    """

    matrix: np.ndarray
    topo: TopologyState
    T_a: int
    scatter: float
    constant: float

    @property
    def S(self) -> int:
        return self.matrix.shape[0]

    @property
    def n(self) -> int:
        return self.S - 1

    def blocks(self, N: int) -> dict:
        M = self.matrix
        return {
            "M11": M[:N, :N], "M13": M[:N, -1], "M22": M[N:-1, N:-1],
            "M23": M[N:-1, -1], "M33": M[-1, -1], "M12": M[:N, N:-1],
        }

    @property
    def centered(self) -> np.ndarray:
        """``M`` with the unexplainable scatter removed from the corner."""
        Mc = self.matrix.copy()
        Mc[-1, -1] -= self.scatter
        return Mc

    def quadratic(self) -> QuadraticData:
        n = self.n
        return QuadraticData(P=self.matrix[:n, :n], g=-self.matrix[None, :n, -1],
                             s=np.array([self.matrix[-1, -1]]),
                             scatter=np.array([self.scatter]), T_a=self.T_a)


@dataclass(frozen=True, eq=False)
class SdpSolution:
    """Solution of the relaxed ML for one topology.

    ``X`` is in physical units.  ``eigvals`` are the descending eigenvalues of
    the scaled lifted matrix (pressures over ``p0``, flows over the flow
    scale); ``rank_thresholded`` counts those above ``eps_rank``.
    """

    X: np.ndarray
    value: float
    centered_objective: float
    eigvals: np.ndarray
    rank_thresholded: int
    omega_bar: np.ndarray
    exact: bool
    method: str
    certificate_min_eig: float
    constraint_residual: float
    topo: TopologyState | None = None

    @property
    def fitness(self) -> float:
        """Half the centred deviance ``Tr(M_c X)/2``."""
        return self.centered_objective / 2


def build_M(topo: TopologyState, obs: ObservationSet, placement: SensorPlacement,
            noise: NoiseModel, network: GasNetwork) -> MMatrix:
    """Assemble the lifted objective matrix from the observation sums."""
    model = topology_model(network, topo)
    qd = quadratic_data(obs, placement, noise, model.A)
    n = network.N + network.L
    M = np.zeros((n + 1, n + 1))
    M[:n, :n] = qd.P
    M[:n, n] = M[n, :n] = -qd.g[0]
    M[n, n] = qd.s[0]
    return MMatrix(matrix=M, topo=topo, T_a=obs.T_a, scatter=float(qd.scatter[0]),
                   constant=normalising_constant(obs.T_a, placement, noise))


def z_matrices(topo: TopologyState, network: GasNetwork):
    """Constraint matrices ``Z_m`` (diagonal, ``S x S``) and offsets ``b_m p0^2``.

    Rows of open pipelines have ``B_m = 0`` and ``b_m = 0``, so their
    constraint reads ``-c_m phi_m^2 = 0``.
    """
    model = topology_model(network, topo)
    N, L = network.N, network.L
    Zs = []
    for m in range(L):
        d = np.zeros(N + L + 1)
        d[:N] = model.B[m]
        d[N + m] = -network.c[m]
        Zs.append(np.diag(d))
    return Zs, model.b * network.p0**2


def thresholded_rank(X, eps_rank: float = EPS_RANK) -> int:
    """Number of eigenvalues of the symmetric ``X`` above ``eps_rank``."""
    w = np.linalg.eigvalsh((np.asarray(X) + np.asarray(X).T) / 2)
    return int(np.sum(w > eps_rank))


def recover_omega(X, tol: float = 1e-6) -> np.ndarray:
    """First ``S - 1`` entries of the last column of ``X``."""
    X = np.asarray(X.X if isinstance(X, SdpSolution) else X, dtype=float)
    if abs(X[-1, -1] - 1.0) > tol:
        raise ValueError(f"X[S, S] = {X[-1, -1]:.3g} is not 1")
    return X[:-1, -1].copy()


# ---------------------------------------------------------------------------
# batched engine
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class BatchSolution:
    """Relaxed-ML results for ``R`` runs of one topology.

    ``objective`` is ``Tr(M_c X)`` (centred, physical units), so the
    relaxed value is ``C - (objective + scatter)/2``.
    """

    objective: np.ndarray
    omega: np.ndarray
    rank: np.ndarray
    certified: np.ndarray
    min_eig: np.ndarray
    n_ipm: int


def _scaled_problem(model: TopologyModel, qd: QuadraticData):
    free = model.free
    D = model.scale[free]
    P = qd.P[np.ix_(free, free)] * np.outer(D, D)
    norm = max(np.trace(P) / len(free), 1e-300)
    P = P / norm
    r = -(qd.g[:, free] * D) / norm
    s = (qd.s - qd.scatter) / norm
    zd, beta = model.scaled_constraints()
    return P, r, s, zd, beta, norm


def _newton_kkt(P, r, zd, beta, x0, *, tol=1e-11, max_iter=40):
    """Batched Newton iteration on the KKT system.

    Returns ``x, y, converged``.  ``x0`` is ``(R, n)``.
    """
    R, n = x0.shape
    m = len(beta)
    x = x0.copy()
    # least-squares multipliers at the start point
    Jt = x[:, :, None] * zd.T[None]          # (R, n, m): d(constraint)/dx ' / 2
    grad = x @ P + r
    y = np.linalg.lstsq(Jt.reshape(-1, m), grad.reshape(-1), rcond=None)[0] if R == 1 else \
        np.linalg.solve(np.einsum("rni,rnj->rij", Jt, Jt) + 1e-12 * np.eye(m),
                        np.einsum("rni,rn->ri", Jt, grad)[..., None])[..., 0]
    y = np.broadcast_to(y, (R, m)).copy()
    done = np.zeros(R, dtype=bool)
    K = np.zeros((R, n + m, n + m))
    for _ in range(max_iter):
        H = P[None] - np.einsum("rm,mn->rn", y, zd)[:, :, None] * np.eye(n)[None]
        stat = np.einsum("rij,rj->ri", H, x) + r
        cons = (x * x) @ zd.T + beta
        err = np.maximum(np.max(np.abs(stat), -1), np.max(np.abs(cons), -1)) if m else \
            np.max(np.abs(stat), -1)
        done = err < tol * (1 + np.max(np.abs(r), -1))
        if done.all():
            break
        act = ~done & np.isfinite(err)
        if not act.any():
            break
        B = -x[:, :, None] * zd.T[None]
        K[:, :n, :n] = H
        K[:, :n, n:] = B
        K[:, n:, :n] = np.swapaxes(B, 1, 2)
        K[:, n:, n:] = 0.0
        rhs = np.concatenate([-stat, cons / 2], axis=1)
        idx = np.flatnonzero(act)
        try:
            step = np.linalg.solve(K[idx], rhs[idx][..., None])[..., 0]
        except np.linalg.LinAlgError:
            step = np.stack([np.linalg.lstsq(K[i], rhs[i], rcond=None)[0] for i in idx])
        x[idx] += step[:, :n]
        y[idx] += step[:, n:]
    return x, y, done


def _certificate(P, zd, y):
    H = P[None] - np.einsum("rm,mn->rn", y, zd)[:, :, None] * np.eye(P.shape[0])[None]
    return np.linalg.eigvalsh(H)[:, 0]


def _ipm(P, r, s, zd, beta):
    n = P.shape[0]
    C = np.zeros((n + 1, n + 1))
    C[:n, :n] = P
    C[:n, n] = C[n, :n] = r
    C[n, n] = s
    Ad = np.zeros((len(beta) + 1, n + 1))
    Ad[:-1, :n] = zd
    Ad[-1, n] = 1.0
    b = np.concatenate([-beta, [1.0]])
    return solve_diagonal_sdp(C, Ad, b)


def relaxed_batch(model: TopologyModel, qd: QuadraticData, warm=None, *,
                  method: str = "auto", eps_rank: float = EPS_RANK,
                  cert_tol: float = 1e-9) -> BatchSolution:
    """Relaxed ML for every run of a batch.

    Parameters
    ----------
    warm : array_like, optional
        Start point(s) for Newton, full ``omega`` of shape ``(N+L,)`` or
        ``(R, N+L)``.  Defaults to the topology's steady state.
    method : {"auto", "ipm"}
        ``"ipm"`` skips the certified Newton path.
    """
    if method not in ("auto", "ipm"):
        raise ValueError(f"unknown method {method!r}")
    P, r, s, zd, beta, norm = _scaled_problem(model, qd)
    R, n = r.shape
    free, scale = model.free, model.scale[model.free]
    omega = np.zeros((R, model.N + model.L))
    obj = np.empty(R)
    rank = np.empty(R, dtype=int)
    cert = np.zeros(R, dtype=bool)
    min_eig = np.full(R, np.nan)

    todo = np.arange(R)
    if method == "auto":
        if warm is None:
            warm = solve_steady_state(model.network, model.topo).omega
        w = np.broadcast_to(np.asarray(warm, dtype=float), (R, model.N + model.L))
        x0 = w[:, free] / scale
        x, y, conv = _newton_kkt(P, r, zd, beta, x0)
        lam = np.full(R, -np.inf)
        if conv.any():
            lam[conv] = _certificate(P, zd, y[conv])
        min_eig[:] = lam
        ok = conv & (lam >= -cert_tol * max(1.0, np.abs(P).max()))
        cert[ok] = True
        omega[np.ix_(ok, free)] = x[ok] * scale
        fx = np.einsum("ri,ij,rj->r", x, P, x) + 2 * np.sum(r * x, -1) + s
        obj[ok] = fx[ok] * norm
        rank[ok] = 1
        todo = np.flatnonzero(~ok)
    for i in todo:
        res = _ipm(P, r[i], s[i], zd, beta)
        Xs = res.X
        omega[i, free] = Xs[:n, n] * scale
        obj[i] = res.primal_value * norm
        rank[i] = thresholded_rank(Xs, eps_rank)
    return BatchSolution(objective=obj, omega=omega, rank=rank, certified=cert,
                         min_eig=min_eig, n_ipm=len(todo))


def relaxed_ml(topo: TopologyState, M: MMatrix, network: GasNetwork, *,
               method: str = "auto", warm=None, eps_rank: float = EPS_RANK) -> SdpSolution:
    """Solve the relaxed ML over the lifted constraint set.

    Parameters
    ----------
    method : {"auto", "certificate", "ipm"}
        ``"auto"`` tries the certified Newton path and falls back to the
        interior-point solver; ``"certificate"`` raises instead of falling
        back; ``"ipm"`` always uses the interior-point solver.

    Raises
    ------
    SolverError
        If the solver fails, or ``method="certificate"`` cannot certify.
    """
    if M.topo != topo:
        raise ValueError("M was built for a different topology")
    model = topology_model(network, topo)
    qd = M.quadratic()
    P, r, s, zd, beta, norm = _scaled_problem(model, qd)
    n = P.shape[0]
    free, scale = model.free, model.scale[model.free]
    S = network.S
    sel = np.concatenate([free, [S - 1]])
    if method not in ("auto", "certificate", "ipm"):
        raise ValueError(f"unknown method {method!r}")

    Xs = None
    min_eig = np.nan
    used = "ipm"
    if method in ("auto", "certificate"):
        if warm is None:
            warm = solve_steady_state(network, topo).omega
        x0 = (np.asarray(warm, dtype=float)[free] / scale)[None]
        x, y, conv = _newton_kkt(P, r[0:1], zd, beta, x0)
        if conv[0]:
            min_eig = float(_certificate(P, zd, y)[0])
        if conv[0] and min_eig >= -1e-9 * max(1.0, np.abs(P).max()):
            w = np.concatenate([x[0], [1.0]])
            Xs = np.outer(w, w)
            used = "certificate"
        elif method == "certificate":
            raise SolverError("no rank-one certificate for this instance")
    if Xs is None:
        Xs = _ipm(P, r[0], s[0], zd, beta).X
    # scaled X on the full index set (eliminated flows are zero)
    Xfull = np.zeros((S, S))
    Xfull[np.ix_(sel, sel)] = Xs
    eig = np.linalg.eigvalsh(Xfull)[::-1]
    rank = int(np.sum(eig > eps_rank))
    Dbar = np.concatenate([model.scale, [1.0]])
    X = Xfull * np.outer(Dbar, Dbar)
    centered = float(np.sum(M.centered * X))
    value = M.constant - (centered + M.scatter) / 2
    Zs, offs = z_matrices(topo, network)
    resid = max((abs(np.sum(Z * X) + o) / network.p0**2 for Z, o in zip(Zs, offs)), default=0.0)
    return SdpSolution(
        X=X,
        value=float(value),
        centered_objective=centered,
        eigvals=eig,
        rank_thresholded=rank,
        omega_bar=X[:-1, -1].copy(),
        exact=bool(rank == 1 and resid < 1e-7),
        method=used,
        certificate_min_eig=min_eig,
        constraint_residual=float(resid),
        topo=topo,
    )


@dataclass(frozen=True)
class ExactnessResult:
    holds: bool
    margins: tuple
    lhs: tuple


def exactness_condition(topo: TopologyState, placement: SensorPlacement, noise_sums,
                        T_a: int, network: GasNetwork) -> ExactnessResult:
    """Sufficient condition on the realised noise for a tight relaxation.

    ``T_a`` must exceed the infinity norms of the masked pressure and flow
    noise sums and of ``A diag(delta_q) sum n_q`` divided by the smallest
    non-zero eigenvalue of ``A diag(delta_q) A'``.  The injection term is
    skipped when there are no injection sensors.

    Parameters
    ----------
    noise_sums : tuple of arrays
        Realised ``(sum_t n_p, sum_t n_q, sum_t n_phi)``.

    Returns
    -------
    ExactnessResult
        ``margins`` are ``T_a / lhs`` for the three terms (``inf`` when a term
        is zero or skipped).
    """
    n_p, n_q, n_f = (np.asarray(v, dtype=float) for v in noise_sums)
    A = topology_model(network, topo).A
    t1 = np.max(np.abs(placement.delta_p * n_p)) if len(n_p) else 0.0
    t2 = np.max(np.abs(placement.delta_phi * n_f)) if len(n_f) else 0.0
    if placement.delta_q.sum() > 0:
        G = (A * placement.delta_q) @ A.T
        ev = np.linalg.eigvalsh(G)
        nz = ev[ev > 1e-10 * max(1.0, ev.max())]
        t3 = np.max(np.abs(A @ (placement.delta_q * n_q))) / nz.min()
    else:
        t3 = 0.0
    lhs = (float(t1), float(t2), float(t3))
    margins = tuple(float(T_a / v) if v > 0 else float("inf") for v in lhs)
    return ExactnessResult(holds=bool(T_a > max(lhs)), margins=margins, lhs=lhs)
