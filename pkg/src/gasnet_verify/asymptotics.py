"""Closed-form performance predictions for the topology test.

Fisher information, constraint geometry, the constrained Cramer-Rao bound,
pseudo-true parameters, the non-centrality ``lambda``, the Marcum Q
function and its inverse, the detection-probability prediction and the
required observation count.

Degrees of freedom
------------------
Thresholds and detection probabilities are computed on (non-)central
chi-squared laws with ``dof`` degrees of freedom (default ``L + N``).  A
chi-squared law with ``k`` degrees of freedom and non-centrality ``lam``
has survival ``Q_{k/2}(sqrt(lam), sqrt(x))`` in terms of :func:`marcum_q`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special, stats

from .likelihood import constrained_ml, quadratic_data, topology_model
from .network import GasNetwork, SteadyState, TopologyState, solve_steady_state
from .sensing import NoiseModel, ObservationSet, SensorPlacement

__all__ = [
    "FimSet",
    "fisher_information",
    "constraint_gradient",
    "null_space_basis",
    "analytic_null_basis",
    "ccrb",
    "ccrb_pinv",
    "pseudo_true_params",
    "noncentrality_lambda",
    "misfit_lambda",
    "marcum_q",
    "marcum_q_inverse",
    "predict_pd",
    "chi2_threshold",
    "required_observations",
    "wald_statistic",
    "PerformancePrediction",
]


@dataclass(frozen=True, eq=False)
class FimSet:
    """Fisher information ``J = T_a blockdiag(J_pp, J_phiphi)``."""

    J: np.ndarray
    J_pp: np.ndarray
    J_phiphi: np.ndarray
    T_a: float


def fisher_information(topo: TopologyState, placement: SensorPlacement, noise: NoiseModel,
                       T_a: float, network: GasNetwork) -> FimSet:
    noise.require_positive()
    A = topology_model(network, topo).A
    Jpp = np.diag(placement.delta_p) / noise.sigma_p**2
    Jff = np.diag(placement.delta_phi) / noise.sigma_phi**2 + (A * placement.delta_q) @ A.T / noise.sigma_q**2
    N, L = network.N, network.L
    J = np.zeros((N + L, N + L))
    J[:N, :N] = T_a * Jpp
    J[N:, N:] = T_a * Jff
    return FimSet(J=J, J_pp=Jpp, J_phiphi=Jff, T_a=T_a)


def constraint_gradient(topo: TopologyState, omega, network: GasNetwork) -> np.ndarray:
    """Jacobian ``F`` of the Weymouth constraint with respect to ``omega``."""
    return topology_model(network, topo).constraint_jacobian(omega)


def null_space_basis(F, rtol: float = 1e-10) -> np.ndarray:
    """Orthonormal basis of the null space of a full-row-rank ``F``.

    Raises
    ------
    ValueError
        If ``F`` is rank deficient.
    """
    F = np.atleast_2d(np.asarray(F, dtype=float))
    _, s, Vt = np.linalg.svd(F)
    rank = int(np.sum(s > rtol * max(s.max(initial=0.0), 1e-300)))
    if rank < F.shape[0]:
        raise ValueError(f"constraint gradient is rank deficient ({rank} < {F.shape[0]})")
    return Vt[rank:].T.copy()


def analytic_null_basis(topo: TopologyState, network: GasNetwork) -> np.ndarray:
    """``[I; -B' diag(c)^-1]``, the null basis of ``[B, diag(c)]``."""
    B = topology_model(network, topo).B
    return np.vstack([np.eye(network.N), -(B / network.c[:, None])])


def _geometry(topo, omega, placement, noise, T_a, network):
    U = null_space_basis(constraint_gradient(topo, omega, network))
    J = fisher_information(topo, placement, noise, T_a, network).J
    return U, J


def ccrb(topo: TopologyState, omega, placement: SensorPlacement, noise: NoiseModel,
         T_a: float, network: GasNetwork) -> np.ndarray:
    """Constrained Cramer-Rao bound ``U (U' J U)^-1 U'``.

    Raises
    ------
    ValueError
        If ``U' J U`` is singular (improper sensor placement).
    """
    U, J = _geometry(topo, omega, placement, noise, T_a, network)
    G = U.T @ J @ U
    if np.linalg.matrix_rank(G, tol=1e-10 * max(np.abs(G).max(), 1e-300)) < G.shape[0]:
        raise ValueError("U'JU is singular: the sensor placement is not proper")
    return U @ np.linalg.solve(G, U.T)


def ccrb_pinv(topo: TopologyState, omega, placement: SensorPlacement, noise: NoiseModel,
              T_a: float, network: GasNetwork) -> np.ndarray:
    """Pseudo-inverse of the CCRB, ``U U' J U U'``."""
    U, J = _geometry(topo, omega, placement, noise, T_a, network)
    return U @ (U.T @ J @ U) @ U.T


def _population_obs(truth: SteadyState) -> ObservationSet:
    return ObservationSet(
        T_a=1,
        sum_p=truth.p.copy(), sum_q=truth.q.copy(), sum_phi=truth.phi.copy(),
        sumsq_p=truth.p**2, sumsq_q=truth.q**2, sumsq_phi=truth.phi**2,
    )


def pseudo_true_params(A_fit: TopologyState, truth: SteadyState, placement: SensorPlacement,
                       noise: NoiseModel, network: GasNetwork, *,
                       A_true: TopologyState | None = None) -> np.ndarray:
    """Noise-free limit of the constrained ML of model ``A_fit``.

    Minimises the weighted squared distance between the model's predicted
    measurement means and those of ``truth`` over the Weymouth manifold of
    ``A_fit``.  Returns ``truth.omega`` unchanged when ``A_fit`` is the
    generating topology (given as ``A_true``, or detected by a zero
    constraint residual).
    """
    model = topology_model(network, A_fit)
    scale = network.p0**2
    if A_true is not None and A_fit == A_true:
        return truth.omega.copy()
    if A_true is None and np.max(np.abs(model.constraint(truth.omega))) < 1e-9 * scale and \
            np.allclose(model.A.T @ truth.phi, truth.q, atol=1e-9 * max(1, np.abs(truth.q).max())):
        return truth.omega.copy()
    obs = _population_obs(truth)
    starts = [truth.omega]
    try:
        starts.insert(0, solve_steady_state(network, A_fit).omega)
    except Exception:
        pass
    res = constrained_ml(obs, A_fit, network, placement, noise, starts=starts)
    return _polish(res.omega_hat, model, obs, placement, noise)


def _polish(omega, model, obs, placement, noise):
    """A few Newton-KKT steps to push feasibility to machine precision."""
    from .sdr import _newton_kkt, _scaled_problem

    qd = quadratic_data(obs, placement, noise, model.A)
    P, r, s, zd, beta, norm = _scaled_problem(model, qd)
    x0 = (omega[model.free] / model.scale[model.free])[None]
    x, y, conv = _newton_kkt(P, r, zd, beta, x0, tol=1e-13)
    out = np.zeros_like(omega)
    step = x[0] * model.scale[model.free]
    if conv[0] and np.max(np.abs(step - omega[model.free])) < 1e-3 * np.max(np.abs(omega)):
        out[model.free] = step
        return out
    return omega


def noncentrality_lambda(A_H0: TopologyState, A_H1: TopologyState, truth: SteadyState,
                         placement: SensorPlacement, noise: NoiseModel, T_a: float,
                         network: GasNetwork, *, omega_H0=None) -> float:
    """``d' U U' J(A_H0) U U' d`` with ``d = omega*(A_H1) - omega*(A_H0)``.

    ``truth`` is the steady state generating the data (under ``A_H1``); ``U``
    is evaluated at ``(A_H0, omega*(A_H0))``.
    """
    if A_H0 == A_H1:
        return 0.0
    w1 = truth.omega
    w0 = omega_H0 if omega_H0 is not None else pseudo_true_params(
        A_H0, truth, placement, noise, network, A_true=A_H1)
    d = w1 - w0
    Pn = ccrb_pinv(A_H0, w0, placement, noise, T_a, network)
    return float(max(d @ Pn @ d, 0.0))


def misfit_lambda(A_H0: TopologyState, truth: SteadyState, placement: SensorPlacement,
                  noise: NoiseModel, T_a: float, network: GasNetwork, *, omega_H0=None) -> float:
    """Twice the population log-likelihood gap of the best ``A_H0`` fit.

    This is the non-centrality seen by the likelihood-ratio statistic in
    measurement space; it is reported next to :func:`noncentrality_lambda`
    as a diagnostic.
    """
    w0 = omega_H0 if omega_H0 is not None else pseudo_true_params(
        A_H0, truth, placement, noise, network)
    model = topology_model(network, A_H0)
    qd = quadratic_data(_population_obs(truth), placement, noise, model.A)
    return float(T_a * qd.value(w0)[0])


# ---------------------------------------------------------------------------
# Marcum Q
# ---------------------------------------------------------------------------

def _check_marcum(w, a, b):
    if w <= 0:
        raise ValueError("order w must be positive")
    if a < 0 or b < 0:
        raise ValueError("a and b must be non-negative")


def marcum_q(w: float, a: float, b: float) -> float:
    """Generalised Marcum Q function ``Q_w(a, b)``.

    Evaluated as the survival at ``b^2`` of a non-central chi-squared law
    with ``2w`` degrees of freedom and non-centrality ``a^2``: a Poisson
    mixture of central chi-squared survivals, summed over a window of
    the Poisson mode wide enough that the neglected mass is below ``1e-17``.
    """
    _check_marcum(w, a, b)
    if b == 0:
        return 1.0
    lam = a * a / 2.0
    x = b * b
    k = 2.0 * w
    if lam == 0:
        return float(stats.chi2.sf(x, k))
    mode = int(np.floor(lam))
    width = int(np.ceil(12 * np.sqrt(lam + 1) + 20))
    j = np.arange(max(0, mode - width), mode + width + 1)
    logw = -lam + j * np.log(lam) - special.gammaln(j + 1)
    weights = np.exp(logw)
    total = float(np.sum(weights * stats.chi2.sf(x, k + 2 * j)))
    return min(1.0, total)


def _marcum_density(w, a, x):
    """``-dQ_w(a, x)/dx``, the integrand of the Marcum Q definition."""
    if x <= 0:
        return 0.0
    if a == 0:
        return float(np.exp((2 * w - 1) * np.log(x) - x * x / 2 - (w - 1) * np.log(2)
                            - special.gammaln(w)))
    bessel = special.ive(w - 1, a * x)
    if bessel <= 0:
        return 0.0
    return float(np.exp(np.log(x) + (w - 1) * np.log(x / a) - (x - a) ** 2 / 2 + np.log(bessel)))


def marcum_q_inverse(w: float, a: float, d: float, *, tol: float = 1e-12) -> float:
    """Solve ``marcum_q(w, a, b) = d`` for ``b`` by bisection and Newton."""
    if not 0 < d < 1:
        raise ValueError("d must lie in (0, 1)")
    _check_marcum(w, a, 0.0)
    lo, hi = 0.0, max(1.0, a + np.sqrt(2 * w))
    while marcum_q(w, a, hi) > d:
        lo, hi = hi, 2 * hi
    b = 0.5 * (lo + hi)
    for _ in range(200):
        fb = marcum_q(w, a, b) - d
        if abs(fb) < tol:
            return b
        if fb > 0:
            lo = b
        else:
            hi = b
        dens = _marcum_density(w, a, b)
        nb = b + fb / dens if dens > 0 else 0.5 * (lo + hi)
        b = nb if lo < nb < hi else 0.5 * (lo + hi)
        if hi - lo < 1e-15 * max(1.0, hi):
            return b
    return b


def chi2_threshold(p_fa: float, dof: int) -> float:
    """Upper ``p_fa`` quantile of the central chi-squared law."""
    if not 0 < p_fa < 1:
        raise ValueError("p_fa must lie in (0, 1)")
    return float(stats.chi2.isf(p_fa, dof))


def predict_pd(lam: float, p_fa: float, dof: int) -> float:
    """Detection probability of a non-central chi-squared statistic.

    The threshold is the central ``p_fa`` quantile with ``dof`` degrees of
    freedom.
    """
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    rho = chi2_threshold(p_fa, dof)
    return marcum_q(dof / 2.0, np.sqrt(lam), np.sqrt(rho))


@dataclass(frozen=True)
class PerformancePrediction:
    lam: float
    dof: int
    rho: float
    p_d: float
    t_a_required: int | None = None


def required_observations(lambda_per_sample: float, p_d_target: float, p_fa: float,
                          dof: int):
    """Smallest count whose predicted detection probability hits the target.

    Returns
    -------
    floor, ceil : int
        ``floor(lam_req / lambda_per_sample)`` and the matching ceiling.
    lam_req : float
        Non-centrality with ``predict_pd(lam_req) == p_d_target``.
    """
    if lambda_per_sample <= 0:
        raise ValueError("lambda_per_sample must be positive")
    if not p_fa < p_d_target < 1:
        raise ValueError("target must lie strictly between p_fa and 1")
    lo, hi = 0.0, 1.0
    while predict_pd(hi, p_fa, dof) < p_d_target:
        lo, hi = hi, 2 * hi
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if predict_pd(mid, p_fa, dof) < p_d_target:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-13 * hi:
            break
    lam_req = 0.5 * (lo + hi)
    ratio = lam_req / lambda_per_sample
    return int(np.floor(ratio)), int(np.ceil(ratio)), float(lam_req)


def wald_statistic(omega_hat, omega_star_H0, ccrb_pinv_matrix) -> float:
    """``d' CCRB^+ d`` with ``d = omega_hat - omega*(A_H0)``."""
    d = np.asarray(omega_hat, dtype=float) - np.asarray(omega_star_H0, dtype=float)
    return float(max(d @ np.asarray(ccrb_pinv_matrix) @ d, 0.0))
