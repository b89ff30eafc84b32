"""Dense primal-dual interior-point solver for diagonally constrained SDPs.

Solves

    minimise  <C, X>   subject to   Ad @ diag(X) = b,   X PSD,

and its dual ``max b'y  s.t.  S = C - sum_i y_i diag(Ad[i]) PSD``.  Every
constraint matrix is diagonal, so the Schur complement of the HKM search
direction is ``Ad (X o S^-1) Ad'``.  Steps follow Mehrotra's
predictor-corrector scheme.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .network import SolverError

__all__ = ["SdpResult", "solve_diagonal_sdp"]


@dataclass(frozen=True, eq=False)
class SdpResult:
    X: np.ndarray
    y: np.ndarray
    S: np.ndarray
    primal_value: float
    dual_value: float
    iterations: int
    gap: float
    primal_infeasibility: float
    dual_infeasibility: float


def _max_step(M, dM, L=None):
    """Largest ``a <= 1`` (times 0.98 margin) keeping ``M + a dM`` PSD."""
    if L is None:
        L = np.linalg.cholesky(M)
    W = linalg.solve_triangular(L, dM, lower=True)
    W = linalg.solve_triangular(L, W.T, lower=True)
    lam = np.linalg.eigvalsh((W + W.T) / 2)[0]
    if lam >= 0:
        return 1.0
    return min(1.0, -1.0 / lam)


def solve_diagonal_sdp(C, Ad, b, *, tol: float = 1e-9, max_iter: int = 100) -> SdpResult:
    """Solve the SDP; raises :class:`SolverError` on failure.

    Parameters
    ----------
    C : (n, n) symmetric array
    Ad : (m, n) array
        Row ``i`` is the diagonal of constraint matrix ``i``.
    b : (m,) array
    tol : float
        Relative tolerance on the duality gap and both infeasibilities.
    """
    C = np.asarray(C, dtype=float)
    C = (C + C.T) / 2
    Ad = np.atleast_2d(np.asarray(Ad, dtype=float))
    b = np.asarray(b, dtype=float)
    n = C.shape[0]
    m = Ad.shape[0]
    normC = max(1.0, np.linalg.norm(C))
    normb = max(1.0, np.linalg.norm(b))

    # standard starting point scaled to the data
    colnorm = np.linalg.norm(Ad, axis=0)
    xi = max(10.0, np.sqrt(n), n * np.max((1 + np.abs(b)) / (1 + np.linalg.norm(Ad, axis=1))))
    eta = max(10.0, np.sqrt(n), np.linalg.norm(C), np.max(colnorm) if m else 0.0)
    X = xi * np.eye(n)
    S = eta * np.eye(n)
    y = np.zeros(m)
    with np.errstate(all="ignore"):
        try:
            return _ipm_loop(C, Ad, b, X, S, y, n, m, normC, normb, tol, max_iter)
        except (ValueError, np.linalg.LinAlgError) as exc:
            # non-finite iterates reaching LAPACK
            raise SolverError(f"interior point failed: {exc}") from exc


def _ipm_loop(C, Ad, b, X, S, y, n, m, normC, normb, tol, max_iter):
    def adj(v):
        return np.diag(Ad.T @ v)

    it = 0
    gap = pinf = dinf = np.inf
    for it in range(1, max_iter + 1):
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(S)) and np.all(np.isfinite(y))):
            raise SolverError("interior point iterates diverged (problem may be infeasible)")
        rp = b - Ad @ np.diag(X)
        Rd = C - adj(y) - S
        Rd = (Rd + Rd.T) / 2
        mu = np.sum(X * S) / n
        pval = float(np.sum(C * X))
        dval = float(b @ y)
        gap = abs(pval - dval) / (1 + abs(pval) + abs(dval))
        pinf = np.linalg.norm(rp) / normb
        dinf = np.linalg.norm(Rd) / normC
        if gap < tol and pinf < tol and dinf < tol:
            break
        try:
            LS = np.linalg.cholesky(S)
            LX = np.linalg.cholesky(X)
        except np.linalg.LinAlgError as exc:
            raise SolverError("iterate lost positive definiteness") from exc
        Sinv = linalg.cho_solve((LS, True), np.eye(n))
        Sinv = (Sinv + Sinv.T) / 2
        H = Ad @ (X * Sinv) @ Ad.T
        try:
            cH = linalg.cho_factor(H + 1e-14 * np.trace(H) / max(m, 1) * np.eye(m))
        except linalg.LinAlgError:
            cH = None
        XRdSinv = X @ Rd @ Sinv

        def direction(Rc):
            rhs = rp - Ad @ np.diag(Rc) + Ad @ np.diag(XRdSinv)
            dy = linalg.cho_solve(cH, rhs) if cH is not None else np.linalg.lstsq(H, rhs, rcond=None)[0]
            dS = Rd - adj(dy)
            dX = Rc - X @ dS @ Sinv
            return (dX + dX.T) / 2, dy, dS

        # predictor
        dXa, dya, dSa = direction(-X)
        ap = _max_step(X, dXa, LX)
        ad = _max_step(S, dSa, LS)
        mu_aff = np.sum((X + ap * dXa) * (S + ad * dSa)) / n
        sigma = min(1.0, (mu_aff / mu) ** 3)
        # corrector
        Rc = sigma * mu * Sinv - X - dXa @ dSa @ Sinv
        dX, dy, dS = direction(Rc)
        ap = min(1.0, 0.98 * _max_step(X, dX, LX))
        ad = min(1.0, 0.98 * _max_step(S, dS, LS))
        X = X + ap * dX
        y = y + ad * dy
        S = S + ad * dS
        X = (X + X.T) / 2
        S = (S + S.T) / 2
    else:
        raise SolverError(
            f"interior point did not converge (gap={gap:.1e}, pinf={pinf:.1e}, dinf={dinf:.1e})"
        )
    return SdpResult(X=X, y=y, S=S, primal_value=pval, dual_value=dval, iterations=it,
                     gap=gap, primal_infeasibility=pinf, dual_infeasibility=dinf)
