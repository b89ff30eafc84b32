import numpy as np
import pytest

from gasnet_verify.network import SolverError
from gasnet_verify.sdp import solve_diagonal_sdp

cp = pytest.importorskip("cvxpy")


def cvx_solve(C, Ad, b):
    n = C.shape[0]
    X = cp.Variable((n, n), PSD=True)
    cons = [Ad[i] @ cp.diag(X) == b[i] for i in range(len(b))]
    prob = cp.Problem(cp.Minimize(cp.trace(C @ X)), cons)
    prob.solve(solver=cp.CLARABEL)
    return prob.value, X.value


@pytest.mark.parametrize("seed", range(4))
def test_maxcut_style_sdp_matches_cvxpy(seed):
    rng = np.random.default_rng(seed)
    n = 7
    G = rng.normal(size=(n, n))
    C = (G + G.T) / 2
    Ad = np.eye(n)
    b = np.ones(n)
    res = solve_diagonal_sdp(C, Ad, b)
    ref, _ = cvx_solve(C, Ad, b)
    assert res.primal_value == pytest.approx(ref, rel=1e-6, abs=1e-6)
    assert res.gap < 1e-8
    assert np.linalg.eigvalsh(res.X)[0] > -1e-9
    np.testing.assert_allclose(np.diag(res.X), 1.0, atol=1e-7)


@pytest.mark.parametrize("seed", range(3))
def test_weymouth_shaped_sdp_matches_cvxpy(seed):
    # PSD objective plus mixed-sign diagonal equality rows and a corner fixed to 1
    rng = np.random.default_rng(100 + seed)
    n = 6
    G = rng.normal(size=(n, n))
    C = G @ G.T + 0.1 * np.eye(n)
    C[-1, -1] += 5.0
    Ad = np.zeros((3, n))
    Ad[0, [0, 3]] = [1.0, -0.5]
    Ad[1, [1, 4]] = [-1.0, 0.8]
    Ad[2, -1] = 1.0
    b = np.array([0.2, 0.3, 1.0])
    res = solve_diagonal_sdp(C, Ad, b)
    ref, Xref = cvx_solve(C, Ad, b)
    assert res.primal_value == pytest.approx(ref, rel=1e-6, abs=1e-6)
    assert res.dual_value == pytest.approx(res.primal_value, rel=1e-7, abs=1e-7)


def test_infeasible_problem_raises():
    # diag(X)_0 = -1 cannot hold for PSD X
    with pytest.raises(SolverError):
        solve_diagonal_sdp(np.eye(2), np.array([[1.0, 0.0]]), np.array([-1.0]), max_iter=40)
