"""Property tests for the invariants each module promises."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gasnet_verify.asymptotics import (
    constraint_gradient,
    fisher_information,
    misfit_lambda,
    noncentrality_lambda,
    null_space_basis,
    pseudo_true_params,
)
from gasnet_verify.harness import ExperimentConfig, run_monte_carlo, setup_case
from gasnet_verify.likelihood import Theta, constrained_ml, log_likelihood
from gasnet_verify.network import (
    TopologyState,
    build_incidence,
    load_network,
    physical_topology,
    solve_steady_state,
)
from gasnet_verify.placement import PlacementCosts, greedy_placement, placement_cost
from gasnet_verify.sdr import build_M, exactness_condition, relaxed_ml, z_matrices
from gasnet_verify.sensing import SensorPlacement, generate_observations, rsd_to_noise

NET1 = load_network("network1")
NET2 = load_network("network2")
PATTERNS1 = [[bool((k >> i) & 1) for i in range(3)] for k in range(8)]


@given(st.sampled_from(["network1", "network2"]), st.integers(0, 15),
       st.lists(st.sampled_from([1, -1]), min_size=16, max_size=16))
def test_incidence_rows(name, code, signs):
    net = NET1 if name == "network1" else NET2
    closed = [bool((code >> i) & 1) for i in range(net.L_C)]
    inc = build_incidence(net, TopologyState.make(net, closed, signs[:net.L]))
    sums = inc.A_tilde.sum(axis=1)
    assert np.all(sums[inc.active] == 0)
    np.testing.assert_array_equal(inc.B, inc.A)   # all alpha equal 1 on shipped networks
    np.testing.assert_array_equal(inc.b, inc.a)


@given(st.sampled_from(PATTERNS1))
def test_steady_state_fixed_point(pattern):
    topo = physical_topology(NET1, pattern)
    s = solve_steady_state(NET1, topo)
    again = solve_steady_state(NET1, topo, initial=s)
    np.testing.assert_allclose(again.omega, s.omega, rtol=1e-10, atol=1e-9)


def test_noise_covariance_is_diagonal(case1):
    obs = generate_observations(case1["s1"], case1["noise"], 20000, seed=6)
    z = np.hstack([obs.p_tilde, obs.q_tilde, obs.phi_tilde])
    corr = np.corrcoef(z, rowvar=False)
    off = corr[~np.eye(len(corr), dtype=bool)]
    assert np.max(np.abs(off)) < 5 / np.sqrt(20000)


@given(st.integers(0, 10_000), st.floats(-50, 50))
def test_unmeasured_channels_never_matter(seed, shift):
    net = NET1
    pl = SensorPlacement.default(net)
    h1 = physical_topology(net, [True, True, False])
    s = solve_steady_state(net, h1)
    noise = rsd_to_noise(0.1, s, pl)
    obs = generate_observations(s, noise, 5, seed=seed)
    phi = obs.phi_tilde.copy()
    phi[:, pl.delta_phi == 0] += shift
    from gasnet_verify.sensing import ObservationSet

    other = ObservationSet.from_slices(obs.p_tilde, obs.q_tilde, phi)
    M1 = build_M(h1, obs, pl, noise, net)
    M2 = build_M(h1, other, pl, noise, net)
    np.testing.assert_allclose(M1.matrix, M2.matrix, rtol=1e-12, atol=1e-9)
    th = Theta(h1, s.omega)
    assert log_likelihood(obs, pl, noise, th, net) == pytest.approx(
        log_likelihood(other, pl, noise, th, net), rel=1e-12)


@given(st.integers(0, 10_000), st.sampled_from([0, 2, 4, 6]))
def test_relaxation_dominance_and_feasibility(seed, k):
    net = NET1
    pl = SensorPlacement.default(net)
    truth = physical_topology(net, PATTERNS1[k])
    fit = physical_topology(net, PATTERNS1[(k + 3) % 8])
    s = solve_steady_state(net, truth)
    noise = rsd_to_noise(0.1, s, pl)
    obs = generate_observations(s, noise, 40, seed=seed)
    for topo in (truth, fit):
        sol = relaxed_ml(topo, build_M(topo, obs, pl, noise, net), net)
        assert sol.constraint_residual <= 1e-7
        mu = constrained_ml(obs, topo, net, pl, noise, starts=[sol.omega_bar]).value
        assert sol.value >= mu - 1e-6 * abs(mu)
        ex = exactness_condition(topo, pl, obs.noise_sums, obs.T_a, net)
        if ex.holds and topo == truth:
            assert sol.value == pytest.approx(mu, rel=1e-6)


@given(st.sampled_from(PATTERNS1), st.integers(0, 100))
def test_objective_identity_on_feasible_points(pattern, seed):
    net = NET1
    pl = SensorPlacement.default(net)
    topo = physical_topology(net, pattern)
    s = solve_steady_state(net, topo)
    noise = rsd_to_noise(0.1, s, pl)
    obs = generate_observations(s, noise, 10, seed=seed)
    M = build_M(topo, obs, pl, noise, net)
    v = np.append(s.omega, 1.0)
    lhs = M.constant - np.sum(M.matrix * np.outer(v, v)) / 2
    assert lhs == pytest.approx(log_likelihood(obs, pl, noise, Theta(topo, s.omega), net),
                                rel=1e-10)


@given(st.integers(0, 1000))
def test_constraints_only_see_the_diagonal(seed):
    rng = np.random.default_rng(seed)
    topo = physical_topology(NET1, [True, True, False])
    Zs, offs = z_matrices(topo, NET1)
    S = Zs[0].shape[0]
    G = rng.normal(size=(S, S))
    X = G @ G.T
    E = rng.normal(size=(S, S))
    E = E + E.T
    np.fill_diagonal(E, 0.0)
    for Z in Zs:
        assert np.sum(Z * X) == pytest.approx(np.sum(Z * (X + E)), rel=1e-12, abs=1e-9)


@given(st.sampled_from(PATTERNS1), st.integers(1, 300))
def test_fim_blocks_and_projection(pattern, T):
    net = NET1
    pl = SensorPlacement.default(net)
    topo = physical_topology(net, pattern)
    s = solve_steady_state(net, topo)
    noise = rsd_to_noise(0.1, s, pl)
    J = fisher_information(topo, pl, noise, T, net).J
    assert not J[:net.N, net.N:].any() and not J[net.N:, :net.N].any()
    U = null_space_basis(constraint_gradient(topo, s.omega, net))
    P = U @ U.T
    np.testing.assert_allclose(P @ P, P, atol=1e-12)


@given(st.integers(0, 1000))
def test_greedy_cost_never_increases(seed):
    net = NET2
    costs = PlacementCosts.random(net, np.random.default_rng(seed))
    res = greedy_placement(net, costs)
    assert res.cost <= placement_cost(SensorPlacement.all_pressure(net), costs) + 1e-12
    assert res.swaps <= res.checks_performed


def test_statistic_grows_linearly_with_measurement_space_lambda():
    # the mean statistic (times 2) tracks the misfit lambda as T_a changes
    cfg = ExperimentConfig("network2", 1, T_a=[50, 200], runs=200, seed=5)
    res = run_monte_carlo(cfg)
    means = {T: 2 * res.statistics[T].mean() for T in (50, 200)}
    slope = (means[200] - means[50]) / 150
    setup = setup_case(cfg)
    w0 = pseudo_true_params(setup.A_H0, setup.state_H1, setup.placement, setup.noise,
                            setup.network, A_true=setup.A_H1)
    per_sample = misfit_lambda(setup.A_H0, setup.state_H1, setup.placement, setup.noise, 1,
                               setup.network, omega_H0=w0)
    assert slope == pytest.approx(per_sample, rel=0.15)


@pytest.mark.xfail(strict=True, reason="the null-space non-centrality overstates the "
                   "likelihood-ratio growth rate on these benchmarks; see the decisions ledger")
def test_statistic_slope_matches_null_space_lambda():
    cfg = ExperimentConfig("network2", 1, T_a=[50, 200], runs=200, seed=5)
    res = run_monte_carlo(cfg)
    slope = (2 * res.statistics[200].mean() - 2 * res.statistics[50].mean()) / 150
    setup = setup_case(cfg)
    per_sample = noncentrality_lambda(setup.A_H0, setup.A_H1, setup.state_H1, setup.placement,
                                      setup.noise, 1, setup.network)
    assert slope == pytest.approx(per_sample, rel=0.15)


def test_misidentification_term_decays():
    cfg = ExperimentConfig("network1", 2, T_a=[10, 100], runs=300, seed=2)
    rows = run_monte_carlo(cfg).rows
    assert rows[1]["pd_wrong_term"] <= rows[0]["pd_wrong_term"]
    assert rows[1]["pd_wrong_term"] <= 0.01
    for r in rows:
        assert r["pd_wrong_term"] + r["pd_right_term"] == pytest.approx(r["p_emp"])


@pytest.mark.xfail(strict=True, reason="under H0 the relaxed GLRT statistic sits far below "
                   "the chi-squared threshold, so no false alarms occur; see the ledger")
def test_false_alarm_rate_matches_target():
    cfg = ExperimentConfig("network1", 1, T_a=[80], runs=10_000, seed=0, truth="H0", p_fa=1e-3)
    row = run_monte_carlo(cfg).rows[0]
    assert row["ci_low"] <= 1e-3 <= row["ci_high"]
