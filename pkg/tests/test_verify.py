import numpy as np
import pytest

from gasnet_verify.network import TopologyState, load_network, physical_topology
from gasnet_verify.sensing import NoiseModel, generate_observations
from gasnet_verify.verify import (
    RelaxedSolver,
    default_epsilon,
    efficient_verify,
    enumerate_topologies,
    fitness_test,
    flippable_pipelines,
    gradient_guided_search,
    neighbours,
    relaxed_glrt,
)


def test_enumeration_counts(net1, net2):
    assert len(enumerate_topologies(net1)) == 8
    assert len(enumerate_topologies(net1, include_orientation_flips=True)) == 24
    assert [net1.pipelines[l].id for l in flippable_pipelines(net1)] == ["L7", "C3"]
    assert len(enumerate_topologies(net2)) == 8
    assert len(enumerate_topologies(net2, include_orientation_flips=True)) == 42
    with pytest.raises(ValueError):
        enumerate_topologies(net1, cap=2)


def test_enumeration_is_unique_and_contains_cases(net1):
    cands = enumerate_topologies(net1, include_orientation_flips=True)
    assert len(set(cands)) == len(cands)
    for pattern in ([True, True, True], [True, True, False], [False, True, False]):
        assert physical_topology(net1, pattern) in cands


def test_neighbours_are_one_link_away(net1):
    cands = enumerate_topologies(net1, include_orientation_flips=True)
    topo = physical_topology(net1, [True, True, True])
    nb = neighbours(topo, cands, net1)
    assert topo not in nb and nb
    for c in nb:
        n_state = sum(a != b for a, b in zip(c.closed, topo.closed))
        assert n_state <= 1
        if n_state == 0:
            assert sum(a != b for a, b in zip(c.orientation, topo.orientation)) == 1


def _tiny(noise, f=1e-3):
    return NoiseModel(noise.sigma_p * f, noise.sigma_q * f, noise.sigma_phi * f)


def test_zero_noise_decisions(case1):
    net, pl = case1["net"], case1["pl"]
    noise = _tiny(case1["noise"])
    cands = enumerate_topologies(net)
    obs1 = generate_observations(case1["s1"], noise, 10, seed=0)
    rep = relaxed_glrt(obs1, net, pl, noise, case1["h0"], cands)
    assert rep.decision == "H1" and rep.estimated_topology == case1["h1"]
    obs0 = generate_observations(case1["s0"], noise, 10, seed=0)
    rep0 = relaxed_glrt(obs0, net, pl, noise, case1["h0"], cands)
    assert rep0.decision == "H0" and rep0.estimated_topology == case1["h0"]
    assert rep0.statistic < 0


def test_relaxed_glrt_report_fields(case1):
    net, pl, noise = case1["net"], case1["pl"], case1["noise"]
    obs = generate_observations(case1["s1"], noise, 80, seed=1)
    cands = enumerate_topologies(net)
    rep = relaxed_glrt(obs, net, pl, noise, case1["h0"], cands, p_fa=1e-3)
    assert len(rep.search_path) == len(cands)
    assert rep.n_solves == len(cands)
    assert rep.threshold == pytest.approx(default_epsilon(1e-3, net) / 2)
    d = rep.to_dict(net)
    assert d["estimated_topology"] == "CCO"
    assert rep.statistic == pytest.approx(max(s.value for s in rep.search_path[1:])
                                          - rep.search_path[0].value)
    with pytest.raises(ValueError):
        relaxed_glrt(obs, net, pl, noise, case1["h0"], [case1["h0"]])
    with pytest.raises(ValueError):
        relaxed_glrt(obs, net, pl, noise, case1["h0"], cands, rho=-1.0)


def test_threshold_sources(case1):
    net, pl, noise = case1["net"], case1["pl"], case1["noise"]
    obs = generate_observations(case1["s1"], noise, 20, seed=1)
    cands = [case1["h0"], case1["h1"]]
    assert relaxed_glrt(obs, net, pl, noise, case1["h0"], cands, rho=np.e).threshold == 1.0
    assert relaxed_glrt(obs, net, pl, noise, case1["h0"], cands, log_rho=-3.0).threshold == -3.0


def test_fitness_value_near_half_dof_under_h0(case1):
    net, pl, noise = case1["net"], case1["pl"], case1["noise"]
    vals = []
    for r in range(40):
        obs = generate_observations(case1["s0"], noise, 40, seed=2, run=r)
        vals.append(fitness_test(obs, net, pl, noise, case1["h0"])["value"])
    # centred deviance of the right model: about half a chi-squared draw
    dof = pl.n_sensors - net.N
    assert 0.25 * dof < np.mean(vals) < 1.0 * dof
    with pytest.raises(ValueError):
        fitness_test(obs, net, pl, noise, case1["h0"], epsilon=0.0)


def test_fitness_fires_on_gross_change(net1):
    from gasnet_verify.network import solve_steady_state
    from gasnet_verify.sensing import SensorPlacement, rsd_to_noise

    pl = SensorPlacement.default(net1)
    h0 = physical_topology(net1, [False, False, False])
    h1 = physical_topology(net1, [True, True, True])
    noise = rsd_to_noise(0.1, solve_steady_state(net1, h0), pl)
    obs = generate_observations(solve_steady_state(net1, h1), noise, 100, seed=0)
    rep = efficient_verify(obs, net1, pl, noise, h0, candidates=enumerate_topologies(net1))
    assert rep.fitness_triggered and rep.decision == "H1"
    assert rep.estimated_topology is None and rep.n_solves == 1


def test_search_path_never_revisits_and_improves(case1):
    net, pl, noise = case1["net"], case1["pl"], case1["noise"]
    cands = enumerate_topologies(net, include_orientation_flips=True)
    for r in range(5):
        obs = generate_observations(case1["s1"], noise, 80, seed=3, run=r)
        res = gradient_guided_search(obs, net, pl, noise, case1["h0"], cands)
        topos = [s.topo for s in res["path"]]
        assert len(set(topos)) == len(topos)
        vals = [s.value for s in res["path"]]
        assert all(b > a for a, b in zip(vals, vals[1:]))
        assert res["best_alternative"] != case1["h0"]


def test_efficient_agrees_with_enumeration(case1):
    net, pl, noise = case1["net"], case1["pl"], case1["noise"]
    cands = enumerate_topologies(net)
    for truth in ("s0", "s1"):
        for r in range(6):
            obs = generate_observations(case1[truth], noise, 80, seed=4, run=r)
            solver = RelaxedSolver(net, pl, noise, obs)
            a = relaxed_glrt(obs, net, pl, noise, case1["h0"], cands, solver=solver)
            b = efficient_verify(obs, net, pl, noise, case1["h0"], candidates=cands, solver=solver)
            assert a.decision == b.decision


def test_solver_cache_counts(case1):
    net, pl, noise = case1["net"], case1["pl"], case1["noise"]
    obs = generate_observations(case1["s1"], noise, 10, seed=0)
    solver = RelaxedSolver(net, pl, noise, obs)
    solver.xi(case1["h0"])
    solver.xi(case1["h0"])
    assert solver.n_solves == 1
    with pytest.raises(ValueError):
        RelaxedSolver(net, pl, NoiseModel(0, 0, 0), obs)


def test_synthetic_ring_detects_toggle():
    net = load_network("ring5")
    from gasnet_verify.network import solve_steady_state
    from gasnet_verify.sensing import SensorPlacement, rsd_to_noise

    pl = SensorPlacement.default(net)
    h0 = physical_topology(net, [True])
    h1 = physical_topology(net, [False])
    noise = rsd_to_noise(0.05, solve_steady_state(net, h0), pl)
    obs = generate_observations(solve_steady_state(net, h1), noise, 50, seed=0)
    rep = relaxed_glrt(obs, net, pl, noise, h0, enumerate_topologies(net))
    assert rep.decision == "H1" and rep.estimated_topology == h1
    assert isinstance(rep.estimated_topology, TopologyState)
