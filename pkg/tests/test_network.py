import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gasnet_verify.network import (
    GasNetwork,
    NetworkError,
    SolverError,
    SteadyState,
    TopologyState,
    build_incidence,
    iter_closed_patterns,
    load_network,
    mass_residual,
    physical_topology,
    shipped_networks,
    solve_steady_state,
    weymouth_residual,
)


def two_node(p0=60.0, q1=-10.0, c=12.0):
    return GasNetwork.from_dict({
        "name": "line", "reference_node": 0, "p0": p0,
        "nodes": [{"id": 0, "injection": -q1}, {"id": 1, "injection": q1}],
        "pipelines": [{"id": "L1", "from": 0, "to": 1, "c": c, "alpha": 1.0, "changeable": False}],
    })


def compressor_net():
    return GasNetwork.from_dict({
        "name": "comp", "reference_node": 0, "p0": 100.0,
        "nodes": [{"id": 0, "injection": 5.0}, {"id": 1, "injection": 0.0},
                  {"id": 2, "injection": -5.0}],
        "pipelines": [
            {"id": "L1", "from": 0, "to": 1, "c": 1.0, "alpha": 1.0, "changeable": False},
            {"id": "L2", "from": 1, "to": 2, "c": 1.0, "alpha": 2.0, "changeable": False},
        ],
    })


def test_shipped_networks_present():
    names = shipped_networks()
    assert {"network1", "network2"} <= set(names)
    n1, n2 = load_network("network1"), load_network("network2")
    assert (n1.N + 1, n1.L_F, n1.L_C) == (14, 13, 3)
    assert (n2.N + 1, n2.L_F, n2.L_C) == (14, 11, 4)
    assert n1.q0 == pytest.approx(223.0)
    assert n2.q0 == pytest.approx(183.0)


def test_network_roundtrip(net1, tmp_path):
    path = tmp_path / "n.json"
    path.write_text(json.dumps(net1.to_dict()))
    again = load_network(path)
    assert again.to_dict() == net1.to_dict()


def test_fixed_pipelines_must_precede_changeable():
    d = two_node().to_dict()
    d["nodes"].append({"id": 2, "injection": 0.0})
    d["pipelines"].insert(0, {"id": "C1", "from": 0, "to": 2, "c": 1.0, "alpha": 1.0,
                              "changeable": True})
    with pytest.raises(NetworkError):
        GasNetwork.from_dict(d)


@pytest.mark.parametrize("field,value", [("c", 0.0), ("alpha", -1.0)])
def test_invalid_pipeline_parameters(field, value):
    d = two_node().to_dict()
    d["pipelines"][0][field] = value
    with pytest.raises(NetworkError):
        GasNetwork.from_dict(d)


def test_incidence_first_row_network1(net1):
    inc = build_incidence(net1, TopologyState.make(net1))
    assert inc.a[0] == 1.0
    assert inc.A_tilde[0, net1.column(1)] == -1.0
    assert np.count_nonzero(inc.A[0]) == 1


def test_incidence_row_sums_and_open_rows(net1):
    topo = TopologyState.make(net1, [True, False, True])
    inc = build_incidence(net1, topo)
    full = inc.A_tilde
    for row in range(net1.L):
        if inc.active[row]:
            assert sorted(full[row][full[row] != 0]) == [-1.0, 1.0]
        else:
            assert not full[row].any() and inc.B[row].sum() == 0 and inc.b[row] == 0
    np.testing.assert_array_equal(inc.B, inc.A)
    np.testing.assert_array_equal(inc.b, inc.a)


def test_incidence_compressor_row():
    net = compressor_net()
    inc = build_incidence(net, TopologyState.make(net))
    # pipeline 1 -> 2 with alpha 2: +2 at node 1, -1 at node 2
    np.testing.assert_array_equal(inc.B[1], [2.0, -1.0])
    np.testing.assert_array_equal(inc.A[1], [1.0, -1.0])
    alpha = net.alpha[:, None]
    expected = alpha * np.maximum(inc.A_tilde, 0) - np.maximum(-inc.A_tilde, 0)
    np.testing.assert_array_equal(np.column_stack([inc.b, inc.B]), expected)


def test_orientation_flip_negates_row(net1):
    base = build_incidence(net1, TopologyState.make(net1))
    orient = [1] * net1.L
    orient[4] = -1
    flipped = build_incidence(net1, TopologyState.make(net1, None, orient))
    np.testing.assert_array_equal(flipped.A[4], -base.A[4])
    np.testing.assert_array_equal(flipped.A[3], base.A[3])


def test_topology_dimension_mismatch(net1, net2):
    with pytest.raises(NetworkError):
        build_incidence(net2, TopologyState.make(net1))
    with pytest.raises(NetworkError):
        TopologyState.make(net1, [True, True])


def test_weymouth_residual_simple_cases():
    net = two_node()
    inc = build_incidence(net, TopologyState.make(net))
    # equal pressures, no flow
    s = SteadyState(p=np.array([60.0]), phi=np.array([0.0]), q=np.array([0.0]))
    assert weymouth_residual(s, inc, net.c, net.p0)[0] == 0.0
    # 12 * 2 * |2| = 48 = p0^2 - p1^2
    s = SteadyState(p=np.array([np.sqrt(3600.0 - 48.0)]), phi=np.array([2.0]), q=np.array([-2.0]))
    assert abs(weymouth_residual(s, inc, net.c, net.p0)[0]) < 1e-9


def test_mass_residual_terminal_node():
    net = two_node()
    inc = build_incidence(net, TopologyState.make(net))
    assert mass_residual(inc, [10.0], [-10.0])[0] == 0.0
    assert not mass_residual(inc, [0.0], [0.0]).any()


def test_two_node_analytic_solution():
    net = two_node()
    s = solve_steady_state(net, TopologyState.make(net))
    assert s.phi[0] == pytest.approx(10.0, abs=1e-10)
    assert s.p[0] == pytest.approx(np.sqrt(2400.0), abs=1e-10)


def test_network1_reference_flow_all_cases(net1):
    for pattern in iter_closed_patterns(net1.L_C):
        s = solve_steady_state(net1, TopologyState.make(net1, pattern))
        assert s.phi[0] == pytest.approx(223.0, abs=1e-8)


def test_network1_flow_pattern_all_closed(net1):
    # reference solve of the benchmark: main branch flows in the declared direction
    s = solve_steady_state(net1, TopologyState.make(net1, [False, False, False]))
    np.testing.assert_allclose(s.phi[[0, 1, 2, 3, 4]], [223, 100, 75, 50, 25], atol=1e-8)
    np.testing.assert_allclose(s.phi[[5, 6]], [98, 73], atol=1e-8)


@pytest.mark.parametrize("name", ["network1", "network2", "ring5", "tree6"])
def test_steady_state_residuals_all_patterns(name):
    net = load_network(name)
    solved = 0
    for pattern in iter_closed_patterns(net.L_C):
        topo = TopologyState.make(net, pattern)
        try:
            s = solve_steady_state(net, topo)
        except (NetworkError, SolverError):
            continue
        solved += 1
        inc = build_incidence(net, topo)
        assert np.max(np.abs(weymouth_residual(s, inc, net.c, net.p0))) <= 1e-8
        assert np.max(np.abs(mass_residual(inc, s.phi, s.q))) <= 1e-8
        assert np.all(s.p > 0)
        assert not s.phi[~inc.active].any()
    assert solved >= 2


def test_case1_h1_state_independent_check(case1):
    # direct substitution in the physical frame of the H1 topology
    net, topo, s = case1["net"], case1["h1"], case1["s1"]
    inc = build_incidence(net, topo)
    frame = SteadyState(p=s.p, phi=inc.to_frame(s.phi), q=s.q)
    assert np.max(np.abs(weymouth_residual(frame, inc, net.c, net.p0))) < 1e-8
    assert np.max(np.abs(mass_residual(inc, inc.to_frame(s.phi), s.q))) < 1e-8
    assert np.all(inc.to_frame(s.phi)[inc.active] >= -1e-9)


def test_solver_fixed_point(net1):
    topo = TopologyState.make(net1, [True, False, True])
    s = solve_steady_state(net1, topo)
    again = solve_steady_state(net1, topo)
    np.testing.assert_allclose(again.omega, s.omega, rtol=0, atol=1e-9)


def test_disconnected_and_imbalanced_raise():
    d = two_node().to_dict()
    d["nodes"].append({"id": 2, "injection": 0.0})
    d["pipelines"].append({"id": "C1", "from": 1, "to": 2, "c": 1.0, "alpha": 1.0,
                           "changeable": True})
    net = GasNetwork.from_dict(d)
    with pytest.raises(NetworkError):
        solve_steady_state(net, TopologyState.make(net, [False]))
    d2 = two_node().to_dict()
    d2["nodes"][0]["injection"] = 5.0
    with pytest.raises(NetworkError):
        solve_steady_state(GasNetwork.from_dict(d2), TopologyState.make(GasNetwork.from_dict(d2)))


def test_infeasible_pressure_raises():
    net = two_node(p0=10.0)     # 12*10*10 = 1200 > 100
    with pytest.raises(SolverError):
        solve_steady_state(net, TopologyState.make(net))


def test_physical_topology_orientation(net1):
    topo = physical_topology(net1, [True, True, True])
    s = solve_steady_state(net1, topo)
    inc = build_incidence(net1, topo)
    assert np.all(inc.to_frame(s.phi)[inc.active] >= -1e-9)
    assert topo.label(net1) == "CCC|rev:L7"


@given(st.floats(min_value=0.1, max_value=50.0), st.floats(min_value=1.0, max_value=100.0),
       st.floats(min_value=-30.0, max_value=30.0))
def test_weymouth_antisymmetry(c, p, phi):
    net = GasNetwork.from_dict({
        "name": "x", "reference_node": 0, "p0": 200.0,
        "nodes": [{"id": 0, "injection": 0.0}, {"id": 1, "injection": 0.0},
                  {"id": 2, "injection": 0.0}],
        "pipelines": [
            {"id": "L1", "from": 0, "to": 1, "c": 1.0, "alpha": 1.0, "changeable": False},
            {"id": "L2", "from": 1, "to": 2, "c": c, "alpha": 1.0, "changeable": False},
        ],
    })
    s = SteadyState(p=np.array([p, 0.7 * p]), phi=np.array([0.0, phi]), q=np.zeros(2))
    fwd = build_incidence(net, TopologyState.make(net))
    rev = build_incidence(net, TopologyState.make(net, None, [1, -1]))
    s_rev = SteadyState(p=s.p, phi=np.array([0.0, -phi]), q=s.q)
    r1 = weymouth_residual(s, fwd, net.c, net.p0)[1]
    r2 = weymouth_residual(s_rev, rev, net.c, net.p0)[1]
    assert abs(abs(r1) - abs(r2)) <= 1e-9 * max(1.0, abs(r1))
    m1 = mass_residual(fwd, s.phi, s.q)
    m2 = mass_residual(rev, s_rev.phi, s.q)
    np.testing.assert_allclose(np.abs(m1), np.abs(m2), atol=1e-12)


@given(st.integers(min_value=0, max_value=7))
def test_opening_removes_constraint_and_zeroes_flow(code):
    net = load_network("network1")
    pattern = [bool((code >> k) & 1) for k in range(3)]
    topo = TopologyState.make(net, pattern)
    inc = build_incidence(net, topo)
    assert inc.active.sum() == net.L_F + sum(pattern)
    s = solve_steady_state(net, topo)
    assert not s.phi[~inc.active].any()
    assert sum(net.injections) == pytest.approx(0.0, abs=1e-9)
