from __future__ import annotations

import json
import math

import pytest
from hypothesis import given, settings, strategies as st

from helpers import model, two_bus
from vppregion.network import (NetworkError, NetworkParseError, RadialityError, load_fixture,
                               load_network, network_from_dict, network_to_dict, save_network)


def test_minimal_two_bus():
    m = model(two_bus())
    assert len(m.branches) == 1
    assert m.topology.parent[2] == 1
    assert m.topology.depth == {1: 0, 2: 1}


def test_cycle_rejected():
    d = two_bus()
    d["buses"].append({"id": 3, "v_sq_min": 0.9, "v_sq_max": 1.1})
    for a, b in [(2, 3), (3, 1)]:
        d["branches"].append({"from": a, "to": b, "r": 0.0, "x": 0.0, "p_min": -1, "p_max": 1})
    with pytest.raises(RadialityError, match="not radial"):
        model(d)


def test_disconnected_bus_named():
    d = two_bus()
    d["buses"].append({"id": 9, "v_sq_min": 0.9, "v_sq_max": 1.1})
    with pytest.raises(RadialityError, match="bus 9"):
        model(d)


def test_star_depths():
    d = two_bus()
    for k in (3, 4):
        d["buses"].append({"id": k, "v_sq_min": 0.9, "v_sq_max": 1.1})
        d["branches"].append({"from": 1, "to": k, "r": 0.0, "x": 0.0, "p_min": -1, "p_max": 1})
    m = model(d)
    assert all(m.topology.depth[k] == 1 for k in (2, 3, 4))
    assert m.topology.order == (1, 2, 3, 4)


def test_three_bus_fixture_devices():
    m = load_fixture("three_bus")
    assert (len(m.generators), len(m.storages), len(m.ders)) == (1, 1, 2)
    assert m.generators[0].bus == 1 and m.storages[0].bus == 2
    assert sorted(d.bus for d in m.ders) == [2, 3]
    assert m.horizon == 2


def test_feeder_fixture_shape():
    m = load_fixture("feeder_5der")
    assert len(m.buses) == 16 and len(m.ders) == 5 and m.horizon == 1
    assert sorted(d.id for d in m.ders) == [8, 41, 44, 45, 106]


@pytest.mark.parametrize("mutate, message", [
    (lambda d: d["buses"][1].update(v_sq_min=2.0), "v_sq_min"),
    (lambda d: d["branches"][0].update(r=-1.0), "r and x"),
    (lambda d: d["ders"][0].update(lo=[9.0]), "lo <= forecast"),
    (lambda d: d["ders"][0].update(beta=2.0), "beta"),
    (lambda d: d.update(horizon=0), "horizon"),
])
def test_invariants(mutate, message):
    d = two_bus()
    mutate(d)
    with pytest.raises(NetworkError, match=message):
        network_from_dict(d)


def test_nonconvex_cost_rejected():
    from helpers import gen
    d = two_bus(gen=gen(pieces=[[0, 0], [5, 100], [10, 120]]))
    with pytest.raises(NetworkError, match="not convex"):
        model(d)


def test_malformed_file(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(NetworkParseError):
        load_network(p)
    p.write_text(json.dumps({"buses": []}))
    with pytest.raises(NetworkParseError):
        load_network(p)


def test_incidence_matches_buses():
    m = load_fixture("three_bus")
    inc = m.incidence()
    order = m.topology.order
    assert order[inc["gen"][:, 0].argmax()] == 1
    assert order[inc["storage"][:, 0].argmax()] == 2
    assert inc["pcc"][order.index(m.pcc_bus)] == 1


decimals = st.decimals(min_value=-50, max_value=50, places=3).map(float)


@settings(max_examples=40, deadline=None)
@given(load=st.decimals(min_value=0, max_value=20, places=3).map(float),
       r=st.decimals(min_value=0, max_value=1, places=4).map(float),
       beta=st.floats(min_value=-1.5, max_value=1.5))
def test_round_trip(tmp_path_factory, load, r, beta):
    m = model(two_bus(load=load, r=r, x=r / 2, beta=beta))
    p = tmp_path_factory.mktemp("rt") / "net.json"
    save_network(m, p)
    back = load_network(p)
    assert network_to_dict(back) == network_to_dict(m)
    assert back == m


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=2, max_value=9), st.data())
def test_radial_iff_tree(n, data):
    """Accepted exactly when |branches| = |buses| - 1 and connected."""
    edges = data.draw(st.lists(st.tuples(st.integers(1, n), st.integers(1, n))
                               .filter(lambda e: e[0] != e[1]), max_size=n + 1, unique=True))
    d = two_bus()
    d["buses"] = [{"id": k, "v_sq_min": 0.9, "v_sq_max": 1.1} for k in range(1, n + 1)]
    d["branches"] = [{"from": a, "to": b, "r": 0, "x": 0, "p_min": -1, "p_max": 1} for a, b in edges]
    d["ders"] = []
    # union-find oracle for connectivity
    rep = list(range(n + 1))

    def find(i):
        while rep[i] != i:
            i = rep[i]
        return i
    for a, b in edges:
        rep[find(a)] = find(b)
    connected = len({find(i) for i in range(1, n + 1)}) == 1
    is_tree = connected and len(edges) == n - 1
    if is_tree:
        assert len(model(d).topology.order) == n
    else:
        with pytest.raises(RadialityError):
            model(d)


def test_beta_tangent_used_for_reactive_demand():
    from vppregion.core import Grid
    m = model(two_bus(load=3.0, beta=math.atan(0.5)))
    p, q = Grid(m).demand([3.0])
    assert q[1] == pytest.approx(0.5 * p[1])
