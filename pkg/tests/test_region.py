from __future__ import annotations

import numpy as np
import pytest

from helpers import gen, model, storage, two_bus
from vppregion.core import Grid, ScheduleParams
from vppregion.geometry import convex_hull_2d, hausdorff
from vppregion.region import (PeriodProgram, RegionEnvelope, RegionError, build_envelope,
                              compute_region, expand_facets, explore_period, initial_bounds)
from vppregion.scenarios import UncertaintyBox, enumerate_vertices

# analytic PCC rectangle of the lossless toy: P = 3 - pg, Q = 1 - qg
TOY_RECT = convex_hull_2d([[-7.0, -3.0], [3.0, -3.0], [3.0, 5.0], [-7.0, 5.0]])


def _setup(d, uncertain=False):
    m = model(d)
    p = ScheduleParams.physical(m)
    sc = enumerate_vertices(UncertaintyBox.from_model(m)) if uncertain else None
    return m, p, sc


def test_symmetric_q_range():
    m, p, _ = _setup(two_bus(load=5.0, gen=gen(qmin=-4.0, qmax=4.0)))
    pts = [v.w for v in initial_bounds(PeriodProgram(m, p, None, 0))]
    qmin, qmax = pts[2][1], pts[3][1]
    assert qmin == pytest.approx(-qmax, abs=1e-5)
    assert qmax == pytest.approx(4.0, abs=1e-5)


def test_fixed_load_is_a_point_in_p():
    m, p, _ = _setup(two_bus(load=5.0))
    for v in initial_bounds(PeriodProgram(m, p, None, 0)):
        assert v.w[0] == pytest.approx(5.0, abs=1e-5)


def test_uncertainty_does_not_widen_p():
    det = _setup(two_bus(load=5.0, gen=gen()))
    unc = _setup(two_bus(load=5.0, gen=gen(), lo=[3.0], hi=[7.0], dp=1.0), uncertain=True)
    pmax_det = initial_bounds(PeriodProgram(det[0], det[1], None, 0))[1].w[0]
    pmax_unc = initial_bounds(PeriodProgram(*unc, 0))[1].w[0]
    assert pmax_unc <= pmax_det + 1e-6


def test_toy_rectangle(toy):
    poly = toy.envelope.polygon(0)
    assert hausdorff(poly, TOY_RECT) / toy.model.s_base <= 1e-4
    assert toy.envelope.periods[0].converged


def test_huge_tol_area_stops_after_one_expansion():
    m, p, _ = _setup(two_bus(load=3.0, gen=gen()))
    res = explore_period(m, p, None, 0, tol_area=1e9)
    assert res.iterations == 1
    assert res.converged


def test_supporting_facets_are_a_fixpoint(toy):
    m, p = toy.model, toy.params
    poly = toy.envelope.periods[0].polytope
    new, skipped = expand_facets(poly, PeriodProgram(m, p, None, 0))
    assert skipped == 0
    assert len(new) == len(poly.halfspaces)
    for row, v in zip(poly.halfspaces, new):
        assert row[:2] @ v.w == pytest.approx(row[2], abs=1e-4)


def test_expansion_grows_curved_region(three_bus):
    for p in three_bus.envelope.periods:
        assert p.areas[1] > p.areas[0]
        assert len(p.solutions) >= 8
        assert np.all(np.diff(p.areas) >= 0.0)


def test_area_sequence_nondecreasing_two_bus_lossy():
    m, p, _ = _setup(two_bus(load=3.0, r=0.05, x=0.1, gen=gen()))
    res = explore_period(m, p, None, 0, tol_area=1e-6)
    assert np.all(np.diff(res.areas) >= 0.0)
    assert res.areas[-1] > 0.0


def test_tol_area_must_be_positive():
    m, p, _ = _setup(two_bus(load=3.0, gen=gen()))
    with pytest.raises(ValueError):
        explore_period(m, p, None, 0, tol_area=0.0)


def test_later_period_needs_previous_solutions():
    m, p, _ = _setup(two_bus(load=3.0, gen=gen(), horizon=2))
    with pytest.raises(RegionError):
        explore_period(m, p, None, 1, prev=None)


def test_single_period_envelope_has_only_simplex(toy):
    A, b, offs = toy.envelope.coupling_rows()
    assert A.shape == (1, len(toy.envelope.periods[0].solutions))
    assert np.all(A == 1.0) and b.tolist() == [1.0]


def test_no_storage_envelope_is_product():
    m, p, _ = _setup(two_bus(load=3.0, gen=gen(), horizon=2))
    env = compute_region(m, p, None)
    A, _, _ = env.coupling_rows()
    assert A.shape[0] == 2
    for t in range(2):
        assert hausdorff(env.polygon(t), env.periods[t].polytope) <= 1e-6


def test_storage_coupling_count(three_bus):
    # one equality per storage and SOC kind (expected, shared extreme) linking period 1 to 2
    env = three_bus.envelope
    A, _, _ = env.coupling_rows()
    kinds = env.periods[0].solutions[0].soc.shape[0]
    assert kinds == 2
    assert A.shape[0] == env.horizon + kinds * env.n_storage


def test_storage_two_bus_coupling_count():
    m, p, _ = _setup(two_bus(load=3.0, gen=gen(), storage=storage(), horizon=2))
    env = compute_region(m, p, None)
    A, _, _ = env.coupling_rows()
    assert A.shape[0] == 2 + 1


def test_missing_snapshot_rejected(toy):
    res = toy.envelope.periods[0]
    bad = type(res)(res.t, res.polytope, [s for s in res.solutions], res.areas, res.iterations,
                    res.converged)
    bad.solutions[0] = type(bad.solutions[0])(0, bad.solutions[0].w, bad.solutions[0].y, None,
                                              None, np.zeros(0))
    with pytest.raises(RegionError):
        build_envelope([bad], toy.model)


def test_membership_stored_vertex_one_hot(toy):
    env = toy.envelope
    W = env.periods[0].W
    for s in env.periods[0].solutions:
        cert = env.membership(s.w[None])
        assert cert.feasible
    # at a corner the weight sits entirely on the solutions stored there
    for v in env.periods[0].polytope.vertices:
        cert = env.membership(v[None])
        at = np.max(np.abs(W - v), axis=1) <= 1e-6
        assert cert.mu[0][at].sum() == pytest.approx(1.0, abs=1e-6)


def test_membership_outside_is_infeasible(toy):
    assert not toy.envelope.membership(np.array([[4.0, 0.0]])).feasible
    assert not toy.envelope.membership(np.array([[0.0, 5.5]])).feasible


def test_membership_midpoint_of_edge(toy):
    env = toy.envelope
    W = env.periods[0].W
    verts = env.periods[0].polytope.vertices
    a, b = verts[0], verts[1]
    cert = env.membership(((a + b) / 2)[None])
    assert cert.feasible
    # weight only on stored points of the edge [a, b]; with just the two ends it is (1/2, 1/2)
    e = (b - a) / np.linalg.norm(b - a)
    off_edge = np.abs((W - a) @ np.array([-e[1], e[0]])) > 1e-6
    assert cert.mu[0][off_edge].sum() <= 1e-9
    ends = (np.max(np.abs(W - a), axis=1) <= 1e-6) | (np.max(np.abs(W - b), axis=1) <= 1e-6)
    if np.all(ends | off_edge):
        assert cert.mu[0][np.max(np.abs(W - a), axis=1) <= 1e-6].sum() == pytest.approx(0.5)
    np.testing.assert_allclose(cert.w[0], (a + b) / 2, atol=1e-6)


def test_membership_midpoint_two_vertices():
    m, p, _ = _setup(two_bus(load=3.0, gen=gen(qmin=0.0, qmax=0.0)))
    res = explore_period(m, p, None, 0)
    ends = [res.solutions[0], res.solutions[1]]     # P-min and P-max
    env = build_envelope([type(res)(0, res.polytope, ends, res.areas, res.iterations,
                                    res.converged)], m)
    W = env.periods[0].W
    cert = env.membership(W.mean(axis=0)[None])
    assert cert.feasible
    np.testing.assert_allclose(cert.mu[0], [0.5, 0.5], atol=1e-9)


def test_last_period_vertices_are_members(three_bus):
    env = three_bus.envelope
    T = env.horizon
    for j in range(len(env.periods[T - 1].solutions)):
        assert env.vertex_certificate(T - 1, j).feasible


def test_projection_vertices_are_members(three_bus):
    env = three_bus.envelope
    for t in range(env.horizon):
        for v in env.polygon(t).vertices:
            w = np.full((env.horizon, 2), np.nan)
            w[t] = v
            assert env.membership(w).feasible


def test_projection_inside_search_polygon(three_bus):
    env = three_bus.envelope
    for t in range(env.horizon):
        for v in env.polygon(t).vertices:
            assert env.periods[t].polytope.contains(v, 1e-6)


def test_envelope_round_trip(three_bus, tmp_path):
    env = three_bus.envelope
    path = tmp_path / "env.json"
    env.save(path)
    import json
    back = RegionEnvelope.from_dict(json.loads(path.read_text()))
    assert back.horizon == env.horizon
    assert back.total_area == pytest.approx(env.total_area)
    for a, b in zip(back.periods, env.periods):
        assert a.areas == b.areas
        assert np.array_equal(a.W, b.W)
        assert np.array_equal(a.owner, b.owner)
    A1, _, _ = back.coupling_rows()
    A2, _, _ = env.coupling_rows()
    assert np.array_equal(A1, A2)


def test_uncertainty_monotone_area():
    small = _setup(two_bus(load=5.0, gen=gen(), lo=[4.5], hi=[5.5], dp=2.0, dq=2.0), True)
    large = _setup(two_bus(load=5.0, gen=gen(), lo=[3.5], hi=[6.5], dp=2.0, dq=2.0), True)
    a_small = compute_region(*small).total_area
    a_large = compute_region(*large).total_area
    assert a_large <= a_small + 1e-3 * a_small


def test_grid_shared_between_periods(three_bus):
    g = Grid(three_bus.model)
    assert g.T == three_bus.envelope.horizon
