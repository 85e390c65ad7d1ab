from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial import ConvexHull

from helpers import brute_force_hull_vertices
from vppregion.geometry import Polytope2D, convex_hull_2d, hausdorff


def _same_vertex_set(a, b, tol=1e-9):
    if len(a) != len(b):
        return False
    return all(np.min(np.max(np.abs(b - v), axis=1)) <= tol for v in a)


def test_square_with_interior_point():
    h = convex_hull_2d([(0, 0), (1, 0), (1, 1), (0, 1), (0.5, 0.5)])
    assert h.n_vertices == 4 and h.area == pytest.approx(1.0)
    assert not h.degenerate


def test_two_points_segment():
    h = convex_hull_2d([(0, 0), (2, 1)])
    assert h.degenerate and h.area == 0 and h.n_vertices == 2
    assert h.contains([1.0, 0.5], 1e-9) and not h.contains([1.0, 0.6], 1e-9)


def test_coincident_points():
    h = convex_hull_2d([(1, 1), (1, 1 + 1e-9)])
    assert h.degenerate and h.n_vertices == 1


def test_collinear_pruned():
    h = convex_hull_2d([(0, 0), (1, 0), (2, 0), (2, 2), (0, 2), (1, 2 + 1e-8)])
    assert h.n_vertices == 4


def test_ccw_and_halfspaces():
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(50, 2))
    h = convex_hull_2d(pts)
    v = h.vertices
    e1, e2 = np.roll(v, -1, 0) - v, np.roll(v, -2, 0) - np.roll(v, -1, 0)
    cross = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    assert np.all(cross > 0)
    assert np.all(h.halfspaces[:, :2] @ v.T - h.halfspaces[:, 2:3] <= 1e-9)
    assert np.allclose(np.linalg.norm(h.halfspaces[:, :2], axis=1), 1.0)
    assert all(h.contains(p, 1e-9) for p in pts)


def test_disk_matches_brute_force():
    rng = np.random.default_rng(1)
    r = np.sqrt(rng.random(200))
    a = rng.random(200) * 2 * np.pi
    pts = np.column_stack([r * np.cos(a), r * np.sin(a)])
    assert _same_vertex_set(convex_hull_2d(pts).vertices, brute_force_hull_vertices(pts))


def test_oracle_handles_collinear_sides():
    pts = [(x, y) for x in range(4) for y in range(3)]
    v = brute_force_hull_vertices(pts)
    assert len(v) == 4
    assert _same_vertex_set(convex_hull_2d(pts).vertices, v)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(-20, 20), st.integers(-20, 20)), min_size=3, max_size=60))
def test_integer_points_match_scipy(pts):
    pts = np.array(pts, dtype=float)
    h = convex_hull_2d(pts)
    try:
        ref = ConvexHull(pts)
    except Exception:
        assert h.degenerate
        return
    assert h.area == pytest.approx(ref.volume, abs=1e-9)
    assert _same_vertex_set(h.vertices, brute_force_hull_vertices(pts))


def test_centroid_and_distance():
    h = convex_hull_2d([(0, 0), (2, 0), (2, 2), (0, 2)])
    assert np.allclose(h.centroid(), [1, 1])
    assert h.distance([1, 1]) == 0.0
    assert h.distance([3, 1]) == pytest.approx(1.0)
    assert h.distance([3, 3]) == pytest.approx(np.sqrt(2))


def test_hausdorff():
    a = convex_hull_2d([(0, 0), (1, 0), (1, 1), (0, 1)])
    b = convex_hull_2d([(0, 0), (1.5, 0), (1.5, 1), (0, 1)])
    assert hausdorff(a, b) == pytest.approx(0.5)
    assert hausdorff(a, a) == 0.0


def test_polytope_is_read_only():
    h = convex_hull_2d([(0, 0), (1, 0), (0, 1)])
    with pytest.raises(ValueError):
        h.vertices[0, 0] = 5.0
    s = h.scaled(2.0)
    assert s.area == pytest.approx(4 * h.area)
    assert isinstance(s, Polytope2D)
