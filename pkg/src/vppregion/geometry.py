"""Planar convex hulls with halfspace form, the only geometry the region search needs."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

TOL_VERTEX = 1e-6


@dataclass(frozen=True)
class Polytope2D:
    """Convex polygon: CCW vertices and rows (a_P, a_Q, b) meaning a_P*P + a_Q*Q <= b.

    Halfspace normals have unit length.  ``degenerate`` marks segments and
    points (area 0); their halfspaces still describe the set exactly.
    """

    vertices: np.ndarray
    halfspaces: np.ndarray
    area: float
    degenerate: bool = False

    def __post_init__(self):
        for name in ("vertices", "halfspaces"):
            arr = np.array(getattr(self, name), dtype=float).reshape(-1, 2 if name == "vertices" else 3)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def centroid(self) -> np.ndarray:
        v = self.vertices
        if self.degenerate or len(v) < 3:
            return v.mean(axis=0)
        x, y = v[:, 0], v[:, 1]
        xn, yn = np.roll(x, -1), np.roll(y, -1)
        cross = x * yn - xn * y
        a = cross.sum() / 2.0
        return np.array([((x + xn) * cross).sum(), ((y + yn) * cross).sum()]) / (6.0 * a)

    def contains(self, w, tol: float = 1e-9) -> bool:
        w = np.asarray(w, dtype=float)
        h = self.halfspaces
        return bool(np.all(h[:, :2] @ w - h[:, 2] <= tol))

    def distance(self, w) -> float:
        """Euclidean distance from ``w`` to the polygon (0 inside)."""
        w = np.asarray(w, dtype=float)
        if self.contains(w, 0.0):
            return 0.0
        v = self.vertices
        if len(v) == 1:
            return float(np.linalg.norm(w - v[0]))
        best = np.inf
        for a, b in zip(v, np.roll(v, -1, axis=0)):
            d = b - a
            den = float(d @ d)
            s = 0.0 if den == 0 else float(np.clip((w - a) @ d / den, 0.0, 1.0))
            best = min(best, float(np.linalg.norm(w - (a + s * d))))
        return best

    def scaled(self, factor: float) -> "Polytope2D":
        h = self.halfspaces.copy()
        h[:, 2] *= factor
        return Polytope2D(self.vertices * factor, h, self.area * factor ** 2, self.degenerate)


def hausdorff(a: Polytope2D, b: Polytope2D) -> float:
    """Hausdorff distance between two convex polygons (attained at vertices)."""
    d_ab = max(b.distance(v) for v in a.vertices)
    d_ba = max(a.distance(v) for v in b.vertices)
    return max(d_ab, d_ba)


def _cross(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def _dedup(pts: np.ndarray, tol: float) -> np.ndarray:
    keep: list[np.ndarray] = []
    for p in pts:
        if all(np.max(np.abs(p - q)) > tol for q in keep):
            keep.append(p)
    return np.array(keep)


def _chain(pts):
    out: list[np.ndarray] = []
    for p in pts:
        while len(out) >= 2 and _cross(out[-2], out[-1], p) <= 0:
            out.pop()
        out.append(p)
    return out


def _prune(hull: list, tol: float) -> list:
    """Drop vertices within ``tol`` of the segment joining their neighbours."""
    changed = True
    while changed and len(hull) > 2:
        changed = False
        for k in range(len(hull)):
            o, a, b = hull[k - 1], hull[k], hull[(k + 1) % len(hull)]
            base = np.linalg.norm(b - o)
            if base == 0 or _cross(o, a, b) / base <= tol:
                del hull[k]
                changed = True
                break
    return hull


def convex_hull_2d(points, tol: float = TOL_VERTEX) -> Polytope2D:
    """CCW hull (Andrew's monotone chain) with duplicate/collinear pruning at ``tol``."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(pts) == 0:
        raise ValueError("convex_hull_2d needs at least one point")
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    pts = _dedup(pts[order], tol)
    if len(pts) == 1:
        return _point(pts[0])
    lower = _chain(pts)
    upper = _chain(pts[::-1])
    hull = np.array(_prune(lower[:-1] + upper[:-1], tol)).reshape(-1, 2)
    if len(hull) < 3:
        # collinear set: the two farthest points
        d = pts - pts[0]
        direction = pts[-1] - pts[0]
        s = d @ direction
        return _segment(pts[int(np.argmin(s))], pts[int(np.argmax(s))])
    x, y = hull[:, 0], hull[:, 1]
    area = 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))
    rows = []
    for a, b in zip(hull, np.roll(hull, -1, axis=0)):
        e = b - a
        nrm = np.array([e[1], -e[0]]) / np.linalg.norm(e)
        rows.append([nrm[0], nrm[1], float(nrm @ a)])
    return Polytope2D(hull, np.array(rows), area, False)


def _point(p) -> Polytope2D:
    rows = [[1, 0, p[0]], [-1, 0, -p[0]], [0, 1, p[1]], [0, -1, -p[1]]]
    return Polytope2D(np.array([p]), np.array(rows, dtype=float), 0.0, True)


def _segment(a, b) -> Polytope2D:
    e = (b - a) / np.linalg.norm(b - a)
    nrm = np.array([e[1], -e[0]])
    rows = [[*nrm, nrm @ a], [*-nrm, -nrm @ a], [*e, e @ b], [*-e, -e @ a]]
    return Polytope2D(np.array([a, b]), np.array(rows, dtype=float), 0.0, True)
