"""Per-period convex piecewise-linear cost surfaces and the compensation cost.

The true period cost z_t(w_t) is the least expected-scenario cost of period t
over the full-horizon robust program, with w_t pinned and the other periods'
schedules free inside the envelope.  It is convex in w_t, so it is sampled at
polygon vertices, the centroid and refined edge points, and replaced by the
lower convex hull of the lifted samples: a convex interpolant, i.e. a max of
affine pieces, that equals z_t at the samples and overestimates it between.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .conic import Solution, Status, solve, TOL_FEAS, TOL_GAP
from .core import (Grid, ScheduleParams, build_robust_program,
                   expected_cost_terms, _merge)
from .geometry import Polytope2D
from .network import NetworkModel
from .region import RegionEnvelope
from .scenarios import ScenarioSet

log = logging.getLogger(__name__)

REFINEMENT = 1
TOL_ATTAIN_REL = 1e-5


class CostError(RuntimeError):
    pass


class ConvexityError(CostError):
    """A surface piece lies below the true cost by more than tolerance."""


def tol_attain(z: float) -> float:
    return TOL_ATTAIN_REL * max(1.0, abs(z))


@dataclass
class CostSample:
    w: np.ndarray
    z: float
    attained: bool


class EnvelopeCostProgram:
    """Full-horizon robust program whose schedules are tied to the envelope weights."""

    def __init__(self, model: NetworkModel, params: ScheduleParams, scenarios: ScenarioSet | None,
                 envelope: RegionEnvelope, grid: Grid | None = None):
        self.grid = grid or Grid(model)
        self.envelope = envelope
        rp = build_robust_program(model, params, scenarios, objective="zero", grid=self.grid)
        self.rp = rp
        prog = rp.prog
        A, b, offs = envelope.coupling_rows()
        self.mu = prog.add_vars([f"mu_env[{k}]" for k in range(A.shape[1])], 0.0, np.inf)
        for r, rhs in zip(A, b):
            nz = np.nonzero(r)[0]
            prog.add_eq({int(self.mu[k]): float(r[k]) for k in nz}, float(rhs), name="envelope")
        sb = self.grid.s_base
        for t, p in enumerate(envelope.periods):
            ip, iq = rp.w_index(t)
            W = p.W / sb
            for c, iw in enumerate((ip, iq)):
                row = {iw: 1.0}
                for j in range(len(W)):
                    row[int(self.mu[offs[t] + j])] = -float(W[j, c])
                prog.add_eq(row, 0.0, name=f"w_from_vertices[{t + 1}]")
        cap = self.grid.period_cost_cap()
        for t in range(self.grid.T):
            terms = expected_cost_terms(prog, self.grid, rp.blocks[t][0])
            rp.cost_terms[t] = terms
            # constant upper bound on the period cost; never binding at a minimum
            lin = {k: v for k, v in terms.items() if k != "const"}
            prog.add_le(lin, cap - terms.get("const", 0.0), name=f"cost_cap[{t + 1}]")

    def period_cost(self, t: int, w_mw, tol_feas=TOL_FEAS, tol_gap=TOL_GAP) -> CostSample:
        rp = self.rp
        for tau in range(self.grid.T):
            rp.free_w(tau)
        rp.pin_w(t, w_mw)
        terms = dict(rp.cost_terms[t])
        const = terms.pop("const", 0.0)
        rp.prog.set_objective(terms, const)
        sol = solve(rp.prog, tol_feas=tol_feas, tol_gap=tol_gap)
        rp.free_w(t)
        if sol.status is Status.OPTIMAL:
            return CostSample(np.asarray(w_mw, dtype=float), float(sol.objective), True)
        log.info("cost sample at period %d w=%s rejected: %s", t + 1, np.round(w_mw, 6).tolist(),
                 sol.status.name)
        return CostSample(np.asarray(w_mw, dtype=float), np.nan, False)


class TrueCostProgram:
    """Robust program with every schedule pinned: the true total cost z(w)."""

    def __init__(self, model: NetworkModel, params: ScheduleParams, scenarios: ScenarioSet | None,
                 grid: Grid | None = None):
        self.rp = build_robust_program(model, params, scenarios, objective="expected_cost",
                                       grid=grid)

    def __call__(self, w_mw, tol_feas=TOL_FEAS, tol_gap=TOL_GAP) -> Solution:
        self.rp.pin_all(w_mw)
        return solve(self.rp.prog, tol_feas=tol_feas, tol_gap=tol_gap)


def cost_at_point(prog: EnvelopeCostProgram, t: int, w_mw) -> CostSample:
    return prog.period_cost(t, w_mw)


@dataclass
class CostSurface:
    """Convex piecewise-linear overestimate of z_t on the period-t polygon (MW, $)."""

    t: int
    domain: Polytope2D
    samples: np.ndarray        # (S, 2) MW
    z: np.ndarray              # (S,) $
    triangles: np.ndarray      # (K, 3) sample indices
    pieces: np.ndarray         # (K, 3) rows (c_P, c_Q, c_0): z = c_P P + c_Q Q + c_0
    rejected: int = 0

    def value(self, w) -> float:
        w = np.asarray(w, dtype=float)
        return float(np.max(self.pieces[:, :2] @ w + self.pieces[:, 2]))

    def distinct_pieces(self, tol: float = 1e-9) -> np.ndarray:
        out: list[np.ndarray] = []
        for p in self.pieces:
            scale = max(1.0, float(np.max(np.abs(p))))
            if all(np.max(np.abs(p - q)) > tol * scale for q in out):
                out.append(p)
        return np.array(out).reshape(-1, 3)

    def to_dict(self) -> dict:
        return {"t": self.t, "samples": self.samples.tolist(), "z": self.z.tolist(),
                "triangles": self.triangles.tolist(), "pieces": self.pieces.tolist(),
                "rejected": self.rejected,
                "domain": {"vertices": self.domain.vertices.tolist(),
                           "halfspaces": self.domain.halfspaces.tolist(),
                           "area": self.domain.area, "degenerate": self.domain.degenerate}}

    @classmethod
    def from_dict(cls, d: dict) -> "CostSurface":
        dom = d["domain"]
        return cls(int(d["t"]), Polytope2D(np.array(dom["vertices"]), np.array(dom["halfspaces"]),
                                           float(dom["area"]), bool(dom["degenerate"])),
                   np.array(d["samples"], dtype=float).reshape(-1, 2), np.array(d["z"], dtype=float),
                   np.array(d["triangles"], dtype=int).reshape(-1, 3),
                   np.array(d["pieces"], dtype=float).reshape(-1, 3), int(d.get("rejected", 0)))


def sample_points(domain: Polytope2D, refinement: int = REFINEMENT) -> np.ndarray:
    """Polygon vertices, refined boundary points and the centroid, sorted by (P, Q)."""
    ring = [np.asarray(v, dtype=float) for v in domain.vertices]
    if len(ring) > 1:
        for _ in range(max(0, refinement)):
            new = []
            closed = ring if len(ring) > 2 else ring[:1] + ring[1:]
            for k, a in enumerate(closed):
                new.append(a)
                if len(closed) == 2 and k == 1:
                    break
                b = closed[(k + 1) % len(closed)]
                new.append((a + b) / 2.0)
            ring = new
    pts = ring + [domain.centroid()]
    pts = np.unique(np.round(np.array(pts), 12), axis=0)
    return pts[np.lexsort((pts[:, 1], pts[:, 0]))]


def _lower_hull_pieces(pts: np.ndarray, z: np.ndarray):
    """Triangles and affine pieces of the lower convex hull of (P, Q, z)."""
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    u = (pts - lo) / span
    zs = max(1.0, float(np.ptp(z)))
    # a tiny paraboloid makes flat regions split as Delaunay triangles
    lifted = np.column_stack([u, (z - z.min()) / zs + 1e-7 * np.sum((u - 0.5) ** 2, axis=1)])
    tris, pieces = [], []
    try:
        hull = ConvexHull(lifted, qhull_options="Qt")
    except QhullError:
        return None
    for simplex, eq in zip(hull.simplices, hull.equations):
        if eq[2] >= -1e-9:
            continue  # upper or (near-)vertical facet
        # slivers from collinear boundary points, judged in normalized coordinates
        if abs(np.linalg.det(np.column_stack([u[simplex], np.ones(3)]))) < 1e-9:
            continue
        M = np.column_stack([pts[simplex], np.ones(3)])
        coef = np.linalg.solve(M, z[simplex])
        tris.append(sorted(simplex.tolist()))
        pieces.append(coef)
    if not tris:
        return None
    order = np.lexsort(np.array(tris).T[::-1])
    return np.array(tris)[order], np.array(pieces)[order]


def _segment_pieces(pts: np.ndarray, z: np.ndarray):
    """1-D lower hull along a degenerate (segment) domain."""
    if len(pts) == 1 or np.allclose(pts, pts[0]):
        return np.zeros((0, 3), dtype=int), np.array([[0.0, 0.0, float(np.min(z))]])
    e = pts[-1] - pts[0]
    e = e / np.linalg.norm(e)
    s = (pts - pts[0]) @ e
    order = np.argsort(s)
    chain: list[int] = []
    for k in order:
        while len(chain) >= 2:
            i, j = chain[-2], chain[-1]
            if (z[j] - z[i]) * (s[k] - s[i]) >= (z[k] - z[i]) * (s[j] - s[i]):
                chain.pop()
            else:
                break
        chain.append(int(k))
    pieces = []
    for i, j in zip(chain[:-1], chain[1:]):
        slope = (z[j] - z[i]) / (s[j] - s[i])
        c = slope * e
        pieces.append([c[0], c[1], z[i] - c @ pts[i]])
    return np.zeros((0, 3), dtype=int), np.array(pieces)


def build_surface(t: int, envelope: RegionEnvelope, prog: EnvelopeCostProgram,
                  refinement: int = REFINEMENT) -> CostSurface:
    domain = envelope.polygon(t)
    pts = sample_points(domain, refinement)
    samples = [cost_at_point(prog, t, w) for w in pts]
    keep = [s for s in samples if s.attained]
    rejected = len(samples) - len(keep)
    if rejected:
        log.warning("period %d: %d of %d cost samples rejected", t + 1, rejected, len(samples))
    if not keep:
        raise CostError(f"period {t + 1}: every cost sample is infeasible")
    P = np.array([s.w for s in keep])
    z = np.array([s.z for s in keep])
    res = None if domain.degenerate else _lower_hull_pieces(P, z)
    if res is None:
        if domain.degenerate:
            tris, pieces = _segment_pieces(P, z)
        else:
            # coplanar or too few points: one least-squares plane, lifted to cover every sample
            M = np.column_stack([P, np.ones(len(P))])
            coef = np.linalg.lstsq(M, z, rcond=None)[0]
            coef[2] += float(np.max(z - M @ coef))
            tris, pieces = np.zeros((0, 3), dtype=int), coef[None]
    else:
        tris, pieces = res
    return CostSurface(t, domain, P, z, tris, pieces, rejected)


@dataclass
class AttainmentReport:
    t: int
    centroids: np.ndarray
    surface: np.ndarray
    true: np.ndarray
    gap: np.ndarray
    attained: np.ndarray


def attainment_check(surface: CostSurface, prog: EnvelopeCostProgram) -> AttainmentReport:
    """Compare the surface with the true cost at each triangle centroid."""
    cents, sv, tv, gaps, att = [], [], [], [], []
    for tri in surface.triangles:
        c = surface.samples[tri].mean(axis=0)
        s = cost_at_point(prog, surface.t, c)
        if not s.attained:
            continue
        zhat = surface.value(c)
        gap = zhat - s.z
        tol = tol_attain(s.z)
        if gap < -tol:
            raise ConvexityError(
                f"period {surface.t + 1}: surface {zhat:.9g} below true cost {s.z:.9g} at {c.tolist()}")
        cents.append(c)
        sv.append(zhat)
        tv.append(s.z)
        gaps.append(gap)
        att.append(abs(gap) <= tol)
    return AttainmentReport(surface.t, np.array(cents).reshape(-1, 2), np.array(sv), np.array(tv),
                            np.array(gaps), np.array(att, dtype=bool))


def linearize_generator_costs(model: NetworkModel) -> list[tuple[float, float]]:
    """Chord of each generator's cost over its physical range, (slope $/MWh, intercept $/h)."""
    out = []
    for g in model.generators:
        lo, hi = g.p_phys_min, g.p_phys_max
        if hi == lo:
            out.append((0.0, g.cost(lo)))
            continue
        slope = (g.cost(hi) - g.cost(lo)) / (hi - lo)
        out.append((slope, g.cost(lo) - slope * lo))
    return out


@dataclass
class BidFunction:
    surfaces: list[CostSurface]
    epsilon: float
    region_path: str = ""
    info: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"epsilon": self.epsilon, "region": self.region_path, "info": self.info,
                "surfaces": [s.to_dict() for s in self.surfaces]}

    @classmethod
    def from_dict(cls, d: dict) -> "BidFunction":
        return cls([CostSurface.from_dict(s) for s in d["surfaces"]], float(d["epsilon"]),
                   str(d.get("region", "")), dict(d.get("info", {})))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def load(cls, path) -> "BidFunction":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def compensation_epsilon(envelope: RegionEnvelope, surfaces: list[CostSurface],
                         model: NetworkModel, params: ScheduleParams,
                         scenarios: ScenarioSet | None, prog: EnvelopeCostProgram | None = None
                         ) -> float:
    """max over the envelope of [sum_t chord cost of the expected dispatch - sum_t zhat_t(w_t)].

    Adds rows to ``prog``; pass a fresh program (or none) for each call.
    """
    prog = prog or EnvelopeCostProgram(model, params, scenarios, envelope)
    rp, grid = prog.rp, prog.grid
    cp = rp.prog
    for t in range(grid.T):
        rp.free_w(t)
    lines = [(a * grid.s_base, b) for a, b in linearize_generator_costs(model)]
    obj: dict = {}
    for t in range(grid.T):
        ref = rp.blocks[t][0]
        # chord cost of the expected dispatch, to be maximized
        fnew = expected_cost_terms(cp, grid, ref, linear_lines=lines) if grid.G or grid.N else {}
        _merge(obj, fnew, -1.0)
        # h_t >= every piece, so minimizing h_t gives exactly zhat_t(w_t)
        h = cp.add_var(f"zhat_epi[{t + 1}]")
        ip, iq = rp.w_index(t)
        sb = grid.s_base
        for k, (a, b, c0) in enumerate(surfaces[t].distinct_pieces()):
            cp.add_le({ip: a * sb, iq: b * sb, h: -1.0}, -c0, name=f"zhat_piece{k}[{t + 1}]")
        obj[h] = obj.get(h, 0.0) + 1.0
    const = obj.pop("const", 0.0)
    cp.set_objective(obj, const)
    sol = solve(cp)
    if sol.status is Status.UNBOUNDED:
        raise CostError("compensation program is unbounded; the envelope must bound w")
    if not sol.optimal:
        raise CostError(f"compensation program: {sol.status.name}")
    return float(-sol.objective)


def evaluate_bid(bid: BidFunction, w, tol: float = 1e-6) -> float:
    w = np.asarray(w, dtype=float).reshape(len(bid.surfaces), 2)
    total = bid.epsilon
    for s, wt in zip(bid.surfaces, w):
        scale = max(1.0, float(np.max(np.abs(s.domain.vertices))))
        if not s.domain.contains(wt, tol * scale):
            raise CostError(f"w at period {s.t + 1} = {wt.tolist()} is outside the bid domain")
        total += s.value(wt)
    return float(total)


def build_bid(model: NetworkModel, params: ScheduleParams, scenarios: ScenarioSet | None,
              envelope: RegionEnvelope, refinement: int = REFINEMENT) -> BidFunction:
    grid = Grid(model)
    prog = EnvelopeCostProgram(model, params, scenarios, envelope, grid)
    surfaces = [build_surface(t, envelope, prog, refinement) for t in range(model.horizon)]
    eps_prog = EnvelopeCostProgram(model, params, scenarios, envelope, grid)
    eps = compensation_epsilon(envelope, surfaces, model, params, scenarios, eps_prog)
    return BidFunction(surfaces, eps)
