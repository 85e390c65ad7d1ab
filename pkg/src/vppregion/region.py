"""Per-period PCC power-transfer polygons by vertex search, and their time-coupled envelope.

For period t the search works on the robust program restricted to period t,
with the pre-period SOC written as a convex combination (weights mu) of the
SOC values stored at the previous period's vertex solutions.  Storage SOC is
tracked per "SOC kind": kind 0 is the expected block, kind 1 the common SOC of
the extreme blocks.

Units: ``VertexSolution.w`` and every Polytope2D are in MW/MVar; ``y``,
``soc`` and ``pre`` are per-unit like the programs they come from.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from .conic import Status, solve, TOL_FEAS, TOL_GAP
from .core import (Grid, RobustProgram, ScheduleParams, build_coupling, build_robust_program,
                   relaxation_gaps)
from .geometry import Polytope2D, TOL_VERTEX, convex_hull_2d
from .network import NetworkModel
from .scenarios import ScenarioSet

log = logging.getLogger(__name__)

TOL_AREA = 1e-3
MAX_ITER = 20
EPS_AREA = 1e-9


class RegionError(RuntimeError):
    pass


@dataclass
class VertexSolution:
    t: int
    w: np.ndarray            # (2,) MW / MVar
    y: np.ndarray            # (n_blocks, block_size) p.u.
    soc: np.ndarray          # (n_kinds, N) end-of-period SOC, p.u.*h
    pre: np.ndarray          # (n_kinds, N) SOC before the period
    mu_prev: np.ndarray      # weights over the previous period's solutions
    cone_gap: float = 0.0

    def to_dict(self) -> dict:
        return {"t": self.t, "w": self.w.tolist(), "y": self.y.tolist(), "soc": self.soc.tolist(),
                "pre": self.pre.tolist(), "mu_prev": self.mu_prev.tolist(),
                "cone_gap": self.cone_gap}

    @classmethod
    def from_dict(cls, d: dict) -> "VertexSolution":
        N = len(d["soc"][0]) if d["soc"] else 0
        return cls(int(d["t"]), np.array(d["w"], dtype=float), np.array(d["y"], dtype=float),
                   np.array(d["soc"], dtype=float).reshape(-1, N),
                   np.array(d["pre"], dtype=float).reshape(-1, N),
                   np.array(d["mu_prev"], dtype=float), float(d.get("cone_gap", 0.0)))


@dataclass
class PeriodResult:
    t: int
    polytope: Polytope2D
    solutions: list[VertexSolution]
    areas: list[float]
    iterations: int
    converged: bool
    skipped: int = 0
    owner: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    @property
    def W(self) -> np.ndarray:
        return np.array([s.w for s in self.solutions]).reshape(-1, 2)


class PeriodProgram:
    """Period-t robust program with w free and SOC coupled to period t-1 solutions."""

    def __init__(self, model: NetworkModel, params: ScheduleParams, scenarios: ScenarioSet | None,
                 t: int, prev: PeriodResult | None = None, grid: Grid | None = None):
        self.grid = grid or Grid(model)
        self.t = t
        self.rp: RobustProgram = build_robust_program(model, params, scenarios, periods=[t],
                                                      objective="zero", grid=self.grid)
        prog = self.rp.prog
        self.kinds = soc_kinds(self.rp, t)
        self.mu = np.zeros(0, dtype=int)
        if t > 0:
            if prev is None or not prev.solutions:
                raise RegionError(f"period {t + 1} needs the stored solutions of period {t}")
            J = len(prev.solutions)
            self.mu = prog.add_vars([f"mu[{t}][{j}]" for j in range(J)], 0.0, np.inf)
            prog.add_eq({int(k): 1.0 for k in self.mu}, 1.0, name=f"mu_simplex[{t}]")
            snaps = np.stack([s.soc for s in prev.solutions])   # (J, kinds, N)
            for ref in self.rp.blocks[t]:
                kind = 0 if ref.tag == 0 else 1
                expr = [{int(self.mu[j]): float(snaps[j, kind, n]) for j in range(J)}
                        for n in range(self.grid.N)]
                build_coupling(prog, self.grid, params, ref, expr)
        self.ip, self.iq = self.rp.w_index(t)

    def optimize(self, direction, tol_feas=TOL_FEAS, tol_gap=TOL_GAP) -> VertexSolution | None:
        """Maximize direction . w; None when the solver does not return Optimal."""
        a = np.asarray(direction, dtype=float)
        self.rp.prog.set_objective({self.ip: -a[0], self.iq: -a[1]})
        sol = solve(self.rp.prog, tol_feas=tol_feas, tol_gap=tol_gap)
        if sol.status is Status.INFEASIBLE:
            raise RegionError(f"period {self.t + 1}: robust program is infeasible, region is empty")
        if not sol.optimal:
            log.warning("period %d direction %s: %s", self.t + 1, a.tolist(), sol.status.name)
            return None
        return self._snapshot(sol.x)

    def _snapshot(self, x: np.ndarray) -> VertexSolution:
        rp, g = self.rp, self.grid
        Y = rp.period_matrix_x(x, self.t)
        sl = g.layout.slices
        soc = np.array([Y[b, sl["soc"]] for b in self.kinds]).reshape(len(self.kinds), g.N)
        pre = soc - g.eta_c * np.array([Y[b, sl["pc"]] for b in self.kinds]).reshape(soc.shape) \
            + np.array([Y[b, sl["pd"]] for b in self.kinds]).reshape(soc.shape) / g.eta_d
        gap = max(float(relaxation_gaps(g, row).max(initial=0.0)) for row in Y)
        return VertexSolution(self.t, np.array([x[self.ip], x[self.iq]]) * g.s_base, Y, soc, pre,
                              x[self.mu].copy() if len(self.mu) else np.zeros(0), gap)


def soc_kinds(rp: RobustProgram, t: int) -> list[int]:
    """Block positions representing each SOC kind: expected, then the shared extreme SOC."""
    return [0] if len(rp.blocks[t]) == 1 else [0, 1]


def _dedup_add(found: list[VertexSolution], new: list[VertexSolution], s_base: float,
               tol_vertex: float) -> int:
    added = 0
    for v in new:
        if v is None:
            continue
        if all(np.max(np.abs(v.w - u.w)) / s_base > tol_vertex for u in found):
            found.append(v)
            added += 1
    return added


def _hull(found: list[VertexSolution], s_base: float, tol_vertex: float) -> Polytope2D:
    pts = np.array([v.w for v in found]) / s_base
    return convex_hull_2d(pts, tol_vertex).scaled(s_base)


def initial_bounds(pp: PeriodProgram) -> list[VertexSolution]:
    """Step 1: min/max of P and Q at the PCC."""
    out = []
    for d in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        v = pp.optimize(d)
        if v is None:
            raise RegionError(f"period {pp.t + 1}: bound solve in direction {d} failed")
        out.append(v)
    return out


def expand_facets(polytope: Polytope2D, pp: PeriodProgram) -> tuple[list[VertexSolution], int]:
    """Push every facet outward: maximize a_j . w for each halfspace row, in row order."""
    out, skipped = [], 0
    for row in polytope.halfspaces:
        v = pp.optimize(row[:2])
        if v is None:
            skipped += 1
            continue
        out.append(v)
    return out, skipped


def explore_period(model: NetworkModel, params: ScheduleParams, scenarios: ScenarioSet | None,
                   t: int, prev: PeriodResult | None = None, tol_area: float = TOL_AREA,
                   max_iter: int = MAX_ITER, tol_vertex: float = TOL_VERTEX,
                   eps_area: float = EPS_AREA, grid: Grid | None = None) -> PeriodResult:
    if tol_area <= 0:
        raise ValueError("tol_area must be positive")
    grid = grid or Grid(model)
    pp = PeriodProgram(model, params, scenarios, t, prev, grid)
    sb = grid.s_base
    found: list[VertexSolution] = []
    _dedup_add(found, initial_bounds(pp), sb, tol_vertex)
    poly = _hull(found, sb, tol_vertex)
    areas = [poly.area]
    converged, skipped, it = False, 0, 0
    while it < max_iter:
        it += 1
        new, sk = expand_facets(poly, pp)
        skipped += sk
        added = _dedup_add(found, new, sb, tol_vertex)
        new_poly = _hull(found, sb, tol_vertex)
        area = new_poly.area
        grow = area - areas[-1]
        areas.append(area)
        poly = new_poly
        if added == 0 or grow <= tol_area * max(area, eps_area):
            converged = True
            break
    log.info("period %d: %d vertices, area %.6g MW*MVar after %d rounds", t + 1,
             poly.n_vertices, poly.area, it)
    owner = pp.rp.owner.get(t, np.zeros(0, dtype=int))
    return PeriodResult(t, poly, found, areas, it, converged, skipped, owner)


@dataclass
class MembershipCertificate:
    feasible: bool
    mu: list[np.ndarray]
    w: np.ndarray            # (T, 2) reconstructed MW
    residual: float = np.inf


@dataclass
class RegionEnvelope:
    """Per-period polygons with stored vertex solutions and SOC coupling data.

    ``periods[t].polytope`` is the polygon found by the period-t search.
    ``projections[t]`` is the exact projection of the coupled envelope onto
    period t; it can be smaller for t < T because some period-t solutions
    carry SOC values that no later-period solution continues from.  Every
    projection vertex is a certified member.
    """

    periods: list[PeriodResult]
    s_base: float
    n_storage: int
    projections: list[Polytope2D] = field(default_factory=list)

    @property
    def horizon(self) -> int:
        return len(self.periods)

    @property
    def total_area(self) -> float:
        return float(sum(p.area for p in self.projections))

    def polygon(self, t: int) -> Polytope2D:
        return self.projections[t] if self.projections else self.periods[t].polytope

    def coupling_rows(self):
        """(A_eq, b_eq) over the stacked mu: simplex per period and SOC coupling."""
        sizes = [len(p.solutions) for p in self.periods]
        offs = np.concatenate([[0], np.cumsum(sizes)])
        n = int(offs[-1])
        rows, rhs = [], []
        for t, p in enumerate(self.periods):
            r = np.zeros(n)
            r[offs[t]:offs[t + 1]] = 1.0
            rows.append(r)
            rhs.append(1.0)
            if t == 0 or not self.n_storage:
                continue
            prev_soc = np.stack([s.soc for s in self.periods[t - 1].solutions])
            pre = np.stack([s.pre for s in p.solutions])
            kinds = min(prev_soc.shape[1], pre.shape[1])
            for k in range(kinds):
                for s in range(self.n_storage):
                    r = np.zeros(n)
                    r[offs[t - 1]:offs[t]] = prev_soc[:, k, s]
                    r[offs[t]:offs[t + 1]] = -pre[:, k, s]
                    rows.append(r)
                    rhs.append(0.0)
        return np.array(rows).reshape(-1, n), np.array(rhs), offs

    def membership(self, w=None, fixed_mu: dict | None = None,
                   tol: float = 1e-7) -> MembershipCertificate:
        """Decide whether w (T x 2, MW; rows of NaN leave that period free) lies in the envelope."""
        T = self.horizon
        A, b, offs = self.coupling_rows()
        n = A.shape[1]
        rec, rec_rhs = [], []
        if w is not None:
            w = np.asarray(w, dtype=float).reshape(T, 2)
            for t, p in enumerate(self.periods):
                if np.any(np.isnan(w[t])):
                    continue
                W = p.W / self.s_base
                for c in range(2):
                    r = np.zeros(n)
                    r[offs[t]:offs[t + 1]] = W[:, c]
                    rec.append(r)
                    rec_rhs.append(w[t, c] / self.s_base)
        # reconstruction rows get +/- slacks whose sum is minimized, so points on the
        # boundary are decided by the certificate residual rather than LP presolve
        k = len(rec)
        R = np.array(rec).reshape(k, n)
        A_eq = np.block([[A, np.zeros((A.shape[0], 2 * k))], [R, np.eye(k), -np.eye(k)]])
        b_eq = np.concatenate([b, rec_rhs])
        c = np.concatenate([np.zeros(n), np.ones(2 * k)])
        bounds = [(0.0, None)] * (n + 2 * k)
        for (t, j), val in (fixed_mu or {}).items():
            bounds[offs[t] + j] = (val, val)
        res = linprog(c, A_eq=A_eq, b_eq=b_eq, bounds=bounds, method="highs",
                      options={"primal_feasibility_tolerance": 1e-10})
        if res.status != 0:
            return MembershipCertificate(False, [], np.full((T, 2), np.nan))
        return self.certificate(res.x[:n], offs, w, tol)

    def certificate(self, mu_flat, offs=None, w_query=None, tol: float = 1e-7
                    ) -> MembershipCertificate:
        if offs is None:
            offs = self.coupling_rows()[2]
        mu_flat = np.clip(np.asarray(mu_flat, dtype=float), 0.0, None)
        mus = []
        for t in range(self.horizon):
            m = mu_flat[offs[t]:offs[t + 1]]
            mus.append(m / m.sum())
        A, b, _ = self.coupling_rows()
        flat = np.concatenate(mus)
        resid = float(np.max(np.abs(A @ flat - b), initial=0.0))
        wrec = np.array([m @ p.W for m, p in zip(mus, self.periods)])
        if w_query is not None:
            mask = ~np.isnan(w_query)
            if mask.any():
                resid = max(resid, float(np.max(np.abs(wrec[mask] - w_query[mask]))) / self.s_base)
        return MembershipCertificate(resid <= tol, mus, wrec, resid)

    def support(self, t: int, direction) -> MembershipCertificate | None:
        """Member maximizing direction . w_t (None if the envelope is empty)."""
        A, b, offs = self.coupling_rows()
        c = np.zeros(A.shape[1])
        c[offs[t]:offs[t + 1]] = -(self.periods[t].W / self.s_base) @ np.asarray(direction, float)
        res = linprog(c, A_eq=A, b_eq=b, bounds=[(0.0, None)] * A.shape[1], method="highs",
                      options={"primal_feasibility_tolerance": 1e-10})
        if res.status != 0:
            return None
        return self.certificate(res.x, offs)

    def project(self, t: int, tol_vertex: float = TOL_VERTEX, max_iter: int = 50) -> Polytope2D:
        """Exact projection of the envelope onto period t by support-point search."""
        pts = []
        for d in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            cert = self.support(t, d)
            if cert is None:
                raise RegionError("envelope is empty: the SOC coupling admits no weights")
            pts.append(cert.w[t] / self.s_base)
        poly = convex_hull_2d(pts, tol_vertex)
        for _ in range(max_iter):
            added = 0
            for row in poly.halfspaces:
                cert = self.support(t, row[:2])
                if cert is None:
                    continue
                p = cert.w[t] / self.s_base
                if row[:2] @ p - row[2] > tol_vertex and \
                        all(np.max(np.abs(p - q)) > tol_vertex for q in pts):
                    pts.append(p)
                    added += 1
            if not added:
                break
            poly = convex_hull_2d(pts, tol_vertex)
        return poly.scaled(self.s_base)

    def vertex_certificate(self, t: int, j: int) -> MembershipCertificate:
        """Certificate with mu_t one-hot on stored solution j (other periods free)."""
        return self.membership(None, fixed_mu={(t, j): 1.0})

    def to_dict(self) -> dict:
        return {"s_base": self.s_base, "n_storage": self.n_storage, "periods": [
            {"t": p.t, "vertices": p.polytope.vertices.tolist(),
             "halfspaces": p.polytope.halfspaces.tolist(), "area": p.polytope.area,
             "degenerate": p.polytope.degenerate, "areas": p.areas, "iterations": p.iterations,
             "converged": p.converged, "skipped": p.skipped, "owner": p.owner.tolist(),
             "solutions": [s.to_dict() for s in p.solutions]} for p in self.periods],
            "projections": [{"vertices": q.vertices.tolist(), "halfspaces": q.halfspaces.tolist(),
                             "area": q.area, "degenerate": q.degenerate}
                            for q in self.projections]}

    @classmethod
    def from_dict(cls, d: dict) -> "RegionEnvelope":
        periods = []
        for p in d["periods"]:
            poly = Polytope2D(np.array(p["vertices"]), np.array(p["halfspaces"]), float(p["area"]),
                              bool(p["degenerate"]))
            periods.append(PeriodResult(int(p["t"]), poly,
                                        [VertexSolution.from_dict(s) for s in p["solutions"]],
                                        list(p["areas"]), int(p["iterations"]),
                                        bool(p["converged"]), int(p["skipped"]),
                                        np.array(p.get("owner", []), dtype=int)))
        proj = [Polytope2D(np.array(q["vertices"]), np.array(q["halfspaces"]), float(q["area"]),
                           bool(q["degenerate"])) for q in d.get("projections", [])]
        return cls(periods, float(d["s_base"]), int(d["n_storage"]), proj)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)


def build_envelope(results: list[PeriodResult], model: NetworkModel) -> RegionEnvelope:
    if [r.t for r in results] != list(range(model.horizon)):
        raise RegionError("envelope needs one explored result per period, in order")
    for r in results:
        for s in r.solutions:
            if s.soc is None or s.pre is None:
                raise RegionError(f"period {r.t + 1}: vertex solution without SOC snapshot")
    env = RegionEnvelope(list(results), model.s_base, len(model.storages))
    env.projections = [env.project(t) for t in range(env.horizon)]
    return env


def compute_region(model: NetworkModel, params: ScheduleParams, scenarios: ScenarioSet | None,
                   tol_area: float = TOL_AREA, max_iter: int = MAX_ITER,
                   tol_vertex: float = TOL_VERTEX) -> RegionEnvelope:
    """Explore every period in order and assemble the envelope."""
    grid = Grid(model)
    results: list[PeriodResult] = []
    for t in range(model.horizon):
        prev = results[-1] if results else None
        results.append(explore_period(model, params, scenarios, t, prev, tol_area, max_iter,
                                      tol_vertex, grid=grid))
    return build_envelope(results, model)
