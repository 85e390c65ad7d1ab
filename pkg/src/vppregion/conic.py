"""Minimal conic program container (linear rows + rotated cones) and its solver.

Programs are assembled once and re-solved with different variable bounds,
which is how every w-pinned solve in the package works.  The backend is
Clarabel; a rotated cone ``u*w >= sum z_k^2`` is passed as the standard
second-order cone ``||(2z, u - w)|| <= u + w``.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import clarabel
import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)

TOL_FEAS = 1e-7
TOL_GAP = 1e-7


class Status(enum.Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    UNBOUNDED = "Unbounded"
    NUMERICAL_TROUBLE = "NumericalTrouble"


class SolverError(RuntimeError):
    pass


@dataclass
class Solution:
    status: Status
    x: np.ndarray | None = None
    objective: float = float("nan")
    duals: np.ndarray | None = None   # one per linear row, d(objective)/d(rhs)
    info: dict = field(default_factory=dict)

    @property
    def optimal(self) -> bool:
        return self.status is Status.OPTIMAL

    def value(self, idx):
        return self.x[idx]


class ConicProgram:
    """Variables with bounds, linear rows, rotated cones, linear objective (minimise)."""

    def __init__(self):
        self.names: list[str] = []
        self._lb: list[float] = []
        self._ub: list[float] = []
        self._rows: list[tuple[list[int], list[float], str, float, str]] = []
        self.cones: list[tuple[int, int, tuple[int, ...]]] = []
        self.cone_names: list[str] = []
        self.objective: dict[int, float] = {}
        self.objective_constant = 0.0
        self._compiled = None

    # construction ---------------------------------------------------------
    @property
    def n_vars(self) -> int:
        return len(self.names)

    @property
    def n_rows(self) -> int:
        return len(self._rows)

    def add_var(self, name: str, lb: float = -np.inf, ub: float = np.inf) -> int:
        self.names.append(name)
        self._lb.append(float(lb))
        self._ub.append(float(ub))
        self._compiled = None
        return len(self.names) - 1

    def add_vars(self, names, lb=-np.inf, ub=np.inf) -> np.ndarray:
        names = list(names)
        lb = np.broadcast_to(np.asarray(lb, dtype=float), (len(names),))
        ub = np.broadcast_to(np.asarray(ub, dtype=float), (len(names),))
        start = len(self.names)
        self.names.extend(names)
        self._lb.extend(lb.tolist())
        self._ub.extend(ub.tolist())
        self._compiled = None
        return np.arange(start, start + len(names))

    def set_bounds(self, idx, lb, ub) -> None:
        idx = np.atleast_1d(idx)
        lb = np.broadcast_to(np.asarray(lb, dtype=float), idx.shape)
        ub = np.broadcast_to(np.asarray(ub, dtype=float), idx.shape)
        for i, a, b in zip(idx.tolist(), lb.tolist(), ub.tolist()):
            self._lb[i] = a
            self._ub[i] = b

    def bounds(self, idx) -> tuple[float, float]:
        return self._lb[idx], self._ub[idx]

    def add_row(self, coeffs: dict, sense: str, rhs: float, name: str = "") -> int:
        """Add ``sum coeffs[v] * x[v]  (== | <= | >=)  rhs``; returns the row index."""
        if sense not in ("==", "<=", ">="):
            raise ValueError(f"bad sense {sense!r}")
        idx = [int(k) for k in coeffs]
        val = [float(v) for v in coeffs.values()]
        if sense == ">=":
            val = [-v for v in val]
            rhs = -rhs
            sense = "<="
            name = name or "ge"
        self._rows.append((idx, val, sense, float(rhs), name))
        self._compiled = None
        return len(self._rows) - 1

    def add_eq(self, coeffs, rhs=0.0, name=""):
        return self.add_row(coeffs, "==", rhs, name)

    def add_le(self, coeffs, rhs=0.0, name=""):
        return self.add_row(coeffs, "<=", rhs, name)

    def add_rotated_cone(self, u: int, w: int, z, name: str = "") -> None:
        """``x[u] * x[w] >= sum x[z_k]**2`` with ``x[u], x[w] >= 0``."""
        self.cones.append((int(u), int(w), tuple(int(k) for k in z)))
        self.cone_names.append(name)
        self._compiled = None

    def set_objective(self, coeffs: dict, constant: float = 0.0) -> None:
        self.objective = {int(k): float(v) for k, v in coeffs.items()}
        self.objective_constant = float(constant)

    def row_name(self, k: int) -> str:
        return self._rows[k][4]

    # compilation ----------------------------------------------------------
    def _compile(self):
        if self._compiled is not None:
            return self._compiled
        eq = [k for k, r in enumerate(self._rows) if r[2] == "=="]
        le = [k for k, r in enumerate(self._rows) if r[2] == "<="]

        def block(rows):
            ri, ci, vi, b = [], [], [], []
            for pos, k in enumerate(rows):
                idx, val, _, rhs, _ = self._rows[k]
                ri.extend([pos] * len(idx))
                ci.extend(idx)
                vi.extend(val)
                b.append(rhs)
            A = sp.csc_matrix((vi, (ri, ci)), shape=(len(rows), self.n_vars))
            return A, np.array(b, dtype=float)

        A_eq, b_eq = block(eq)
        A_le, b_le = block(le)
        # cones: rows [-(u+w), -2 z..., -(u-w)], b = 0
        ri, ci, vi, dims = [], [], [], []
        pos = 0
        for u, w, z in self.cones:
            ri += [pos, pos]
            ci += [u, w]
            vi += [-1.0, -1.0]
            for k, zk in enumerate(z):
                ri.append(pos + 1 + k)
                ci.append(zk)
                vi.append(-2.0)
            last = pos + 1 + len(z)
            ri += [last, last]
            ci += [u, w]
            vi += [-1.0, 1.0]
            dims.append(len(z) + 2)
            pos += len(z) + 2
        A_soc = sp.csc_matrix((vi, (ri, ci)), shape=(pos, self.n_vars))
        self._compiled = dict(eq=eq, le=le, A_eq=A_eq, b_eq=b_eq, A_le=A_le, b_le=b_le,
                              A_soc=A_soc, soc_dims=dims)
        return self._compiled

    def assemble(self):
        """Clarabel data (P, q, A, b, cones) plus bookkeeping for dual recovery."""
        c = self._compile()
        n = self.n_vars
        lb = np.array(self._lb)
        ub = np.array(self._ub)
        fixed = np.isfinite(lb) & (lb == ub)
        lo_idx = np.nonzero(np.isfinite(lb) & ~fixed)[0]
        up_idx = np.nonzero(np.isfinite(ub) & ~fixed)[0]
        fx_idx = np.nonzero(fixed)[0]

        def sel(idx, sign):
            return sp.csc_matrix((np.full(len(idx), sign), (np.arange(len(idx)), idx)),
                                 shape=(len(idx), n))

        A = sp.vstack([c["A_eq"], sel(fx_idx, 1.0), c["A_le"], sel(lo_idx, -1.0),
                       sel(up_idx, 1.0), c["A_soc"]], format="csc")
        b = np.concatenate([c["b_eq"], lb[fx_idx], c["b_le"], -lb[lo_idx], ub[up_idx],
                            np.zeros(c["A_soc"].shape[0])])
        n_zero = len(c["eq"]) + len(fx_idx)
        n_nonneg = len(c["le"]) + len(lo_idx) + len(up_idx)
        cones = []
        if n_zero:
            cones.append(clarabel.ZeroConeT(n_zero))
        if n_nonneg:
            cones.append(clarabel.NonnegativeConeT(n_nonneg))
        cones.extend(clarabel.SecondOrderConeT(d) for d in c["soc_dims"])
        q = np.zeros(n)
        for k, v in self.objective.items():
            q[k] += v
        P = sp.csc_matrix((n, n))
        return P, q, A, b, cones, dict(n_eq=len(c["eq"]), n_fix=len(fx_idx),
                                       n_le=len(c["le"]), eq=c["eq"], le=c["le"])

    # diagnostics ----------------------------------------------------------
    def residuals(self, x: np.ndarray) -> dict[str, float]:
        """Max violation of rows, bounds and cones at ``x``."""
        c = self._compile()
        lb = np.array(self._lb)
        ub = np.array(self._ub)
        out = {"eq": 0.0, "le": 0.0, "bounds": 0.0, "cone": 0.0}
        if len(c["eq"]):
            out["eq"] = float(np.max(np.abs(c["A_eq"] @ x - c["b_eq"])))
        if len(c["le"]):
            out["le"] = float(max(0.0, np.max(c["A_le"] @ x - c["b_le"])))
        with np.errstate(invalid="ignore"):
            viol = np.maximum(np.nan_to_num(lb - x, nan=0.0, neginf=0.0),
                              np.nan_to_num(x - ub, nan=0.0, neginf=0.0))
        out["bounds"] = float(max(0.0, viol.max(initial=0.0)))
        if self.cones:
            out["cone"] = float(max(0.0, -min(cone_gaps(self, x))))
        return out

    def dump(self) -> str:
        """One constraint per line, canonical variable names; stable across runs."""
        def term(k, v):
            return f"{v:+.12g}*{self.names[k]}"

        lines = [f"minimize {' '.join(term(k, v) for k, v in sorted(self.objective.items()))}"
                 f" {self.objective_constant:+.12g}"]
        for k, (lb, ub) in enumerate(zip(self._lb, self._ub)):
            if np.isfinite(lb) or np.isfinite(ub):
                lines.append(f"bound {lb:.12g} <= {self.names[k]} <= {ub:.12g}")
        for idx, val, sense, rhs, name in self._rows:
            body = " ".join(term(k, v) for k, v in sorted(zip(idx, val)))
            lines.append(f"{name}: {body} {sense} {rhs:.12g}")
        for (u, w, z), name in zip(self.cones, self.cone_names):
            zs = " + ".join(f"{self.names[k]}^2" for k in z)
            lines.append(f"{name}: {self.names[u]} * {self.names[w]} >= {zs}")
        return "\n".join(lines) + "\n"


def cone_gaps(program: ConicProgram, x: np.ndarray) -> np.ndarray:
    """u*w - sum z^2 for every cone (negative = violated)."""
    if not program.cones:
        return np.zeros(0)
    return np.array([x[u] * x[w] - float(np.sum(x[list(z)] ** 2))
                     for u, w, z in program.cones])


_STATUS = {
    "Solved": Status.OPTIMAL,
    "AlmostSolved": Status.OPTIMAL,
    "PrimalInfeasible": Status.INFEASIBLE,
    "AlmostPrimalInfeasible": Status.INFEASIBLE,
    "DualInfeasible": Status.UNBOUNDED,
    "AlmostDualInfeasible": Status.UNBOUNDED,
}


def solve(program: ConicProgram, tol_feas: float = TOL_FEAS, tol_gap: float = TOL_GAP,
          max_iter: int = 200, verbose: bool = False) -> Solution:
    """Solve ``program``; deterministic for identical inputs.

    ``Optimal`` is only reported after the returned point has been checked
    against ``tol_feas`` (rows, bounds, cones); anything else that is not a
    clean infeasibility/unboundedness certificate is ``NumericalTrouble``.
    """
    P, q, A, b, cones, book = program.assemble()
    settings = clarabel.DefaultSettings()
    settings.verbose = verbose
    settings.max_iter = max_iter
    settings.tol_feas = min(1e-8, tol_feas)
    settings.tol_gap_abs = min(1e-8, tol_gap)
    settings.tol_gap_rel = min(1e-8, tol_gap)
    settings.presolve_enable = True
    solver = clarabel.DefaultSolver(P, q, A, b, cones, settings)
    res = solver.solve()
    raw = str(res.status)
    status = _STATUS.get(raw, Status.NUMERICAL_TROUBLE)
    info = {"solver_status": raw, "iterations": res.iterations, "solve_time": res.solve_time}
    if status is not Status.OPTIMAL:
        return Solution(status, info=info)
    x = np.array(res.x)
    resid = program.residuals(x)
    info["residuals"] = resid
    scale = max(1.0, float(np.max(np.abs(b), initial=0.0)))
    if max(resid.values()) > tol_feas * scale:
        log.debug("solution rejected, residuals %s", resid)
        return Solution(Status.NUMERICAL_TROUBLE, x=x, info=info)
    z = np.array(res.z)
    duals = np.zeros(program.n_rows)
    # Clarabel: A x + s = b, z dual; d(obj)/d(b) = -z
    duals[book["eq"]] = -z[:book["n_eq"]]
    off = book["n_eq"] + book["n_fix"]
    duals[book["le"]] = -z[off:off + book["n_le"]]
    obj = float(q @ x) + program.objective_constant
    return Solution(status, x=x, objective=obj, duals=duals, info=info)
