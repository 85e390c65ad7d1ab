"""Branch-flow (Distflow + SOC relaxation) constraint builders and the robust program.

Everything inside a program is per-unit on the network's MVA base (energy in
p.u.*h, one-hour periods); objectives stay in $.  Variables of one scenario
block at one period are laid out contiguously as

    [P_pcc, Q_pcc, P_g(G), Q_g(G), P_ij(B), Q_ij(B), v(Nb), l_ij(B), S(N), P_c(N), P_d(N)]

so a block's solution can be sliced out, averaged and recombined as a plain
vector.  For the expected block ``P_pcc, Q_pcc`` *are* the day-ahead
schedule ``w_t``; extreme blocks own their intraday PCC exchange, kept inside
the ``dp``/``dq`` band around ``w_t``.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np

from .conic import ConicProgram, Solution, solve
from .network import NetworkModel
from .scenarios import ScenarioSet


class Mode(enum.IntEnum):
    IDLE = 0
    CHARGE = 1
    DISCHARGE = 2

    @classmethod
    def parse(cls, text: str) -> "Mode":
        return cls[str(text).upper()]

    def label(self) -> str:
        return self.name.capitalize()


class FormulationError(ValueError):
    pass


@dataclass
class ScheduleParams:
    """Generator and SOC corridors (MW / MWh) and storage modes, arrays indexed [device, t]."""

    pg_min: np.ndarray
    pg_max: np.ndarray
    soc_min: np.ndarray
    soc_max: np.ndarray
    modes: np.ndarray

    def __post_init__(self):
        for name in ("pg_min", "pg_max", "soc_min", "soc_max"):
            setattr(self, name, np.array(getattr(self, name), dtype=float, ndmin=2))
        self.modes = np.array(self.modes, dtype=int, ndmin=2)

    @classmethod
    def physical(cls, model: NetworkModel, modes=None) -> "ScheduleParams":
        """Corridors equal to physical capacities (no time-coupling guarantees)."""
        T = model.horizon
        G, N = len(model.generators), len(model.storages)
        g_lo = np.array([[g.p_phys_min] * T for g in model.generators]).reshape(G, T)
        g_hi = np.array([[g.p_phys_max] * T for g in model.generators]).reshape(G, T)
        s_lo = np.array([[s.s_phys_min] * T for s in model.storages]).reshape(N, T)
        s_hi = np.array([[s.s_phys_max] * T for s in model.storages]).reshape(N, T)
        if modes is None:
            modes = np.zeros((N, T), dtype=int)
        return cls(g_lo, g_hi, s_lo, s_hi, np.array(modes, dtype=int).reshape(N, T))

    def to_dict(self, model: NetworkModel) -> dict:
        T = model.horizon
        out = {"horizon": T, "generators": [], "storages": []}
        for g in range(self.pg_min.shape[0]):
            out["generators"].append({"index": g, "bus": model.generators[g].bus,
                                      "pg_min": self.pg_min[g].tolist(),
                                      "pg_max": self.pg_max[g].tolist()})
        for n in range(self.soc_min.shape[0]):
            out["storages"].append({"index": n, "bus": model.storages[n].bus,
                                    "soc_min": self.soc_min[n].tolist(),
                                    "soc_max": self.soc_max[n].tolist(),
                                    "mode": [Mode(m).label() for m in self.modes[n]]})
        return out

    @classmethod
    def from_dict(cls, data: dict, model: NetworkModel) -> "ScheduleParams":
        T = model.horizon
        G, N = len(model.generators), len(model.storages)
        gens = sorted(data["generators"], key=lambda d: d["index"])
        stos = sorted(data["storages"], key=lambda d: d["index"])
        return cls(np.array([g["pg_min"] for g in gens]).reshape(G, T),
                   np.array([g["pg_max"] for g in gens]).reshape(G, T),
                   np.array([s["soc_min"] for s in stos]).reshape(N, T),
                   np.array([s["soc_max"] for s in stos]).reshape(N, T),
                   np.array([[Mode.parse(m) for m in s["mode"]] for s in stos],
                            dtype=int).reshape(N, T))

    def save(self, model: NetworkModel, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(model), indent=1) + "\n")

    @classmethod
    def load(cls, path, model: NetworkModel) -> "ScheduleParams":
        return cls.from_dict(json.loads(Path(path).read_text()), model)


class Grid:
    """Per-unit arrays derived from a NetworkModel (topology bus order)."""

    def __init__(self, model: NetworkModel):
        self.model = model
        sb = model.s_base
        self.s_base = sb
        topo = model.topology
        self.order = list(topo.order)
        self.pos = {b: k for k, b in enumerate(self.order)}
        self.nb = len(self.order)
        self.nbr = self.nb - 1
        self.T = model.horizon
        buses = {b.id: b for b in model.buses}
        self.vmin = np.array([buses[b].v_sq_min for b in self.order])
        self.vmax = np.array([buses[b].v_sq_max for b in self.order])
        brs = model.oriented_branches()
        self.br_from = np.array([self.pos[b.from_bus] for b in brs], dtype=int)
        self.br_to = np.array([self.pos[b.to_bus] for b in brs], dtype=int)
        self.r = np.array([b.r for b in brs])
        self.x = np.array([b.x for b in brs])
        self.fmin = np.array([b.p_min for b in brs]) / sb
        self.fmax = np.array([b.p_max for b in brs]) / sb
        # branch feeding bus k (k >= 1) is k - 1
        self.children = [[k for k in range(self.nbr) if self.br_from[k] == i]
                         for i in range(self.nb)]
        gens = model.generators
        self.G = len(gens)
        self.gen_pos = np.array([self.pos[g.bus] for g in gens], dtype=int)
        self.pg_phys_min = np.array([g.p_phys_min for g in gens]) / sb
        self.pg_phys_max = np.array([g.p_phys_max for g in gens]) / sb
        self.qg_min = np.array([g.q_min for g in gens]) / sb
        self.qg_max = np.array([g.q_max for g in gens]) / sb
        self.ramp_dn = np.array([g.ramp_down for g in gens]) / sb
        self.ramp_up = np.array([g.ramp_up for g in gens]) / sb
        # cost lines per p.u.: slope * S_base
        self.cost_lines = [[(a * sb, b) for a, b in g.cost_lines()] for g in gens]
        stos = model.storages
        self.N = len(stos)
        self.sto_pos = np.array([self.pos[s.bus] for s in stos], dtype=int)
        self.eta_c = np.array([s.eta_c for s in stos])
        self.eta_d = np.array([s.eta_d for s in stos])
        self.pc_max = np.array([s.pc_max for s in stos]) / sb
        self.pd_max = np.array([s.pd_max for s in stos]) / sb
        self.s_min = np.array([s.s_phys_min for s in stos]) / sb
        self.s_max = np.array([s.s_phys_max for s in stos]) / sb
        self.s_init = np.array([s.s_initial for s in stos]) / sb
        self.c_charge = np.array([s.c_charge for s in stos]) * sb
        self.c_discharge = np.array([s.c_discharge for s in stos]) * sb
        ders = model.ders
        self.R = len(ders)
        self.der_pos = np.array([self.pos[d.bus] for d in ders], dtype=int)
        self.tanb = np.array([np.tan(d.beta) for d in ders])
        self.dp = model.pcc_limits.dp / sb
        self.dq = model.pcc_limits.dq / sb
        self.root = self.pos[model.pcc_bus]
        self.layout = BlockLayout(self.G, self.nbr, self.nb, self.N)

    def demand(self, der_mw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Nodal net (P, Q) demand in p.u. from per-DER MW values."""
        p = np.zeros(self.nb)
        q = np.zeros(self.nb)
        vals = np.asarray(der_mw, dtype=float) / self.s_base
        np.add.at(p, self.der_pos, vals)
        np.add.at(q, self.der_pos, self.tanb * vals)
        return p, q

    def period_cost_cap(self) -> float:
        """Cost of every device at its maximum output for one period ($)."""
        cap = sum(max(a * self.pg_phys_max[g] + b for a, b in lines)
                  for g, lines in enumerate(self.cost_lines))
        cap += float(np.sum(self.c_charge * self.pc_max + self.c_discharge * self.pd_max))
        return float(cap)


class BlockLayout:
    FIELDS = ("pcc_p", "pcc_q", "pg", "qg", "pf", "qf", "v", "l", "soc", "pc", "pd")

    def __init__(self, G: int, B: int, Nb: int, N: int):
        sizes = dict(pcc_p=1, pcc_q=1, pg=G, qg=G, pf=B, qf=B, v=Nb, l=B, soc=N, pc=N, pd=N)
        self.slices = {}
        off = 0
        for f in self.FIELDS:
            self.slices[f] = slice(off, off + sizes[f])
            off += sizes[f]
        self.size = off

    def names(self, t: int, tag: int, grid: Grid) -> list[str]:
        m = grid.model
        ends = m.topology.branch_ends
        out = [f"P_pcc[{t + 1}][{tag}]", f"Q_pcc[{t + 1}][{tag}]"]
        out += [f"P_g{g}[{t + 1}][{tag}]" for g in range(grid.G)]
        out += [f"Q_g{g}[{t + 1}][{tag}]" for g in range(grid.G)]
        out += [f"P_{i}_{j}[{t + 1}][{tag}]" for i, j in ends]
        out += [f"Q_{i}_{j}[{t + 1}][{tag}]" for i, j in ends]
        out += [f"v_{i}[{t + 1}][{tag}]" for i in grid.order]
        out += [f"l_{i}_{j}[{t + 1}][{tag}]" for i, j in ends]
        out += [f"S_n{n}[{t + 1}][{tag}]" for n in range(grid.N)]
        out += [f"Pc_n{n}[{t + 1}][{tag}]" for n in range(grid.N)]
        out += [f"Pd_n{n}[{t + 1}][{tag}]" for n in range(grid.N)]
        return out


@dataclass
class BlockRef:
    """Handle of one scenario block: contiguous variable range in a program."""

    t: int
    tag: int                 # 0 = expected, k >= 1 = k-th extreme block of the period
    start: int
    layout: BlockLayout
    demand_mw: np.ndarray    # per-DER realisation used by the block

    def idx(self, fieldname: str) -> np.ndarray:
        s = self.layout.slices[fieldname]
        return np.arange(self.start + s.start, self.start + s.stop)

    @property
    def span(self) -> slice:
        return slice(self.start, self.start + self.layout.size)

    def one(self, fieldname: str) -> int:
        return int(self.idx(fieldname)[0])


def _mw(x):
    return np.asarray(x, dtype=float)


def build_scenario_block(prog: ConicProgram, grid: Grid, params: ScheduleParams, t: int,
                         demand_mw, tag: int, w: tuple[int, int] | None = None,
                         w_fixed: tuple[float, float] | None = None,
                         soc_free: bool = False) -> BlockRef:
    """Constraints (1)-(13) of one block at period ``t`` plus mode fixing.

    ``tag == 0`` is the expected block: its PCC variables are the schedule
    ``w_t`` (pinned when ``w_fixed`` is given, in MW/MVar).  For ``tag >= 1``
    the PCC variables are banded around the expected block's ``w`` handles.
    The cyclic condition is applied at the last period.  ``soc_free`` leaves
    the SOC corridor and mode fixing out (used by the parameter selection,
    which owns those as variables).
    """
    lay = grid.layout
    demand_mw = _mw(demand_mw)
    if demand_mw.shape != (grid.R,):
        raise FormulationError(f"block needs {grid.R} DER values, got shape {demand_mw.shape}")
    if np.any(~np.isfinite(demand_mw)):
        raise FormulationError("missing scenario value")
    sb = grid.s_base
    names = lay.names(t, tag, grid)
    lb = np.full(lay.size, -np.inf)
    ub = np.full(lay.size, np.inf)
    sl = lay.slices
    lb[sl["pg"]] = params.pg_min[:, t] / sb
    ub[sl["pg"]] = params.pg_max[:, t] / sb
    lb[sl["qg"]] = grid.qg_min
    ub[sl["qg"]] = grid.qg_max
    lb[sl["pf"]] = grid.fmin
    ub[sl["pf"]] = grid.fmax
    lb[sl["v"]] = grid.vmin
    ub[sl["v"]] = grid.vmax
    lb[sl["l"]] = 0.0
    if soc_free:
        lb[sl["soc"]] = grid.s_min
        ub[sl["soc"]] = grid.s_max
    else:
        lb[sl["soc"]] = params.soc_min[:, t] / sb
        ub[sl["soc"]] = params.soc_max[:, t] / sb
    if t == grid.T - 1:
        lb[sl["soc"]] = np.maximum(lb[sl["soc"]], grid.s_init)
        ub[sl["soc"]] = np.minimum(ub[sl["soc"]], grid.s_init)
    lb[sl["pc"]] = 0.0
    ub[sl["pc"]] = grid.pc_max
    lb[sl["pd"]] = 0.0
    ub[sl["pd"]] = grid.pd_max
    if tag == 0 and w_fixed is not None:
        lb[sl["pcc_p"]] = ub[sl["pcc_p"]] = w_fixed[0] / sb
        lb[sl["pcc_q"]] = ub[sl["pcc_q"]] = w_fixed[1] / sb
    start = int(prog.add_vars(names, lb, ub)[0])
    ref = BlockRef(t, tag, start, lay, demand_mw)
    P_pcc, Q_pcc = ref.one("pcc_p"), ref.one("pcc_q")
    pg, qg, pf, qf = ref.idx("pg"), ref.idx("qg"), ref.idx("pf"), ref.idx("qf")
    v, l = ref.idx("v"), ref.idx("l")
    pc, pd = ref.idx("pc"), ref.idx("pd")
    dem_p, dem_q = grid.demand(demand_mw)
    sfx = f"[{t + 1}][{tag}]"
    for j in range(grid.nb):
        cp: dict[int, float] = {}
        cq: dict[int, float] = {}
        if j != grid.root:
            k = j - 1
            cp[pf[k]] = 1.0
            cp[l[k]] = -grid.r[k]
            cq[qf[k]] = 1.0
            cq[l[k]] = -grid.x[k]
        else:
            cp[P_pcc] = 1.0
            cq[Q_pcc] = 1.0
        for g in np.nonzero(grid.gen_pos == j)[0]:
            cp[pg[g]] = cp.get(pg[g], 0.0) + 1.0
            cq[qg[g]] = cq.get(qg[g], 0.0) + 1.0
        for n in np.nonzero(grid.sto_pos == j)[0]:
            cp[pd[n]] = 1.0
            cp[pc[n]] = -1.0
        for k in grid.children[j]:
            cp[pf[k]] = cp.get(pf[k], 0.0) - 1.0
            cq[qf[k]] = cq.get(qf[k], 0.0) - 1.0
        bus = grid.order[j]
        prog.add_eq(cp, dem_p[j], name=f"balance_p_{bus}{sfx}")
        prog.add_eq(cq, dem_q[j], name=f"balance_q_{bus}{sfx}")
    for k in range(grid.nbr):
        i, j = grid.br_from[k], grid.br_to[k]
        z2 = grid.r[k] ** 2 + grid.x[k] ** 2
        coeffs = {v[j]: 1.0, v[i]: -1.0, pf[k]: 2 * grid.r[k], qf[k]: 2 * grid.x[k]}
        if z2:
            coeffs[l[k]] = -z2
        prog.add_eq(coeffs, 0.0, name=f"vdrop_{grid.order[i]}_{grid.order[j]}{sfx}")
        prog.add_rotated_cone(v[i], l[k], (pf[k], qf[k]),
                              name=f"cone_{grid.order[i]}_{grid.order[j]}{sfx}")
    if not soc_free:
        for n in range(grid.N):
            mode = Mode(params.modes[n, t])
            if mode is not Mode.CHARGE:
                prog.add_eq({pc[n]: 1.0}, 0.0, name=f"mode_fix_c_n{n}{sfx}")
            if mode is not Mode.DISCHARGE:
                prog.add_eq({pd[n]: 1.0}, 0.0, name=f"mode_fix_d_n{n}{sfx}")
    if tag >= 1:
        if w is None:
            raise FormulationError("extreme block needs the expected block's w handles")
        prog.add_le({P_pcc: 1.0, w[0]: -1.0}, grid.dp, name=f"pcc_band_p_hi{sfx}")
        prog.add_le({P_pcc: -1.0, w[0]: 1.0}, grid.dp, name=f"pcc_band_p_lo{sfx}")
        prog.add_le({Q_pcc: 1.0, w[1]: -1.0}, grid.dq, name=f"pcc_band_q_hi{sfx}")
        prog.add_le({Q_pcc: -1.0, w[1]: 1.0}, grid.dq, name=f"pcc_band_q_lo{sfx}")
    return ref


def build_coupling(prog: ConicProgram, grid: Grid, params: ScheduleParams, ref: BlockRef,
                   prev: BlockRef | dict | None = None, generic: bool = False) -> list[int]:
    """Mode-matched SOC recursion linking ``ref`` to its predecessor.

    ``prev`` is the previous-period block of the same scenario, or a linear
    expression ``{var: coeff, "const": c}`` for the previous SOC of storage n
    given as a list of such dicts, or None for the initial SOC anchor.
    ``generic`` emits the full recursion (17) regardless of mode.
    """
    if isinstance(prev, BlockRef) and params is not None and not generic:
        if np.any(params.modes[:, prev.t] < 0):
            raise FormulationError("unknown mode")
    rows = []
    soc, pc, pd = ref.idx("soc"), ref.idx("pc"), ref.idx("pd")
    sfx = f"[{ref.t + 1}][{ref.tag}]"
    for n in range(grid.N):
        coeffs: dict[int, float] = {soc[n]: 1.0}
        rhs = 0.0
        if prev is None:
            rhs = grid.s_init[n]
        elif isinstance(prev, BlockRef):
            coeffs[prev.idx("soc")[n]] = -1.0
        else:
            for k, c in prev[n].items():
                if k == "const":
                    rhs += c
                else:
                    coeffs[k] = coeffs.get(k, 0.0) - c
        mode = None if generic else Mode(params.modes[n, ref.t])
        if mode is None or mode is Mode.CHARGE:
            coeffs[pc[n]] = -grid.eta_c[n]
        if mode is None or mode is Mode.DISCHARGE:
            coeffs[pd[n]] = 1.0 / grid.eta_d[n]
        if mode is not None and mode not in (Mode.CHARGE, Mode.DISCHARGE, Mode.IDLE):
            raise FormulationError(f"unknown mode {mode}")
        rows.append(prog.add_eq(coeffs, rhs, name=f"soc_rec_n{n}{sfx}"))
    return rows


def build_cross_scenario_cones(prog: ConicProgram, grid: Grid, refs: list[BlockRef]) -> int:
    """Four rotated cones per unordered scenario pair and branch; returns the count.

    For scenarios s, n: v_s*l_n and v_n*l_s each dominate P_s^2+P_n^2 and
    Q_s^2+Q_n^2, which is what recombined flows need to stay inside (5).
    """
    count = 0
    for a, b in combinations(refs, 2):
        va, la, pa, qa = a.idx("v"), a.idx("l"), a.idx("pf"), a.idx("qf")
        vb, lb, pb, qb = b.idx("v"), b.idx("l"), b.idx("pf"), b.idx("qf")
        for k in range(grid.nbr):
            i = grid.br_from[k]
            tagn = f"{grid.order[i]}_{grid.order[grid.br_to[k]]}[{a.t + 1}][{a.tag},{b.tag}]"
            prog.add_rotated_cone(va[i], lb[k], (pa[k], pb[k]), name=f"xcone_P_ab_{tagn}")
            prog.add_rotated_cone(va[i], lb[k], (qa[k], qb[k]), name=f"xcone_Q_ab_{tagn}")
            prog.add_rotated_cone(vb[i], la[k], (pa[k], pb[k]), name=f"xcone_P_ba_{tagn}")
            prog.add_rotated_cone(vb[i], la[k], (qa[k], qb[k]), name=f"xcone_Q_ba_{tagn}")
            count += 4
    return count


def build_cost_epigraph(prog: ConicProgram, lines, p_var: int, name: str = "c") -> int:
    """Epigraph variable c >= slope_k * P + intercept_k for every cost piece."""
    c = prog.add_var(name)
    for k, (a, b) in enumerate(lines):
        prog.add_le({p_var: a, c: -1.0}, -b, name=f"{name}_piece{k}")
    return c


def expected_cost_terms(prog: ConicProgram, grid: Grid, ref: BlockRef,
                        linear_lines=None) -> dict[int, float]:
    """Objective coefficients of the period cost f_t at the expected block."""
    coeffs: dict[int, float] = {}
    pg = ref.idx("pg")
    for g in range(grid.G):
        if linear_lines is not None:
            a, b = linear_lines[g]
            coeffs[pg[g]] = coeffs.get(pg[g], 0.0) + a
            coeffs["const"] = coeffs.get("const", 0.0) + b
        else:
            c = build_cost_epigraph(prog, grid.cost_lines[g], pg[g], name=f"cost_g{g}[{ref.t + 1}]")
            coeffs[c] = 1.0
    for n, (ic, idd) in enumerate(zip(ref.idx("pc"), ref.idx("pd"))):
        if grid.c_charge[n]:
            coeffs[ic] = coeffs.get(ic, 0.0) + grid.c_charge[n]
        if grid.c_discharge[n]:
            coeffs[idd] = coeffs.get(idd, 0.0) + grid.c_discharge[n]
    return coeffs


def _merge(into: dict, more: dict, scale: float = 1.0) -> dict:
    for k, v in more.items():
        into[k] = into.get(k, 0.0) + scale * v
    return into


@dataclass
class RobustProgram:
    """The robust program over a set of periods, with handles to every block."""

    grid: Grid
    params: ScheduleParams
    scenarios: ScenarioSet | None
    prog: ConicProgram
    periods: list[int]
    blocks: dict[int, list[BlockRef]]          # t -> [expected, extreme blocks...]
    owner: dict[int, np.ndarray]               # t -> extreme scenario -> block tag - 1
    cost_terms: dict[int, dict] = field(default_factory=dict)
    mu: dict[int, np.ndarray] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def w_index(self, t: int) -> tuple[int, int]:
        ref = self.blocks[t][0]
        return ref.one("pcc_p"), ref.one("pcc_q")

    def pin_w(self, t: int, w_mw) -> None:
        ip, iq = self.w_index(t)
        sb = self.grid.s_base
        self.prog.set_bounds([ip, iq], np.asarray(w_mw, dtype=float) / sb,
                             np.asarray(w_mw, dtype=float) / sb)

    def free_w(self, t: int) -> None:
        ip, iq = self.w_index(t)
        self.prog.set_bounds([ip, iq], -np.inf, np.inf)

    def pin_all(self, w_mw) -> None:
        w_mw = np.asarray(w_mw, dtype=float).reshape(-1, 2)
        for k, t in enumerate(self.periods):
            self.pin_w(t, w_mw[k])

    def solve(self, **kw) -> Solution:
        return solve(self.prog, **kw)

    def w_value(self, sol: Solution, t: int) -> np.ndarray:
        ip, iq = self.w_index(t)
        return np.array([sol.x[ip], sol.x[iq]]) * self.grid.s_base

    def period_matrix(self, sol: Solution, t: int) -> np.ndarray:
        """Stacked block solutions y_t, shape (n_blocks, block_size)."""
        return self.period_matrix_x(sol.x, t)

    def period_matrix_x(self, x: np.ndarray, t: int) -> np.ndarray:
        return np.stack([x[r.span] for r in self.blocks[t]])

    def cost_value(self, x: np.ndarray, t: int) -> float:
        total = 0.0
        for k, c in self.cost_terms[t].items():
            total += c if k == "const" else c * x[k]
        return float(total)

    def max_cone_gap(self, sol: Solution, tags=None) -> float:
        """Largest v*l - (P^2 + Q^2) over branch cones of the chosen blocks."""
        gaps = []
        for t in self.periods:
            for r in self.blocks[t]:
                if tags is not None and r.tag not in tags:
                    continue
                gaps.append(relaxation_gaps(self.grid, sol.x[r.span]).max(initial=0.0))
        return float(max(gaps, default=0.0))


def relaxation_gaps(grid: Grid, block: np.ndarray) -> np.ndarray:
    """v_i * l_ij - (P_ij^2 + Q_ij^2) per branch for one block vector (p.u.)."""
    sl = grid.layout.slices
    v = block[sl["v"]]
    return v[grid.br_from] * block[sl["l"]] - block[sl["pf"]] ** 2 - block[sl["qf"]] ** 2


def build_robust_program(model: NetworkModel, params: ScheduleParams | None,
                         scenarios: ScenarioSet | None, w=None, objective="expected_cost",
                         periods=None, common_soc: bool = True, cross_cones: bool = True,
                         grid: Grid | None = None) -> RobustProgram:
    """Expected block + extreme blocks for each period, couplings and cross cones.

    ``w``: None leaves every ``w_t`` free, otherwise an array (T, 2) in MW/MVar.
    ``objective``: "expected_cost", "zero", or a dict of objective coefficients
    that the caller fills in later.  ``scenarios=None`` gives the deterministic
    expected-scenario dispatch.

    With ``common_soc`` the extreme blocks share one SOC trajectory; extreme
    scenarios that coincide at a period then share one block there.
    """
    grid = grid or Grid(model)
    params = params if params is not None else ScheduleParams.physical(model)
    _check_params_shape(grid, params)
    periods = list(range(grid.T)) if periods is None else list(periods)
    if periods != list(range(periods[0], periods[-1] + 1)):
        raise FormulationError("periods must be consecutive")
    prog = ConicProgram()
    forecast = np.array([d.forecast for d in model.ders]).reshape(grid.R, grid.T)
    if scenarios is not None and scenarios.box.lo.shape != (grid.R, grid.T):
        raise FormulationError("scenario set does not match the network's DERs/horizon")
    w_arr = None if w is None else np.asarray(w, dtype=float).reshape(grid.T, 2)
    blocks: dict[int, list[BlockRef]] = {}
    owner: dict[int, np.ndarray] = {}
    for t in periods:
        exp_vals = forecast[:, t] if scenarios is None else scenarios.expected.values[:, t]
        wf = None if w_arr is None else tuple(w_arr[t])
        e = build_scenario_block(prog, grid, params, t, exp_vals, 0, w_fixed=wf)
        refs = [e]
        wh = (e.one("pcc_p"), e.one("pcc_q"))
        if scenarios is not None:
            if common_soc:
                pats, own = scenarios.period_patterns(t)
            else:
                pats = scenarios.extreme_values()[:, :, t]
                own = np.arange(len(pats))
            for k, vals in enumerate(pats):
                refs.append(build_scenario_block(prog, grid, params, t, vals, k + 1, w=wh))
            owner[t] = own
        blocks[t] = refs
    # time coupling
    for t in periods:
        for ref in blocks[t]:
            if t == 0:
                prev = None
            elif t - 1 in blocks:
                pool = blocks[t - 1]
                prev = pool[0] if ref.tag == 0 else pool[1 if common_soc else ref.tag]
            else:
                continue  # caller supplies the coupling
            build_coupling(prog, grid, params, ref, prev)
        if common_soc and grid.N:
            ext = blocks[t][1:]
            for r in ext[1:]:
                for n in range(grid.N):
                    prog.add_eq({r.idx("soc")[n]: 1.0, ext[0].idx("soc")[n]: -1.0}, 0.0,
                                name=f"soc_common_n{n}[{t + 1}][{r.tag}]")
        if cross_cones and len(blocks[t]) > 2:
            build_cross_scenario_cones(prog, grid, blocks[t][1:])
    rp = RobustProgram(grid, params, scenarios, prog, periods, blocks, owner)
    if objective == "expected_cost":
        total: dict = {}
        for t in periods:
            rp.cost_terms[t] = expected_cost_terms(prog, grid, blocks[t][0])
            _merge(total, rp.cost_terms[t])
        const = total.pop("const", 0.0)
        prog.set_objective(total, const)
    elif objective == "zero":
        prog.set_objective({})
    elif isinstance(objective, dict):
        const = objective.get("const", 0.0)
        prog.set_objective({k: v for k, v in objective.items() if k != "const"}, const)
    else:
        raise FormulationError(f"unknown objective {objective!r}")
    return rp


def _check_params_shape(grid: Grid, params: ScheduleParams) -> None:
    if params.pg_min.shape != (grid.G, grid.T) and grid.G:
        raise FormulationError("schedule parameters do not match the generators/horizon")
    if params.modes.shape != (grid.N, grid.T) and grid.N:
        raise FormulationError("schedule parameters do not match the storages/horizon")


def deterministic_dispatch(model: NetworkModel, params: ScheduleParams | None = None,
                           w=None, **kw) -> tuple[RobustProgram, Solution]:
    rp = build_robust_program(model, params, None, w=w, **kw)
    return rp, rp.solve()


def minimize_losses(rp: RobustProgram, sol: Solution, rel_slack: float = 1e-9) -> Solution:
    """Among cost-optimal points, pick the one with the least branch current.

    At a cost optimum the squared currents are free whenever losses carry no
    price (e.g. supplied through the PCC), and an interior-point solver returns
    them inflated.  This second stage caps the cost at the optimum and
    minimizes the expected blocks' sum of l, which tightens the cones when the
    relaxation is exact.  Adds rows to ``rp.prog``.
    """
    if not sol.optimal:
        raise FormulationError("loss tie-break needs an optimal first stage")
    total: dict = {}
    for t in rp.periods:
        _merge(total, rp.cost_terms.get(t, {}))
    const = total.pop("const", 0.0)
    z = sol.objective
    if total:
        rp.prog.add_le(total, z - const + rel_slack * max(1.0, abs(z)), name="cost_at_optimum")
    rp.prog.set_objective({int(i): 1.0 for t in rp.periods for i in rp.blocks[t][0].idx("l")})
    return rp.solve()
