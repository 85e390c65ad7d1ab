"""Selection of generator/SOC corridors and storage modes from the expected scenario.

The selection maximizes normalized corridor widths under the forecast
operating set, with the ramp rules and charge/discharge reachability rules
written as linear constraints on the corridor variables.  A first pass runs
with the generic SOC recursion to discover the storage modes; a second pass
fixes the modes and adds the mode-specific rules.  When the first pass does
not separate charging from discharging, all mode partitions are enumerated.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np

from .conic import ConicProgram, Solution, Status, solve
from .core import (BlockRef, Grid, Mode, ScheduleParams, build_coupling,
                   build_scenario_block)
from .network import NetworkModel

log = logging.getLogger(__name__)

ZETA = 1e-3
TOL_DUAL = 1e-8
TOL_MODE = 1e-6
MODE_CAP = 729
# corridor rules are tightened by this much (p.u.) so that dispatch inside the
# corridors, solved to ~1e-9, still meets ramp and charge limits exactly
RULE_MARGIN = 1e-6


class ParamSelectionError(RuntimeError):
    pass


class ComplementarityError(ValueError):
    """Simultaneous charge and discharge above tolerance."""


@dataclass
class ParamSelection:
    params: ScheduleParams
    objective: float                  # (A1) value, penalty included when used
    pg: np.ndarray                    # expected-scenario dispatch (G, T) MW
    pc: np.ndarray                    # (N, T) MW
    pd: np.ndarray
    soc: np.ndarray                   # (N, T) MWh
    duals: dict = field(default_factory=dict)   # (n, t) -> LMP at the storage bus, $/p.u.
    fallback: bool = False
    candidates: int = 0


@dataclass
class _Selection:
    prog: ConicProgram
    refs: list[BlockRef]
    gmin: np.ndarray
    gmax: np.ndarray
    smin: np.ndarray
    smax: np.ndarray
    balance_rows: dict
    width_terms: dict


def _selection_program(model: NetworkModel, grid: Grid, modes=None, zeta: float = ZETA,
                       margin: float = RULE_MARGIN) -> _Selection:
    T, G, N = grid.T, grid.G, grid.N
    prog = ConicProgram()
    phys = ScheduleParams.physical(model)
    forecast = np.array([d.forecast for d in model.ders]).reshape(grid.R, T)
    refs = []
    balance_rows = {}
    for t in range(T):
        first_row = prog.n_rows
        ref = build_scenario_block(prog, grid, phys, t, forecast[:, t], 0, soc_free=True)
        refs.append(ref)
        for n in range(N):
            bus = grid.order[grid.sto_pos[n]]
            name = f"balance_p_{bus}[{t + 1}][0]"
            for k in range(first_row, prog.n_rows):
                if prog.row_name(k) == name:
                    balance_rows[(n, t)] = k
                    break
        if modes is not None:
            for n in range(N):
                m = Mode(modes[n, t])
                if m is not Mode.CHARGE:
                    prog.add_eq({ref.idx("pc")[n]: 1.0}, 0.0, name=f"mode_fix_c_n{n}[{t + 1}][0]")
                if m is not Mode.DISCHARGE:
                    prog.add_eq({ref.idx("pd")[n]: 1.0}, 0.0, name=f"mode_fix_d_n{n}[{t + 1}][0]")
        build_coupling(prog, grid, phys, ref, refs[t - 1] if t else None, generic=True)
    gmin = np.array([[prog.add_var(f"Pg_min_g{g}[{t + 1}]", grid.pg_phys_min[g], grid.pg_phys_max[g])
                      for t in range(T)] for g in range(G)], dtype=int).reshape(G, T)
    gmax = np.array([[prog.add_var(f"Pg_max_g{g}[{t + 1}]", grid.pg_phys_min[g], grid.pg_phys_max[g])
                      for t in range(T)] for g in range(G)], dtype=int).reshape(G, T)
    smin = np.array([[prog.add_var(f"S_min_n{n}[{t + 1}]", grid.s_min[n], grid.s_max[n])
                      for t in range(T)] for n in range(N)], dtype=int).reshape(N, T)
    smax = np.array([[prog.add_var(f"S_max_n{n}[{t + 1}]", grid.s_min[n], grid.s_max[n])
                      for t in range(T)] for n in range(N)], dtype=int).reshape(N, T)
    for t in range(T):
        pg, soc = refs[t].idx("pg"), refs[t].idx("soc")
        sfx = f"[{t + 1}]"
        for g in range(G):
            prog.add_le({gmin[g, t]: 1.0, gmax[g, t]: -1.0}, 0.0, name=f"corridor_g{g}{sfx}")
            prog.add_le({gmin[g, t]: 1.0, pg[g]: -1.0}, 0.0, name=f"pg_above_min_g{g}{sfx}")
            prog.add_le({pg[g]: 1.0, gmax[g, t]: -1.0}, 0.0, name=f"pg_below_max_g{g}{sfx}")
            if t:
                prev = refs[t - 1].idx("pg")[g]
                prog.add_le({pg[g]: 1.0, prev: -1.0}, grid.ramp_up[g], name=f"ramp_up_g{g}{sfx}")
                prog.add_le({pg[g]: -1.0, prev: 1.0}, -grid.ramp_dn[g], name=f"ramp_dn_g{g}{sfx}")
                # R_down <= gmin_t - gmax_{t-1};  gmax_t - gmin_{t-1} <= R_up
                prog.add_le({gmax[g, t - 1]: 1.0, gmin[g, t]: -1.0}, -grid.ramp_dn[g] - margin,
                            name=f"rule_ramp_dn_g{g}{sfx}")
                prog.add_le({gmax[g, t]: 1.0, gmin[g, t - 1]: -1.0}, grid.ramp_up[g] - margin,
                            name=f"rule_ramp_up_g{g}{sfx}")
        for n in range(N):
            prog.add_le({smin[n, t]: 1.0, smax[n, t]: -1.0}, 0.0, name=f"corridor_s_n{n}{sfx}")
            prog.add_le({smin[n, t]: 1.0, soc[n]: -1.0}, 0.0, name=f"soc_above_min_n{n}{sfx}")
            prog.add_le({soc[n]: 1.0, smax[n, t]: -1.0}, 0.0, name=f"soc_below_max_n{n}{sfx}")
            # previous corridor; the initial state is a single point
            if t:
                pmin = {smin[n, t - 1]: 1.0}
                pmax = {smax[n, t - 1]: 1.0}
                c0 = 0.0
            else:
                pmin, pmax, c0 = {}, {}, grid.s_init[n]
            # (A4) S^max_{t-1} - S^min_t <= Pd_max / eta_d
            row = dict(pmax)
            row[smin[n, t]] = row.get(smin[n, t], 0.0) - 1.0
            prog.add_le(row, grid.pd_max[n] / grid.eta_d[n] - c0 - margin, name=f"rule_dis_reach_n{n}{sfx}")
            # (A5) S^max_t - S^min_{t-1} <= eta_c * Pc_max
            row = {smax[n, t]: 1.0}
            for k, v in pmin.items():
                row[k] = row.get(k, 0.0) - v
            prog.add_le(row, grid.eta_c[n] * grid.pc_max[n] + c0 - margin, name=f"rule_chg_reach_n{n}{sfx}")
            if modes is not None:
                m = Mode(modes[n, t])
                if m is Mode.CHARGE:
                    # S^min_t >= S^max_{t-1}
                    row = {smin[n, t]: -1.0}
                    for k, v in pmax.items():
                        row[k] = row.get(k, 0.0) + v
                    prog.add_le(row, -c0, name=f"rule_chg_mono_n{n}{sfx}")
                elif m is Mode.DISCHARGE:
                    # S^min_{t-1} >= S^max_t
                    row = {smax[n, t]: 1.0}
                    for k, v in pmin.items():
                        row[k] = row.get(k, 0.0) - v
                    prog.add_le(row, c0, name=f"rule_dis_mono_n{n}{sfx}")
    # objective: minimize -(A1)
    obj: dict[int, float] = {}
    width_terms: dict[int, float] = {}
    for g in range(G):
        span = grid.pg_phys_max[g] - grid.pg_phys_min[g]
        if span > 0:
            for t in range(T):
                width_terms[gmax[g, t]] = 1.0 / span
                width_terms[gmin[g, t]] = -1.0 / span
    for n in range(N):
        span = grid.s_max[n] - grid.s_min[n]
        if span > 0:
            for t in range(T):
                width_terms[smax[n, t]] = 1.0 / span
                width_terms[smin[n, t]] = -1.0 / span
    for k, v in width_terms.items():
        obj[k] = -v
    if zeta:
        for ref in refs:
            for k in np.concatenate([ref.idx("pc"), ref.idx("pd")]):
                obj[int(k)] = obj.get(int(k), 0.0) + zeta * grid.s_base
    prog.set_objective(obj)
    return _Selection(prog, refs, gmin, gmax, smin, smax, balance_rows, width_terms)


def _extract(sel: _Selection, grid: Grid, sol: Solution, modes) -> ParamSelection:
    x, sb = sol.x, grid.s_base
    pg = np.array([x[r.idx("pg")] for r in sel.refs]).T.reshape(grid.G, grid.T) * sb
    pc = np.array([x[r.idx("pc")] for r in sel.refs]).T.reshape(grid.N, grid.T) * sb
    pd = np.array([x[r.idx("pd")] for r in sel.refs]).T.reshape(grid.N, grid.T) * sb
    soc = np.array([x[r.idx("soc")] for r in sel.refs]).T.reshape(grid.N, grid.T) * sb
    params = ScheduleParams(x[sel.gmin] * sb, x[sel.gmax] * sb, x[sel.smin] * sb,
                            x[sel.smax] * sb, np.asarray(modes, dtype=int).reshape(grid.N, grid.T))
    _snap_corridors(params, grid)
    duals = {key: float(sol.duals[row]) for key, row in sel.balance_rows.items()}
    return ParamSelection(params, -sol.objective, pg, pc, pd, soc, duals)


def _snap_corridors(params: ScheduleParams, grid: Grid) -> None:
    """Clip solver noise so that (28) and (31) hold exactly."""
    sb = grid.s_base
    lo, hi = grid.pg_phys_min[:, None] * sb, grid.pg_phys_max[:, None] * sb
    params.pg_min = np.clip(params.pg_min, lo, hi)
    params.pg_max = np.clip(np.maximum(params.pg_max, params.pg_min), lo, hi)
    lo, hi = grid.s_min[:, None] * sb, grid.s_max[:, None] * sb
    params.soc_min = np.clip(params.soc_min, lo, hi)
    params.soc_max = np.clip(np.maximum(params.soc_max, params.soc_min), lo, hi)


def width_objective(params: ScheduleParams, model: NetworkModel) -> float:
    """Sum of normalized corridor widths (the (A1) objective without penalty)."""
    total = 0.0
    for g, gen in enumerate(model.generators):
        span = gen.p_phys_max - gen.p_phys_min
        if span > 0:
            total += float(np.sum(params.pg_max[g] - params.pg_min[g])) / span
    for n, st in enumerate(model.storages):
        span = st.s_phys_max - st.s_phys_min
        if span > 0:
            total += float(np.sum(params.soc_max[n] - params.soc_min[n])) / span
    return total


def derive_mode_sets(pc, pd, tol_mode: float = TOL_MODE) -> np.ndarray:
    """Charge if pc > tol, Discharge if pd > tol, else Idle; both above tol is an error."""
    pc = np.atleast_2d(np.asarray(pc, dtype=float))
    pd = np.atleast_2d(np.asarray(pd, dtype=float))
    both = (pc > tol_mode) & (pd > tol_mode)
    if np.any(both):
        n, t = np.argwhere(both)[0]
        raise ComplementarityError(
            f"storage {n} charges and discharges at period {t + 1} "
            f"({pc[n, t]:.6g}, {pd[n, t]:.6g}); relaxation is not exact here")
    modes = np.full(pc.shape, int(Mode.IDLE))
    modes[pc > tol_mode] = Mode.CHARGE
    modes[pd > tol_mode] = Mode.DISCHARGE
    return modes


def check_complementarity_duals(duals: dict, tol_dual: float = TOL_DUAL) -> tuple[bool, list]:
    """True iff every storage-bus active-balance dual is >= -tol_dual; also the flagged (n, t)."""
    flagged = sorted(k for k, v in duals.items() if v < -tol_dual)
    return not flagged, flagged


def _solve_selection(model, grid, modes, zeta, tol_feas, tol_gap):
    sel = _selection_program(model, grid, modes=modes, zeta=zeta)
    sol = solve(sel.prog, tol_feas=tol_feas, tol_gap=tol_gap)
    return sel, sol


def enumerate_mode_fallback(model: NetworkModel, candidates=None, cap: int = MODE_CAP,
                            tol_feas: float = 1e-7, tol_gap: float = 1e-7) -> ParamSelection:
    """Best mode partition by the penalty-free corridor objective.

    Candidates default to all 3^(N*T) partitions in lexicographic order
    (Idle < Charge < Discharge over (storage, period) row-major); ties keep
    the earliest candidate.
    """
    grid = Grid(model)
    N, T = grid.N, grid.T
    if candidates is None:
        count = 3 ** (N * T)
        if count > cap:
            raise ParamSelectionError(
                f"{count} mode partitions exceed the cap {cap}; use fewer storages or a shorter horizon")
        candidates = (np.array(c, dtype=int).reshape(N, T)
                      for c in itertools.product([int(m) for m in Mode], repeat=N * T))
    best = None
    n_tried = 0
    for modes in candidates:
        modes = np.asarray(modes, dtype=int).reshape(N, T)
        n_tried += 1
        sel, sol = _solve_selection(model, grid, modes, 0.0, tol_feas, tol_gap)
        if sol.status is not Status.OPTIMAL:
            log.debug("mode partition %s: %s", modes.tolist(), sol.status.name)
            continue
        res = _extract(sel, grid, sol, modes)
        if best is None or res.objective > best.objective + 1e-9 * max(1.0, abs(best.objective)):
            best = res
    if best is None:
        raise ParamSelectionError("no storage-mode partition admits a feasible selection")
    best.fallback = True
    best.candidates = n_tried
    return best


def solve_param_selection(model: NetworkModel, zeta: float = ZETA, tol_dual: float = TOL_DUAL,
                          tol_mode: float = TOL_MODE, tol_feas: float = 1e-7,
                          tol_gap: float = 1e-7, mode_cap: int = MODE_CAP) -> ParamSelection:
    if zeta <= 0:
        raise ValueError("zeta must be positive")
    grid = Grid(model)
    sel, sol = _solve_selection(model, grid, None, zeta, tol_feas, tol_gap)
    if sol.status is not Status.OPTIMAL:
        raise ParamSelectionError(
            f"the network cannot operate even at the forecast: selection program {sol.status.name}")
    first = _extract(sel, grid, sol, np.zeros((grid.N, grid.T), dtype=int))
    ok, flagged = check_complementarity_duals(first.duals, tol_dual)
    try:
        modes = derive_mode_sets(first.pc / grid.s_base, first.pd / grid.s_base, tol_mode)
    except ComplementarityError as exc:
        log.info("%s; enumerating mode partitions", exc)
        modes = None
    if not ok:
        log.info("negative storage-bus duals at %s; enumerating mode partitions", flagged)
        modes = None
    if modes is not None:
        sel2, sol2 = _solve_selection(model, grid, modes, zeta, tol_feas, tol_gap)
        if sol2.status is Status.OPTIMAL:
            out = _extract(sel2, grid, sol2, modes)
            out.duals = first.duals
            return out
        log.info("mode-fixed selection %s; enumerating mode partitions", sol2.status.name)
    out = enumerate_mode_fallback(model, cap=mode_cap, tol_feas=tol_feas, tol_gap=tol_gap)
    out.duals = first.duals
    return out


def check_rules(model: NetworkModel, params: ScheduleParams, tol: float = 1e-9) -> list[str]:
    """Arithmetic check of the corridor rules; returns human-readable violations."""
    out = []
    T = model.horizon
    for g, gen in enumerate(model.generators):
        lo, hi = params.pg_min[g], params.pg_max[g]
        for t in range(T):
            if not gen.p_phys_min - tol <= lo[t] <= hi[t] + tol <= gen.p_phys_max + 2 * tol:
                out.append(f"generator {g} period {t + 1}: corridor outside capacity")
            if t and lo[t] - hi[t - 1] < gen.ramp_down - tol:
                out.append(f"generator {g} period {t + 1}: ramp-down rule")
            if t and hi[t] - lo[t - 1] > gen.ramp_up + tol:
                out.append(f"generator {g} period {t + 1}: ramp-up rule")
    for n, st in enumerate(model.storages):
        lo, hi, modes = params.soc_min[n], params.soc_max[n], params.modes[n]
        for t in range(T):
            plo = lo[t - 1] if t else st.s_initial
            phi = hi[t - 1] if t else st.s_initial
            if not st.s_phys_min - tol <= lo[t] <= hi[t] + tol <= st.s_phys_max + 2 * tol:
                out.append(f"storage {n} period {t + 1}: corridor outside capacity")
            if phi - lo[t] > st.pd_max / st.eta_d + tol:
                out.append(f"storage {n} period {t + 1}: discharge reach rule")
            if hi[t] - plo > st.eta_c * st.pc_max + tol:
                out.append(f"storage {n} period {t + 1}: charge reach rule")
            m = Mode(modes[t])
            if m is Mode.CHARGE and lo[t] < phi - tol:
                out.append(f"storage {n} period {t + 1}: charging corridor not monotone")
            if m is Mode.DISCHARGE and hi[t] > plo + tol:
                out.append(f"storage {n} period {t + 1}: discharging corridor not monotone")
        if not lo[T - 1] - tol <= st.s_initial <= hi[T - 1] + tol:
            out.append(f"storage {n}: final corridor excludes the initial SOC")
    if np.any((params.modes < 0) | (params.modes > 2)):
        out.append("mode outside {Idle, Charge, Discharge}")
    return out
