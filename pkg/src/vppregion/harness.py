"""Monte-Carlo checks of intraday operation inside the envelope.

A certified schedule w comes with envelope weights mu.  The period-t scenario
solutions for w are ``Y_t = sum_j mu_tj Y_t^(j)``; when the renewables are
observed at t, the intraday decision is the convex combination of the
extreme-block rows of Y_t with multilinear weights that reproduce the
observation.  Residuals are per-unit.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from .conic import Status, solve
from .core import (Grid, ScheduleParams, build_coupling, build_robust_program, build_scenario_block,
                   deterministic_dispatch, minimize_losses)
from .cost import BidFunction, TrueCostProgram, evaluate_bid
from .network import NetworkModel
from .region import MembershipCertificate, RegionEnvelope
from .scenarios import ScenarioSet

log = logging.getLogger(__name__)

TOL_RESIDUAL = 1e-6
TOL_LIMIT = 1e-8
FAMILIES = ("balance_p", "balance_q", "voltage_drop", "flow_bounds", "cone", "gen_p_bounds",
            "gen_q_bounds", "voltage_bounds", "pcc_p_band", "pcc_q_band", "soc_bounds",
            "charge_limit", "discharge_limit", "cyclic", "complementarity", "ramp",
            "soc_recursion")


UNITLESS = ("voltage_drop", "cone", "voltage_bounds")


class HarnessError(RuntimeError):
    pass


@dataclass
class EnvelopeSample:
    index: int
    w: np.ndarray                      # (T, 2) MW
    certificate: MembershipCertificate


def sample_envelope(envelope: RegionEnvelope, n: int, seed: int = 0,
                    max_retries: int = 20) -> list[EnvelopeSample]:
    """n certified schedules: Dirichlet weights per period, repaired onto the coupling by an L1 LP."""
    rng = np.random.default_rng(seed)
    A, b, offs = envelope.coupling_rows()
    m = A.shape[1]
    out = []
    for i in range(n):
        for _ in range(max_retries):
            draw = np.concatenate([rng.dirichlet(np.ones(offs[t + 1] - offs[t]))
                                   for t in range(envelope.horizon)])
            if np.max(np.abs(A @ draw - b), initial=0.0) <= 1e-12:
                mu = draw
            else:
                # min sum d  s.t. A mu = b, -d <= mu - draw <= d, mu >= 0
                c = np.concatenate([np.zeros(m), np.ones(m)])
                eye = np.eye(m)
                A_ub = np.block([[eye, -eye], [-eye, -eye]])
                b_ub = np.concatenate([draw, -draw])
                A_eq = np.hstack([A, np.zeros_like(A)])
                res = linprog(c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b,
                              bounds=[(0, None)] * (2 * m), method="highs",
                              options={"primal_feasibility_tolerance": 1e-10})
                if res.status != 0:
                    continue
                mu = res.x[:m]
            cert = envelope.certificate(mu, offs)
            if cert.feasible:
                out.append(EnvelopeSample(i, cert.w, cert))
                break
        else:
            raise HarnessError(f"sample {i}: coupling repair failed after {max_retries} draws")
    return out


def recombination_weights(scenarios: ScenarioSet, obs_t, t: int, tol: float = 1e-9) -> np.ndarray:
    """Multilinear weights over the extreme scenarios for the period-t observation.

    Free coordinates of period t contribute theta or 1 - theta; free
    coordinates of other periods contribute 1/2 (the decision at t does not
    depend on them); zero-width coordinates contribute 1.
    """
    box = scenarios.box
    obs_t = np.asarray(obs_t, dtype=float).reshape(-1)
    lo, hi = box.lo[:, t], box.hi[:, t]
    if np.any(obs_t < lo - tol) or np.any(obs_t > hi + tol):
        raise HarnessError(f"realization at period {t + 1} lies outside the uncertainty box")
    coords = box.free_coords()
    lam = np.ones(len(scenarios.extremes))
    bits = np.array([s.bits for s in scenarios.extremes], dtype=int).reshape(len(lam), len(coords))
    for c, (r, tau) in enumerate(coords):
        if tau != t:
            lam *= 0.5
            continue
        theta = float(np.clip((obs_t[r] - box.lo[r, t]) / (box.hi[r, t] - box.lo[r, t]), 0.0, 1.0))
        lam *= np.where(bits[:, c] == 1, theta, 1.0 - theta)
    return lam


def pattern_weights(lam: np.ndarray, owner: np.ndarray) -> np.ndarray:
    """Sum scenario weights onto the period's distinct-pattern blocks."""
    out = np.zeros(int(owner.max()) + 1 if len(owner) else 0)
    np.add.at(out, owner, lam)
    return out


def recombine(lam: np.ndarray, solutions: np.ndarray) -> np.ndarray:
    """x_t = sum_s lam_s x_{t,s}; ``solutions`` has one row per scenario (or pattern)."""
    lam = np.asarray(lam, dtype=float)
    solutions = np.asarray(solutions, dtype=float)
    if solutions.shape[0] != lam.shape[-1]:
        raise HarnessError(f"{lam.shape[-1]} weights for {solutions.shape[0]} scenario solutions")
    return lam @ solutions


def constraint_residuals(grid: Grid, params: ScheduleParams, t: int, x, obs_t, w_t,
                         x_prev=None, mw: bool = False) -> dict[str, np.ndarray]:
    """Max violation per constraint family for a batch of block vectors ``x`` (n, size).

    Residuals are per-unit; ``mw=True`` scales power and energy families to
    MW/MVar/MWh (voltage, voltage drop and cone stay per-unit).
    ``x_prev`` holds the previous period's decisions (None at t = 0).
    ``w_t`` is the day-ahead schedule in MW/MVar.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    obs_t = np.atleast_2d(np.asarray(obs_t, dtype=float))
    n = x.shape[0]
    sl = grid.layout.slices
    sb = grid.s_base
    pcc_p, pcc_q = x[:, sl["pcc_p"]][:, 0], x[:, sl["pcc_q"]][:, 0]
    pg, qg, pf, qf = x[:, sl["pg"]], x[:, sl["qg"]], x[:, sl["pf"]], x[:, sl["qf"]]
    v, l, soc, pc, pd = x[:, sl["v"]], x[:, sl["l"]], x[:, sl["soc"]], x[:, sl["pc"]], x[:, sl["pd"]]
    dem_p = np.zeros((n, grid.nb))
    dem_q = np.zeros((n, grid.nb))
    vals = np.broadcast_to(obs_t, (n, grid.R)) / sb
    for k, j in enumerate(grid.der_pos):
        dem_p[:, j] += vals[:, k]
        dem_q[:, j] += grid.tanb[k] * vals[:, k]
    inj_p = np.zeros((n, grid.nb))
    inj_q = np.zeros((n, grid.nb))
    inj_p[:, grid.root] += pcc_p
    inj_q[:, grid.root] += pcc_q
    for g, j in enumerate(grid.gen_pos):
        inj_p[:, j] += pg[:, g]
        inj_q[:, j] += qg[:, g]
    for s, j in enumerate(grid.sto_pos):
        inj_p[:, j] += pd[:, s] - pc[:, s]
    for k in range(grid.nbr):
        i, j = grid.br_from[k], grid.br_to[k]
        inj_p[:, j] += pf[:, k] - grid.r[k] * l[:, k]
        inj_q[:, j] += qf[:, k] - grid.x[k] * l[:, k]
        inj_p[:, i] -= pf[:, k]
        inj_q[:, i] -= qf[:, k]

    def mx(a):
        a = np.asarray(a, dtype=float).reshape(n, -1)
        return np.max(np.maximum(a, 0.0), axis=1, initial=0.0)

    vi = v[:, grid.br_from]
    vj = v[:, grid.br_to]
    z2 = grid.r ** 2 + grid.x ** 2
    res = {
        "balance_p": mx(np.abs(inj_p - dem_p)),
        "balance_q": mx(np.abs(inj_q - dem_q)),
        "voltage_drop": mx(np.abs(vj - vi + 2 * (grid.r * pf + grid.x * qf) - z2 * l)),
        "flow_bounds": mx(np.maximum(grid.fmin - pf, pf - grid.fmax)),
        "cone": mx(np.maximum(pf ** 2 + qf ** 2 - vi * l, -l)),
        "gen_p_bounds": mx(np.maximum(params.pg_min[:, t] / sb - pg, pg - params.pg_max[:, t] / sb)),
        "gen_q_bounds": mx(np.maximum(grid.qg_min - qg, qg - grid.qg_max)),
        "voltage_bounds": mx(np.maximum(grid.vmin - v, v - grid.vmax)),
        "pcc_p_band": mx(np.abs(pcc_p - w_t[0] / sb) - grid.dp),
        "pcc_q_band": mx(np.abs(pcc_q - w_t[1] / sb) - grid.dq),
        "soc_bounds": mx(np.maximum(grid.s_min - soc, soc - grid.s_max)),
        "charge_limit": mx(np.maximum(-pc, pc - grid.pc_max)),
        "discharge_limit": mx(np.maximum(-pd, pd - grid.pd_max)),
        "cyclic": mx(np.abs(soc - grid.s_init)) if t == grid.T - 1 else np.zeros(n),
        "complementarity": mx(np.minimum(pc, pd)),
    }
    if x_prev is None:
        res["ramp"] = np.zeros(n)
        prev_soc = np.broadcast_to(grid.s_init, soc.shape)
    else:
        x_prev = np.atleast_2d(x_prev)
        dpg = pg - x_prev[:, sl["pg"]]
        res["ramp"] = mx(np.maximum(grid.ramp_dn - dpg, dpg - grid.ramp_up))
        prev_soc = x_prev[:, sl["soc"]]
    res["soc_recursion"] = mx(np.abs(soc - prev_soc - grid.eta_c * pc + pd / grid.eta_d))
    if mw:
        for f in res:
            if f not in UNITLESS:
                res[f] = res[f] * sb
    return res


@dataclass
class IntradayTrace:
    sample: int
    stream: int
    lam: list                  # per period: weights over the extreme scenarios
    x: np.ndarray              # (T, size) realized decisions, p.u.
    residuals: dict            # family -> max over periods
    feasible: bool

    def to_dict(self, grid: Grid) -> dict:
        sl = grid.layout.slices
        sb = grid.s_base
        return {"sample": self.sample, "stream": self.stream, "feasible": self.feasible,
                "residuals": {k: float(v) for k, v in self.residuals.items()},
                "pg_mw": (self.x[:, sl["pg"]] * sb).tolist(),
                "charge_mw": (self.x[:, sl["pc"]] * sb).tolist(),
                "discharge_mw": (self.x[:, sl["pd"]] * sb).tolist(),
                "pcc_mw": (self.x[:, sl["pcc_p"]] * sb).ravel().tolist()}


def draw_realizations(scenarios: ScenarioSet, n: int, rng: np.random.Generator) -> np.ndarray:
    """n uniform draws from the box, shape (n, n_der, T)."""
    box = scenarios.box
    u = rng.random((n,) + box.lo.shape)
    return box.lo + u * (box.hi - box.lo)


def period_solutions(envelope: RegionEnvelope, cert: MembershipCertificate, t: int) -> np.ndarray:
    """Scenario solutions for the certified schedule at period t: sum_j mu_j Y^(j)."""
    Ys = np.stack([s.y for s in envelope.periods[t].solutions])
    return np.tensordot(cert.mu[t], Ys, axes=1)


def simulate_recombine(grid: Grid, params: ScheduleParams, scenarios: ScenarioSet,
                       envelope: RegionEnvelope, sample: EnvelopeSample,
                       realizations: np.ndarray) -> list[IntradayTrace]:
    """Rolling recombination for one schedule and a batch of streams (n, n_der, T)."""
    realizations = np.asarray(realizations, dtype=float)
    n = realizations.shape[0]
    T = grid.T
    xs = np.zeros((n, T, grid.layout.size))
    lams = [[None] * T for _ in range(n)]
    worst = {f: np.zeros(n) for f in FAMILIES}
    for t in range(T):
        Yt = period_solutions(envelope, sample.certificate, t)
        owner = envelope.periods[t].owner
        ext = Yt[1:]
        for k in range(n):
            lam = recombination_weights(scenarios, realizations[k, :, t], t)
            lams[k][t] = lam
            xs[k, t] = recombine(pattern_weights(lam, owner), ext)
        res = constraint_residuals(grid, params, t, xs[:, t], realizations[:, :, t], sample.w[t],
                                   xs[:, t - 1] if t else None)
        for f in FAMILIES:
            worst[f] = np.maximum(worst[f], res[f])
    out = []
    for k in range(n):
        r = {f: float(worst[f][k]) for f in FAMILIES}
        out.append(IntradayTrace(sample.index, k, [np.asarray(l) for l in lams[k]], xs[k], r,
                                 max(r.values()) <= TOL_RESIDUAL))
    return out


def resolve_step(model: NetworkModel, grid: Grid, params: ScheduleParams, scenarios: ScenarioSet,
                 w, t: int, obs_t, x_prev=None) -> np.ndarray | None:
    """Feasible period-t decision for the observation, with the robust tail t+1..T.

    Zero objective; storage modes fixed; previous SOC and generator output pinned.
    Returns the realized block vector, or None when the program is not Optimal.
    """
    w = np.asarray(w, dtype=float).reshape(grid.T, 2)
    rp = build_robust_program(model, params, scenarios, w=w, objective="zero",
                              periods=range(t, grid.T), grid=grid)
    prog = rp.prog
    sl = grid.layout.slices
    prev_soc = grid.s_init if x_prev is None else x_prev[sl["soc"]]
    const = [{"const": float(s)} for s in prev_soc]
    if t > 0:
        for ref in rp.blocks[t][1:]:
            build_coupling(prog, grid, params, ref, const)
    wh = rp.w_index(t)
    real = build_scenario_block(prog, grid, params, t, obs_t, 10_000, w=wh)
    build_coupling(prog, grid, params, real, None if t == 0 else const)
    ext = rp.blocks[t][1] if len(rp.blocks[t]) > 1 else None
    if ext is not None:
        for n in range(grid.N):
            prog.add_eq({real.idx("soc")[n]: 1.0, ext.idx("soc")[n]: -1.0}, 0.0,
                        name=f"realized_soc_n{n}")
    if x_prev is not None:
        for g, k in enumerate(real.idx("pg")):
            prev = float(x_prev[sl["pg"]][g])
            prog.add_le({int(k): 1.0}, prev + grid.ramp_up[g], name=f"ramp_up_real_g{g}")
            prog.add_le({int(k): -1.0}, -(prev + grid.ramp_dn[g]), name=f"ramp_dn_real_g{g}")
    sol = solve(prog)
    if sol.status is not Status.OPTIMAL:
        return None
    return sol.x[real.span].copy()


def simulate_resolve(model: NetworkModel, grid: Grid, params: ScheduleParams,
                     scenarios: ScenarioSet, sample: EnvelopeSample, stream: np.ndarray,
                     stream_index: int = 0) -> IntradayTrace:
    T = grid.T
    xs = np.zeros((T, grid.layout.size))
    worst = {f: 0.0 for f in FAMILIES}
    feasible = True
    prev = None
    for t in range(T):
        x = resolve_step(model, grid, params, scenarios, sample.w, t, stream[:, t], prev)
        if x is None:
            log.warning("sample %d stream %d: period %d resolve failed", sample.index,
                        stream_index, t + 1)
            feasible = False
            worst = {f: np.inf for f in FAMILIES}
            break
        xs[t] = x
        res = constraint_residuals(grid, params, t, x, stream[:, t], sample.w[t], prev)
        for f in FAMILIES:
            worst[f] = max(worst[f], float(res[f][0]))
        prev = x
    feasible = feasible and max(worst.values()) <= TOL_RESIDUAL
    return IntradayTrace(sample.index, stream_index, [], xs, worst, feasible)


def rolling_simulate(model: NetworkModel, params: ScheduleParams, scenarios: ScenarioSet,
                     envelope: RegionEnvelope, sample: EnvelopeSample, realizations,
                     mode: str = "recombine", grid: Grid | None = None) -> list[IntradayTrace]:
    grid = grid or Grid(model)
    realizations = np.asarray(realizations, dtype=float).reshape(-1, grid.R, grid.T)
    if mode == "recombine":
        return simulate_recombine(grid, params, scenarios, envelope, sample, realizations)
    if mode == "resolve":
        return [simulate_resolve(model, grid, params, scenarios, sample, r, k)
                for k, r in enumerate(realizations)]
    raise ValueError(f"unknown mode {mode!r}")


@dataclass
class CoverageReport:
    bid: np.ndarray              # (n,) $
    true: np.ndarray             # (n,) $
    surface_sum: np.ndarray      # (n,) sum_t zhat_t, $
    failures: list = field(default_factory=list)

    @property
    def min_margin(self) -> float:
        return float(np.min(self.bid - self.true, initial=np.inf))

    @property
    def max_uncovered(self) -> float:
        """Empirical max of z_true - sum_t zhat_t (what epsilon must cover)."""
        return float(np.max(self.true - self.surface_sum, initial=-np.inf))


def cost_coverage_check(bid: BidFunction, samples: list[EnvelopeSample],
                        true_cost: TrueCostProgram) -> CoverageReport:
    b, z, zs, fails = [], [], [], []
    for s in samples:
        sol = true_cost(s.w)
        if not sol.optimal:
            fails.append((s.index, f"true-cost solve {sol.status.name}"))
            b.append(np.nan)
            z.append(np.nan)
            zs.append(np.nan)
            continue
        val = evaluate_bid(bid, s.w)
        b.append(val)
        z.append(sol.objective)
        zs.append(val - bid.epsilon)
        if val - sol.objective < -1e-6 * max(1.0, abs(sol.objective)):
            fails.append((s.index, f"bid {val:.9g} below true cost {sol.objective:.9g}"))
    return CoverageReport(np.array(b), np.array(z), np.array(zs), fails)


@dataclass
class ValidationReport:
    n_samples: int
    n_realizations: int
    seed: int
    mode: str
    n_traces: int = 0
    n_feasible: int = 0
    max_residual: dict = field(default_factory=dict)
    ramp_min_mw: float = 0.0
    ramp_max_mw: float = 0.0
    ramp_violations: int = 0
    charge_violations: int = 0
    max_charge_mw: float = 0.0
    max_discharge_mw: float = 0.0
    coverage_failures: list = field(default_factory=list)
    coverage_min_margin: float = float("nan")
    max_uncovered: float = float("nan")
    epsilon: float = float("nan")
    boundary_cone_gap: float = 0.0
    dispatch_cone_gap: float = float("nan")
    infeasible: list = field(default_factory=list)

    @property
    def feasibility_rate(self) -> float:
        return self.n_feasible / self.n_traces if self.n_traces else 0.0

    @property
    def ok(self) -> bool:
        return (self.n_feasible == self.n_traces and not self.coverage_failures
                and self.ramp_violations == 0 and self.charge_violations == 0)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["feasibility_rate"] = self.feasibility_rate
        d["ok"] = self.ok
        return json.loads(json.dumps(d, default=float))


def validate(model: NetworkModel, params: ScheduleParams, scenarios: ScenarioSet,
             envelope: RegionEnvelope, bid: BidFunction | None, n_samples: int = 1000,
             n_realizations: int = 10, seed: int = 7, mode: str = "recombine",
             traces_out: list | None = None, coverage_out: list | None = None) -> ValidationReport:
    """Sample schedules, run rolling traces and (with a bid) the coverage check."""
    grid = Grid(model)
    rng = np.random.default_rng(seed)
    samples = sample_envelope(envelope, n_samples, seed)
    rep = ValidationReport(n_samples, n_realizations, seed, mode)
    worst = {f: 0.0 for f in FAMILIES}
    sl = grid.layout.slices
    sb = grid.s_base
    ramp_lo, ramp_hi = np.inf, -np.inf
    for s in samples:
        streams = draw_realizations(scenarios, n_realizations, rng)
        traces = rolling_simulate(model, params, scenarios, envelope, s, streams, mode, grid)
        for tr in traces:
            rep.n_traces += 1
            rep.n_feasible += tr.feasible
            if not tr.feasible:
                rep.infeasible.append([tr.sample, tr.stream])
            for f in FAMILIES:
                worst[f] = max(worst[f], tr.residuals[f])
            if tr.residuals["ramp"] > TOL_LIMIT:
                rep.ramp_violations += 1
            if max(tr.residuals["charge_limit"], tr.residuals["discharge_limit"]) > TOL_LIMIT:
                rep.charge_violations += 1
            if grid.T > 1 and grid.G:
                d = np.diff(tr.x[:, sl["pg"]], axis=0) * sb
                ramp_lo, ramp_hi = min(ramp_lo, float(d.min())), max(ramp_hi, float(d.max()))
            if grid.N:
                rep.max_charge_mw = max(rep.max_charge_mw, float(tr.x[:, sl["pc"]].max() * sb))
                rep.max_discharge_mw = max(rep.max_discharge_mw, float(tr.x[:, sl["pd"]].max() * sb))
            if traces_out is not None:
                traces_out.append(tr)
    rep.max_residual = worst
    if np.isfinite(ramp_lo):
        rep.ramp_min_mw, rep.ramp_max_mw = ramp_lo, ramp_hi
    rp, sol = deterministic_dispatch(model, params)
    if sol.optimal:
        rep.dispatch_cone_gap = rp.max_cone_gap(minimize_losses(rp, sol), tags=[0])
    rep.boundary_cone_gap = float(max((s.cone_gap for p in envelope.periods for s in p.solutions),
                                 default=0.0))
    if bid is not None:
        cov = cost_coverage_check(bid, samples, TrueCostProgram(model, params, scenarios, grid))
        rep.coverage_failures = [list(f) for f in cov.failures]
        rep.coverage_min_margin = cov.min_margin
        rep.max_uncovered = cov.max_uncovered
        rep.epsilon = bid.epsilon
        if rep.max_uncovered > bid.epsilon + 1e-6:
            rep.coverage_failures.append([-1, f"epsilon {bid.epsilon:.9g} below empirical "
                                              f"max uncovered cost {rep.max_uncovered:.9g}"])
        if coverage_out is not None:
            coverage_out.extend(zip(range(len(samples)), cov.bid.tolist(), cov.true.tolist()))
    return rep
