"""Acceptance criteria 1-12; each test records one PASS/FAIL line for the terminal summary."""
from __future__ import annotations

import time

import numpy as np
import pytest

from conftest import record
from helpers import brute_force_hull_vertices
from vppregion.cli import main
from vppregion.core import build_robust_program, deterministic_dispatch, minimize_losses
from vppregion.cost import EnvelopeCostProgram, TrueCostProgram, cost_at_point
from vppregion.geometry import TOL_VERTEX, convex_hull_2d, hausdorff
from vppregion.harness import TOL_RESIDUAL, sample_envelope, validate
from vppregion.network import load_fixture
from vppregion.params import solve_param_selection
from vppregion.region import TOL_AREA, compute_region
from vppregion.scenarios import UncertaintyBox, enumerate_vertices, top_k_box

N_SAMPLES = 1000
N_REAL = 10
TIME_BUDGET_S = 300.0


@pytest.fixture(scope="module")
def run(three_bus):
    b = three_bus
    t0 = time.perf_counter()
    rep = validate(b.model, b.params, b.scenarios, b.envelope, b.bid, n_samples=N_SAMPLES,
                   n_realizations=N_REAL, seed=7, mode="recombine")
    return rep, time.perf_counter() - t0


@pytest.fixture(scope="module")
def feeder():
    """Feeder regions under zero, top-1 and full uncertainty (the full box is the slow one)."""
    m = load_fixture("feeder_5der")
    p = solve_param_selection(m).params
    box = UncertaintyBox.from_model(m)
    out = {}
    for name, k in (("zero", 0), ("top-1", 1), ("full", None)):
        sc = enumerate_vertices(box if k is None else top_k_box(m, box, k))
        out[name] = (sc, compute_region(m, p, sc))
    return m, p, out


def test_c01_robust_recombination(run):
    rep, secs = run
    worst = max(rep.max_residual.values())
    ok = (rep.n_traces == N_SAMPLES * N_REAL and rep.n_feasible == rep.n_traces
          and worst <= TOL_RESIDUAL and secs <= TIME_BUDGET_S)
    record(1, ok, f"{rep.n_feasible}/{rep.n_traces} feasible traces, max residual "
                  f"{worst:.3g} p.u., {secs:.1f} s")
    assert ok


def test_c02_ramp_and_storage_limits(run):
    rep, _ = run
    ok = rep.ramp_violations == 0 and rep.charge_violations == 0
    record(2, ok, f"ramp violations {rep.ramp_violations}, charge/discharge violations "
                  f"{rep.charge_violations} (tol 1e-8); ramps in "
                  f"[{rep.ramp_min_mw:.4g}, {rep.ramp_max_mw:.4g}] MW")
    assert ok


def test_c03_bid_coverage(run):
    rep, _ = run
    ok = not rep.coverage_failures and rep.epsilon >= rep.max_uncovered - 1e-6
    record(3, ok, f"min(bid - z) = {rep.coverage_min_margin:.6g} $, epsilon {rep.epsilon:.6g} $ "
                  f">= max uncovered {rep.max_uncovered:.6g} $, {len(rep.coverage_failures)} "
                  "failures")
    assert ok


def _inner_check(model, params, scenarios, env, n_random, seed=0):
    prog = TrueCostProgram(model, params, scenarios)
    bad, checked = [], 0
    for t in range(env.horizon):
        for v in env.polygon(t).vertices:
            w = np.full((env.horizon, 2), np.nan)
            w[t] = v
            cert = env.membership(w)
            checked += 1
            if not cert.feasible or not prog(cert.w).optimal:
                bad.append(("vertex", t, v.tolist()))
    for s in sample_envelope(env, n_random, seed=seed):
        checked += 1
        if not prog(s.w).optimal:
            bad.append(("sample", s.index))
    return checked, bad


def test_c04_inner_approximation(three_bus, toy, feeder):
    lines, all_bad = [], []
    for name, b in (("3-bus", three_bus), ("toy", toy)):
        n, bad = _inner_check(b.model, b.params, b.scenarios, b.envelope, 200)
        lines.append(f"{name} {n - len(bad)}/{n}")
        all_bad += bad
    m, p, regions = feeder
    for key in ("top-1", "full"):
        sc, env = regions[key]
        n, bad = _inner_check(m, p, sc, env, 200 if key == "top-1" else 20)
        lines.append(f"feeder {key} {n - len(bad)}/{n}")
        all_bad += bad
    ok = not all_bad
    record(4, ok, "w-fixed robust program optimal: " + ", ".join(lines))
    assert ok, all_bad[:5]


def test_c05_hull_oracle_and_area_monotone(three_bus, toy, feeder):
    rng = np.random.default_rng(2024)
    mismatches = 0
    for k in range(100):
        n = int(rng.integers(3, 501))
        kind = k % 3
        if kind == 0:
            pts = rng.normal(size=(n, 2))
        elif kind == 1:
            a = rng.uniform(0, 2 * np.pi, n)
            pts = np.column_stack([np.cos(a), np.sin(a)]) * rng.uniform(0.5, 1.0, (n, 1))
        else:
            pts = rng.integers(-6, 7, size=(n, 2)).astype(float)   # many collinear/duplicate points
        got = convex_hull_2d(pts, TOL_VERTEX).vertices
        want = brute_force_hull_vertices(pts, TOL_VERTEX)
        key = lambda a: sorted(map(tuple, np.round(a, 9)))
        mismatches += key(got) != key(want)
    seqs = [p.areas for b in (three_bus, toy) for p in b.envelope.periods]
    seqs += [p.areas for _, env in feeder[2].values() for p in env.periods]
    monotone = all(np.all(np.diff(a) >= 0.0) for a in seqs)
    ok = mismatches == 0 and monotone
    record(5, ok, f"hull vs brute force: {100 - mismatches}/100 sets equal; "
                  f"{len(seqs)} area sequences nondecreasing: {monotone}")
    assert ok


def test_c06_toy_rectangle(toy):
    rect = convex_hull_2d([[-7.0, -3.0], [3.0, -3.0], [3.0, 5.0], [-7.0, 5.0]])
    d = hausdorff(toy.envelope.polygon(0), rect) / toy.model.s_base
    ok = d <= 1e-4
    record(6, ok, f"Hausdorff distance to the analytic rectangle {d:.3g} p.u.")
    assert ok


def test_c07_uncertainty_monotone(feeder):
    _, _, regions = feeder
    a = {k: env.total_area for k, (_, env) in regions.items()}
    tol = TOL_AREA * a["zero"]
    ok = a["top-1"] <= a["zero"] + tol and a["full"] <= a["top-1"] + tol
    record(7, ok, f"areas zero {a['zero']:.6g}, top-1 {a['top-1']:.6g}, full {a['full']:.6g} "
                  f"MW*MVar (tol {tol:.3g})")
    assert ok


def test_c08_cost_convexity(three_bus):
    b = three_bus
    prog = EnvelopeCostProgram(b.model, b.params, b.scenarios, b.envelope)
    samples = sample_envelope(b.envelope, 200, seed=8)
    worst, n = -np.inf, 0
    for t in range(b.envelope.horizon):
        for k in range(100):
            w1, w2 = samples[2 * k].w[t], samples[2 * k + 1].w[t]
            z1, z2 = cost_at_point(prog, t, w1), cost_at_point(prog, t, w2)
            zm = cost_at_point(prog, t, (w1 + w2) / 2)
            assert z1.attained and z2.attained and zm.attained
            excess = zm.z - 0.5 * (z1.z + z2.z) - 1e-5 * max(1.0, abs(zm.z))
            worst = max(worst, excess)
            n += 1
    ok = worst <= 0.0 and n == 200
    record(8, ok, f"{n} midpoint tests over {b.envelope.horizon} periods, worst excess "
                  f"{worst:.3g} $ beyond tolerance")
    assert ok


def _collapsed(name):
    m = load_fixture(name)
    box = UncertaintyBox.from_model(m)
    flat = UncertaintyBox(box.der_ids, box.forecast, box.forecast, box.forecast)
    return m, enumerate_vertices(flat)


def test_c09_degenerate_box():
    lines, ok = [], True
    for name in ("three_bus", "lossless_toy", "feeder_5der"):
        m, sc = _collapsed(name)
        p = solve_param_selection(m).params
        robust = build_robust_program(m, p, sc).solve()
        _, det = deterministic_dispatch(m, p)
        rel = abs(robust.objective - det.objective) / max(1.0, abs(det.objective))
        ok &= robust.optimal and det.optimal and rel <= 1e-6
        lines.append(f"{name} {robust.objective:.9g} vs {det.objective:.9g} (rel {rel:.2g})")
    record(9, ok, "; ".join(lines))
    assert ok


def test_c10_epsilon_zero(toy):
    scale = max(1.0, float(max(np.max(np.abs(s.z)) for s in toy.bid.surfaces)))
    ok = abs(toy.bid.epsilon) <= 1e-5 * scale
    record(10, ok, f"epsilon {toy.bid.epsilon:.3g} $ (bound {1e-5 * scale:.3g} $)")
    assert ok


def test_c11_cone_gap():
    lines, worst = [], 0.0
    for name in ("three_bus", "lossless_toy", "feeder_5der"):
        m = load_fixture(name)
        p = solve_param_selection(m).params
        rp, sol = deterministic_dispatch(m, p)
        g1 = rp.max_cone_gap(minimize_losses(rp, sol), tags=[0])
        sc = enumerate_vertices(top_k_box(m, UncertaintyBox.from_model(m), 2))
        rp = build_robust_program(m, p, sc)
        g2 = rp.max_cone_gap(minimize_losses(rp, rp.solve()), tags=[0])
        worst = max(worst, g1, g2)
        lines.append(f"{name} {max(g1, g2):.2g}")
    ok = worst <= 1e-4
    record(11, ok, f"max cone gap {worst:.3g} p.u. (" + ", ".join(lines) + ")")
    assert ok


def test_c12_determinism(tmp_path):
    args = ["--network", "three_bus", "--samples", "50", "--realizations", "3", "--seed", "12"]
    codes = [main(["pipeline", *args, "--out-dir", str(tmp_path / d)]) for d in ("a", "b")]
    names = sorted(p.name for p in (tmp_path / "a").glob("*.csv"))
    same = [(tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()
            for n in names]
    ok = codes == [0, 0] and len(names) == 5 and all(same)
    record(12, ok, f"{sum(same)}/{len(names)} CSV artifacts byte-identical ({', '.join(names)})")
    assert ok
