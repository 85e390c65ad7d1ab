"""Command-line entry point: rank, params, region, cost, validate, pipeline, plotdata."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import __version__
from .core import Grid, ScheduleParams
from .cost import BidFunction, build_bid, tol_attain
from .harness import IntradayTrace, validate
from .network import NetworkError, NetworkModel, fixture_path, load_network
from .params import solve_param_selection
from .region import RegionEnvelope, compute_region
from .scenarios import DEFAULT_CAP, ScenarioSet, UncertaintyBox, enumerate_vertices, rank_ders, top_k_box

log = logging.getLogger("vppregion")

HEADER = f"# vppregion {__version__}"


@dataclass
class PipelineConfig:
    network: str = ""
    out_dir: str = "vpp_out"
    scenarios: str = "full"
    cap: int = DEFAULT_CAP
    zeta: float = 1e-3
    tol_feas: float = 1e-7
    tol_gap: float = 1e-7
    tol_area: float = 1e-3
    tol_attain: float = 1e-5
    tol_vertex: float = 1e-6
    tol_dual: float = 1e-8
    tol_mode: float = 1e-6
    max_iter: int = 20
    refinement: int = 1
    samples: int = 1000
    realizations: int = 10
    seed: int = 7
    mode: str = "recombine"
    jobs: int = 1

    def __post_init__(self):
        for f in fields(self):
            if f.name.startswith("tol_") and not getattr(self, f.name) > 0:
                raise ValueError(f"{f.name} must be positive")
        if self.cap < 1:
            raise ValueError("cap must be at least 1")
        if self.mode not in ("recombine", "resolve"):
            raise ValueError(f"unknown mode {self.mode!r}")
        parse_scenarios(self.scenarios)

    @classmethod
    def from_sources(cls, path: str | None = None, **overrides) -> "PipelineConfig":
        """Flat ``key = value`` file, then non-None overrides (flags win)."""
        types = {f.name: f.type for f in fields(cls)}
        raw: dict[str, str] = {}
        if path:
            for n, line in enumerate(Path(path).read_text().splitlines(), 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ValueError(f"{path}:{n}: expected key = value")
                k, v = (s.strip() for s in line.split("=", 1))
                k = k.replace("-", "_")
                if k not in types:
                    raise ValueError(f"{path}:{n}: unknown key {k!r}")
                raw[k] = v
        conv = {"int": int, "float": float, "str": str}
        vals = {k: conv[types[k]](v) for k, v in raw.items()}
        vals.update({k: v for k, v in overrides.items() if v is not None and k in types})
        return cls(**vals)


def parse_scenarios(spec: str) -> int | None:
    """'full' -> None; 'top-k' -> k."""
    if spec == "full":
        return None
    if spec.startswith("top-"):
        k = int(spec[4:])
        if k < 0:
            raise ValueError("top-k needs k >= 0")
        return k
    raise ValueError(f"scenarios must be 'full' or 'top-k', got {spec!r}")


def resolve_network(ref: str) -> NetworkModel:
    """A path, or the name of a shipped fixture."""
    p = Path(ref)
    if not p.exists() and fixture_path(ref).exists():
        p = fixture_path(ref)
    return load_network(p)


def scenario_set(model: NetworkModel, spec: str, cap: int = DEFAULT_CAP) -> ScenarioSet:
    box = UncertaintyBox.from_model(model)
    k = parse_scenarios(spec)
    if k is not None:
        box = top_k_box(model, box, k)
    return enumerate_vertices(box, cap)


def fmt(x) -> str:
    return f"{float(x):.9g}"


def write_csv(path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(HEADER + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v for v in r])


def read_csv(path) -> list[dict]:
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


# stages ---------------------------------------------------------------------

def stage_params(model: NetworkModel, cfg: PipelineConfig, out) -> ScheduleParams:
    sel = solve_param_selection(model, zeta=cfg.zeta, tol_dual=cfg.tol_dual, tol_mode=cfg.tol_mode,
                                tol_feas=cfg.tol_feas, tol_gap=cfg.tol_gap)
    sel.params.save(model, out)
    log.info("params: objective %.6g, fallback %s", sel.objective, sel.fallback)
    return sel.params


def stage_region(model: NetworkModel, params: ScheduleParams, cfg: PipelineConfig, out_csv,
                 params_path, network_ref: str) -> tuple[RegionEnvelope, Path]:
    sc = scenario_set(model, cfg.scenarios, cfg.cap)
    env = compute_region(model, params, sc, tol_area=cfg.tol_area, max_iter=cfg.max_iter,
                         tol_vertex=cfg.tol_vertex)
    rows = []
    for t in range(env.horizon):
        for j, v in enumerate(env.polygon(t).vertices):
            rows.append([t + 1, j, float(v[0]), float(v[1])])
    write_csv(out_csv, ["period", "vertex_index", "p_mw", "q_mvar"], rows)
    meta_path = Path(out_csv).with_name("region_meta.json")
    meta = {"version": __version__, "network": str(network_ref), "params": str(params_path),
            "scenarios": cfg.scenarios, "cap": cfg.cap, "n_extremes": len(sc.extremes),
            "areas": [env.polygon(t).area for t in range(env.horizon)],
            "search_areas": [p.areas for p in env.periods],
            "iterations": [p.iterations for p in env.periods],
            "converged": [p.converged for p in env.periods],
            "envelope": env.to_dict()}
    with open(meta_path, "w") as fh:
        json.dump(meta, fh)
    for t in range(env.horizon):
        p = env.periods[t]
        log.info("period %d: area %.6g MW*MVar, %d iterations, converged %s",
                 t + 1, env.polygon(t).area, p.iterations, p.converged)
    return env, meta_path


def load_region_meta(path) -> tuple[dict, RegionEnvelope]:
    with open(path) as fh:
        meta = json.load(fh)
    return meta, RegionEnvelope.from_dict(meta["envelope"])


def stage_cost(model: NetworkModel, meta_path, cfg: PipelineConfig, out_csv) -> tuple[BidFunction, Path]:
    meta, env = load_region_meta(meta_path)
    params = ScheduleParams.load(_near(meta["params"], meta_path), model)
    sc = scenario_set(model, meta["scenarios"], int(meta["cap"]))
    bid = build_bid(model, params, sc, env, cfg.refinement)
    bid.region_path = str(meta_path)
    rows = []
    for s in bid.surfaces:
        for w, z in zip(s.samples, s.z):
            exact = abs(s.value(w) - z) <= tol_attain(z)
            rows.append([s.t + 1, float(w[0]), float(w[1]), float(z), int(exact)])
    write_csv(out_csv, ["period", "p_mw", "q_mvar", "z_usd", "attained"], rows)
    bid.info = {"pieces": [len(s.distinct_pieces()) for s in bid.surfaces],
                "rejected": [s.rejected for s in bid.surfaces]}
    bid_path = Path(out_csv).with_name("bid.json")
    bid.save(bid_path)
    log.info("bid: epsilon %.6g $, pieces %s", bid.epsilon, bid.info["pieces"])
    return bid, bid_path


def _near(ref: str, anchor) -> Path:
    """Resolve a path stored in an artifact: as given, else next to the artifact."""
    p = Path(ref)
    if p.exists():
        return p
    q = Path(anchor).parent / p.name
    return q if q.exists() else p


def stage_validate(model: NetworkModel, bid_path, cfg: PipelineConfig, out_json,
                   traces_path=None):
    bid = BidFunction.load(bid_path)
    meta, env = load_region_meta(_near(bid.region_path, bid_path))
    params = ScheduleParams.load(_near(meta["params"], bid_path), model)
    sc = scenario_set(model, meta["scenarios"], int(meta["cap"]))
    traces: list[IntradayTrace] = []
    cov: list = []
    rep = validate(model, params, sc, env, bid, n_samples=cfg.samples,
                   n_realizations=cfg.realizations, seed=cfg.seed, mode=cfg.mode,
                   traces_out=traces, coverage_out=cov)
    d = rep.to_dict()
    d["coverage"] = [[int(i), float(b), float(z)] for i, b, z in cov]
    with open(out_json, "w") as fh:
        json.dump(d, fh, indent=1)
    if traces_path:
        grid = Grid(model)
        with open(traces_path, "w") as fh:
            for tr in traces:
                fh.write(json.dumps(tr.to_dict(grid)) + "\n")
    log.info("validate: %d/%d feasible, %d coverage failures, min margin %.6g",
             rep.n_feasible, rep.n_traces, len(rep.coverage_failures), rep.coverage_min_margin)
    return rep


def emit_plot_data(report_path, traces_path, out_dir) -> list[Path]:
    """ramps.csv, storage.csv and coverage.csv from a report and its traces."""
    for p in (report_path, traces_path):
        if not Path(p).exists():
            raise FileNotFoundError(f"missing artifact {p}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(report_path) as fh:
        rep = json.load(fh)
    ramps, store = [], []
    with open(traces_path) as fh:
        for draw, line in enumerate(fh):
            tr = json.loads(line)
            pg = np.array(tr["pg_mw"], dtype=float)
            if pg.size:
                for g, d in enumerate(np.diff(pg, axis=0).T):
                    ramps.extend([g, draw, float(v)] for v in d)
            pc = np.array(tr["charge_mw"], dtype=float)
            pd = np.array(tr["discharge_mw"], dtype=float)
            for n in range(pc.shape[1] if pc.ndim == 2 else 0):
                for t in range(pc.shape[0]):
                    store.append([n, t + 1, float(pc[t, n]), float(pd[t, n]), draw])
    paths = [out_dir / "ramps.csv", out_dir / "storage.csv", out_dir / "coverage.csv"]
    write_csv(paths[0], ["g", "draw", "delta_mw"], ramps)
    write_csv(paths[1], ["n", "t", "charge_mw", "discharge_mw", "draw"], store)
    write_csv(paths[2], ["sample", "bid_usd", "true_usd"], rep.get("coverage", []))
    return paths


def run_pipeline(cfg: PipelineConfig) -> int:
    """params -> region -> cost -> validate -> plot data; 0 iff everything passes."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stage = "load"
    try:
        model = resolve_network(cfg.network)
        stage = "params"
        params_path = out / "params.json"
        params = stage_params(model, cfg, params_path)
        stage = "region"
        _, meta_path = stage_region(model, params, cfg, out / "region.csv", params_path, cfg.network)
        stage = "cost"
        _, bid_path = stage_cost(model, meta_path, cfg, out / "cost.csv")
        stage = "validate"
        rep = stage_validate(model, bid_path, cfg, out / "report.json", out / "traces.jsonl")
        stage = "plotdata"
        emit_plot_data(out / "report.json", out / "traces.jsonl", out)
    except Exception as exc:  # noqa: BLE001 - every stage failure maps to an exit code
        log.debug("stage %s", stage, exc_info=True)
        print(f"vpp: stage {stage!r} failed: {exc}", file=sys.stderr)
        return 2
    if not rep.ok:
        print(f"vpp: validation found {rep.n_traces - rep.n_feasible} infeasible traces, "
              f"{len(rep.coverage_failures)} coverage failures", file=sys.stderr)
        return 1
    return 0


# argument parsing -------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vpp", description=__doc__)
    ap.add_argument("--version", action="version", version=f"vppregion {__version__}")
    ap.add_argument("--config", help="flat key = value file; flags override it")
    sub = ap.add_subparsers(dest="cmd", required=True)

    def net(p):
        p.add_argument("--network", help="network JSON file or fixture name")

    p = sub.add_parser("rank", help="rank DERs by uncertainty score")
    net(p)
    p.add_argument("--period", type=int, help="1-based period (default: all)")
    p.add_argument("-o", "--output", help="CSV path (default stdout)")

    p = sub.add_parser("params", help="select generator/SOC corridors and storage modes")
    net(p)
    p.add_argument("--zeta", type=float)
    p.add_argument("-o", "--output", default="params.json")

    p = sub.add_parser("region", help="compute the PCC power-transfer region")
    net(p)
    p.add_argument("--params", required=True)
    p.add_argument("--scenarios", help="full | top-k")
    p.add_argument("--cap", type=int)
    p.add_argument("--tol-area", type=float)
    p.add_argument("--max-iter", type=int)
    p.add_argument("-o", "--output", default="region.csv")

    p = sub.add_parser("cost", help="build per-period cost surfaces and epsilon")
    net(p)
    p.add_argument("--region", required=True, help="region_meta.json")
    p.add_argument("--refinement", type=int)
    p.add_argument("-o", "--output", default="cost.csv")

    p = sub.add_parser("validate", help="Monte-Carlo intraday and coverage checks")
    net(p)
    p.add_argument("--bid", required=True)
    p.add_argument("--samples", type=int)
    p.add_argument("--realizations", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", choices=["recombine", "resolve"])
    p.add_argument("--traces", help="write one trace per line (JSON)")
    p.add_argument("-o", "--output", default="report.json")

    p = sub.add_parser("pipeline", help="params, region, cost, validate and plot data")
    net(p)
    p.add_argument("--out-dir")
    p.add_argument("--scenarios")
    p.add_argument("--samples", type=int)
    p.add_argument("--realizations", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", choices=["recombine", "resolve"])
    p.add_argument("--jobs", type=int, help="worker bound (solves run sequentially)")

    p = sub.add_parser("plotdata", help="CSV bundle behind the ramp/storage/coverage plots")
    p.add_argument("--report", required=True)
    p.add_argument("--traces", required=True)
    p.add_argument("-o", "--out-dir", default=".")
    return ap


def _config(args) -> PipelineConfig:
    keys = {f.name for f in fields(PipelineConfig)}
    over = {k: v for k, v in vars(args).items() if k in keys}
    return PipelineConfig.from_sources(args.config, **over)


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("VPP_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = _parser().parse_args(argv)
    try:
        cfg = _config(args)
    except (ValueError, OSError) as exc:
        print(f"vpp: bad configuration: {exc}", file=sys.stderr)
        return 2
    if args.cmd == "pipeline":
        return run_pipeline(cfg)
    if args.cmd == "plotdata":
        try:
            emit_plot_data(args.report, args.traces, args.out_dir)
        except (OSError, ValueError, KeyError) as exc:
            print(f"vpp: stage 'plotdata' failed: {exc}", file=sys.stderr)
            return 2
        return 0
    stage = "load"
    try:
        if not cfg.network:
            raise NetworkError("no network given (--network or config key 'network')")
        model = resolve_network(cfg.network)
        stage = args.cmd
        if args.cmd == "rank":
            box = UncertaintyBox.from_model(model)
            periods = range(model.horizon) if args.period is None else [args.period - 1]
            rows = [(der, t + 1, sc) for t in periods for der, sc in rank_ders(model, box, t)]
            rows.sort(key=lambda r: (-r[2], r[0], r[1]))
            if args.output:
                write_csv(args.output, ["der_id", "period", "score"], rows)
            else:
                print("der_id,period,score")
                for der, t, sc in rows:
                    print(f"{der},{t},{fmt(sc)}")
        elif args.cmd == "params":
            stage_params(model, cfg, args.output)
        elif args.cmd == "region":
            params = ScheduleParams.load(args.params, model)
            stage_region(model, params, cfg, args.output, args.params, cfg.network)
        elif args.cmd == "cost":
            stage_cost(model, args.region, cfg, args.output)
        elif args.cmd == "validate":
            rep = stage_validate(model, args.bid, cfg, args.output, args.traces)
            return 0 if rep.ok else 1
    except Exception as exc:  # noqa: BLE001
        log.debug("stage %s", stage, exc_info=True)
        print(f"vpp: stage {stage!r} failed: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
