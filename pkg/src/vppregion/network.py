"""VPP network data model: radial feeder, devices, PCC limits and JSON I/O."""
from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np


class NetworkError(ValueError):
    """A network file violates one of the model invariants."""


class NetworkParseError(NetworkError):
    """A network file could not be parsed."""


class RadialityError(NetworkError):
    """The branch set is not a tree rooted at the PCC bus."""


@dataclass(frozen=True)
class Bus:
    id: int
    v_sq_min: float
    v_sq_max: float


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    p_min: float
    p_max: float


@dataclass(frozen=True)
class Generator:
    bus: int
    p_phys_min: float
    p_phys_max: float
    q_min: float
    q_max: float
    ramp_down: float
    ramp_up: float
    cost_pieces: tuple[tuple[float, float], ...]

    def cost_lines(self) -> list[tuple[float, float]]:
        """(slope, intercept) of every affine piece, in $/MWh and $/h."""
        lines = []
        for (p0, c0), (p1, c1) in zip(self.cost_pieces[:-1], self.cost_pieces[1:]):
            slope = (c1 - c0) / (p1 - p0)
            lines.append((slope, c0 - slope * p0))
        return lines

    def cost(self, p_mw: float) -> float:
        return max(a * p_mw + b for a, b in self.cost_lines())


@dataclass(frozen=True)
class Storage:
    bus: int
    eta_c: float
    eta_d: float
    pc_max: float
    pd_max: float
    s_phys_min: float
    s_phys_max: float
    s_initial: float
    c_charge: float = 0.0
    c_discharge: float = 0.0


@dataclass(frozen=True)
class RenewableDER:
    id: int
    bus: int
    beta: float
    forecast: tuple[float, ...]
    lo: tuple[float, ...]
    hi: tuple[float, ...]


@dataclass(frozen=True)
class PCCLimits:
    dp: float
    dq: float


@dataclass(frozen=True)
class Topology:
    """Tree structure of the feeder, oriented away from the PCC bus.

    ``order`` is breadth-first from the root with ties broken by bus id; every
    other per-bus array in the package follows this order.  Branch ``k`` feeds
    bus ``order[k + 1]`` from its parent.
    """

    root: int
    order: tuple[int, ...]
    depth: dict[int, int]
    parent: dict[int, int]
    children: dict[int, tuple[int, ...]]

    @property
    def branch_ends(self) -> list[tuple[int, int]]:
        return [(self.parent[j], j) for j in self.order[1:]]


@dataclass(frozen=True)
class NetworkModel:
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    generators: tuple[Generator, ...]
    storages: tuple[Storage, ...]
    ders: tuple[RenewableDER, ...]
    pcc_bus: int
    pcc_limits: PCCLimits
    horizon: int
    s_base: float = 1.0
    v_base: float = 1.0
    name: str = ""
    topology: Topology = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        _check_invariants(self)
        object.__setattr__(self, "topology", validate_radial(self))

    @property
    def bus_ids(self) -> list[int]:
        return [b.id for b in self.buses]

    def der(self, der_id: int) -> RenewableDER:
        for d in self.ders:
            if d.id == der_id:
                return d
        raise KeyError(f"unknown DER id {der_id}")

    def oriented_branches(self) -> list[Branch]:
        """Branches in topology order, each oriented parent -> child."""
        lookup = {}
        for br in self.branches:
            lookup[(br.from_bus, br.to_bus)] = br
            lookup[(br.to_bus, br.from_bus)] = Branch(br.to_bus, br.from_bus, br.r, br.x,
                                                      -br.p_max, -br.p_min)
        return [lookup[e] for e in self.topology.branch_ends]

    # incidence indicators e_jg, e_jn, e_jr, e_j in topology bus order
    def incidence(self) -> dict[str, np.ndarray]:
        pos = {b: k for k, b in enumerate(self.topology.order)}
        nb = len(pos)

        def mat(devices):
            m = np.zeros((nb, len(devices)))
            for k, d in enumerate(devices):
                m[pos[d.bus], k] = 1.0
            return m

        e_root = np.zeros(nb)
        e_root[pos[self.pcc_bus]] = 1.0
        return {"gen": mat(self.generators), "storage": mat(self.storages),
                "der": mat(self.ders), "pcc": e_root}


def _fail(msg: str):
    raise NetworkError(msg)


def _check_invariants(m: NetworkModel) -> None:
    if m.horizon < 1:
        _fail(f"horizon must be >= 1, got {m.horizon}")
    if m.s_base <= 0:
        _fail("base s_mva must be positive")
    ids = [b.id for b in m.buses]
    if len(set(ids)) != len(ids):
        _fail("duplicate bus id")
    known = set(ids)
    for b in m.buses:
        if not 0 < b.v_sq_min <= b.v_sq_max:
            _fail(f"bus {b.id}: need 0 < v_sq_min <= v_sq_max")
    for br in m.branches:
        if br.from_bus not in known or br.to_bus not in known:
            _fail(f"branch ({br.from_bus}, {br.to_bus}) references an unknown bus")
        if br.r < 0 or br.x < 0:
            _fail(f"branch ({br.from_bus}, {br.to_bus}): r and x must be >= 0")
        if br.p_min > br.p_max:
            _fail(f"branch ({br.from_bus}, {br.to_bus}): p_min > p_max")
    if m.pcc_bus not in known:
        _fail(f"PCC bus {m.pcc_bus} does not exist")
    if m.pcc_limits.dp < 0 or m.pcc_limits.dq < 0:
        _fail("PCC thresholds dp, dq must be >= 0")
    for k, g in enumerate(m.generators):
        if g.bus not in known:
            _fail(f"generator {k}: unknown bus {g.bus}")
        if g.p_phys_min > g.p_phys_max:
            _fail(f"generator {k}: p_phys_min > p_phys_max")
        if g.q_min > g.q_max:
            _fail(f"generator {k}: q_min > q_max")
        if not g.ramp_down < 0 < g.ramp_up:
            _fail(f"generator {k}: need ramp_down < 0 < ramp_up")
        pts = g.cost_pieces
        if len(pts) < 2:
            _fail(f"generator {k}: cost_pieces needs at least two breakpoints")
        if any(b[0] <= a[0] for a, b in zip(pts[:-1], pts[1:])):
            _fail(f"generator {k}: cost breakpoints must be strictly increasing in MW")
        slopes = [a for a, _ in g.cost_lines()]
        if any(s1 < s0 - 1e-12 * max(1.0, abs(s0)) for s0, s1 in zip(slopes[:-1], slopes[1:])):
            _fail(f"generator {k}: cost pieces are not convex (slopes decrease)")
    for k, s in enumerate(m.storages):
        if s.bus not in known:
            _fail(f"storage {k}: unknown bus {s.bus}")
        if not (0 < s.eta_c <= 1 and 0 < s.eta_d <= 1):
            _fail(f"storage {k}: efficiencies must lie in (0, 1]")
        if not s.s_phys_min <= s.s_initial <= s.s_phys_max:
            _fail(f"storage {k}: need s_phys_min <= s_initial <= s_phys_max")
        if s.pc_max < 0 or s.pd_max < 0:
            _fail(f"storage {k}: power limits must be >= 0")
        if s.c_charge < 0 or s.c_discharge < 0:
            _fail(f"storage {k}: costs must be >= 0")
    der_ids = [d.id for d in m.ders]
    if len(set(der_ids)) != len(der_ids):
        _fail("duplicate DER id")
    for d in m.ders:
        if d.bus not in known:
            _fail(f"DER {d.id}: unknown bus {d.bus}")
        if not abs(d.beta) < math.pi / 2:
            _fail(f"DER {d.id}: |beta| must be < pi/2")
        for name in ("forecast", "lo", "hi"):
            if len(getattr(d, name)) != m.horizon:
                _fail(f"DER {d.id}: {name} needs {m.horizon} values")
        for t, (lo, f, hi) in enumerate(zip(d.lo, d.forecast, d.hi)):
            if not lo <= f <= hi:
                _fail(f"DER {d.id}: need lo <= forecast <= hi at period {t + 1}")


def validate_radial(model: NetworkModel) -> Topology:
    """Check that the branches form a tree rooted at the PCC bus.

    Raises RadialityError naming the first edge that closes a cycle, or the
    first bus (by id) that cannot be reached from the PCC.
    """
    ids = sorted(b.id for b in model.buses)
    rep = {i: i for i in ids}

    def find(i):
        while rep[i] != i:
            rep[i] = rep[rep[i]]
            i = rep[i]
        return i

    adj: dict[int, list[int]] = {i: [] for i in ids}
    for br in model.branches:
        a, b = find(br.from_bus), find(br.to_bus)
        if a == b:
            raise RadialityError(
                f"not radial: branch ({br.from_bus}, {br.to_bus}) closes a cycle")
        rep[a] = b
        adj[br.from_bus].append(br.to_bus)
        adj[br.to_bus].append(br.from_bus)

    root = model.pcc_bus
    depth = {root: 0}
    parent: dict[int, int] = {}
    order = [root]
    queue = deque([root])
    while queue:
        i = queue.popleft()
        for j in sorted(adj[i]):
            if j not in depth:
                depth[j] = depth[i] + 1
                parent[j] = i
                order.append(j)
                queue.append(j)
    missing = [i for i in ids if i not in depth]
    if missing:
        raise RadialityError(f"not radial: bus {missing[0]} is not connected to PCC bus {root}")
    children = {i: tuple(j for j in order if parent.get(j) == i) for i in ids}
    return Topology(root=root, order=tuple(order), depth=depth, parent=parent,
                    children=children)


def _floats(seq) -> tuple[float, ...]:
    return tuple(float(v) for v in seq)


def network_from_dict(data: dict[str, Any]) -> NetworkModel:
    try:
        base = data.get("base", {})
        pcc = data["pcc"]
        horizon = int(data["horizon"])
        buses = tuple(Bus(int(b["id"]), float(b["v_sq_min"]), float(b["v_sq_max"]))
                      for b in data["buses"])
        branches = tuple(Branch(int(b["from"]), int(b["to"]), float(b["r"]), float(b["x"]),
                                float(b["p_min"]), float(b["p_max"]))
                         for b in data["branches"])
        gens = tuple(Generator(int(g["bus"]), float(g["p_phys_min"]), float(g["p_phys_max"]),
                               float(g["q_min"]), float(g["q_max"]),
                               float(g["ramp_down"]), float(g["ramp_up"]),
                               tuple((float(p), float(c)) for p, c in g["cost_pieces"]))
                     for g in data.get("generators", []))
        stores = tuple(Storage(int(s["bus"]), float(s["eta_c"]), float(s["eta_d"]),
                               float(s["pc_max"]), float(s["pd_max"]),
                               float(s["s_phys_min"]), float(s["s_phys_max"]),
                               float(s["s_initial"]),
                               float(s.get("c_charge", 0.0)), float(s.get("c_discharge", 0.0)))
                       for s in data.get("storages", []))
        ders = tuple(RenewableDER(int(d.get("id", k)), int(d["bus"]), float(d.get("beta", 0.0)),
                                  _floats(d["forecast"]), _floats(d["lo"]), _floats(d["hi"]))
                     for k, d in enumerate(data.get("ders", [])))
        return NetworkModel(buses=buses, branches=branches, generators=gens, storages=stores,
                            ders=ders, pcc_bus=int(pcc["bus"]),
                            pcc_limits=PCCLimits(float(pcc["dp"]), float(pcc["dq"])),
                            horizon=horizon, s_base=float(base.get("s_mva", 1.0)),
                            v_base=float(base.get("kv", 1.0)), name=str(data.get("name", "")))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, NetworkError):
            raise
        raise NetworkParseError(f"malformed network data: {exc!r}") from exc


def network_to_dict(model: NetworkModel) -> dict[str, Any]:
    return {
        "name": model.name,
        "base": {"s_mva": model.s_base, "kv": model.v_base},
        "horizon": model.horizon,
        "pcc": {"bus": model.pcc_bus, "dp": model.pcc_limits.dp, "dq": model.pcc_limits.dq},
        "buses": [{"id": b.id, "v_sq_min": b.v_sq_min, "v_sq_max": b.v_sq_max}
                  for b in model.buses],
        "branches": [{"from": b.from_bus, "to": b.to_bus, "r": b.r, "x": b.x,
                      "p_min": b.p_min, "p_max": b.p_max} for b in model.branches],
        "generators": [{"bus": g.bus, "p_phys_min": g.p_phys_min, "p_phys_max": g.p_phys_max,
                        "q_min": g.q_min, "q_max": g.q_max, "ramp_down": g.ramp_down,
                        "ramp_up": g.ramp_up, "cost_pieces": [list(p) for p in g.cost_pieces]}
                       for g in model.generators],
        "storages": [{"bus": s.bus, "eta_c": s.eta_c, "eta_d": s.eta_d, "pc_max": s.pc_max,
                      "pd_max": s.pd_max, "s_phys_min": s.s_phys_min,
                      "s_phys_max": s.s_phys_max, "s_initial": s.s_initial,
                      "c_charge": s.c_charge, "c_discharge": s.c_discharge}
                     for s in model.storages],
        "ders": [{"id": d.id, "bus": d.bus, "beta": d.beta, "forecast": list(d.forecast),
                  "lo": list(d.lo), "hi": list(d.hi)} for d in model.ders],
    }


def load_network(path) -> NetworkModel:
    try:
        text = Path(path).read_text()
        data = json.loads(text)
    except (OSError, json.JSONDecodeError) as exc:
        raise NetworkParseError(f"cannot read network file {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise NetworkParseError(f"network file {path} must hold a JSON object")
    return network_from_dict(data)


def save_network(model: NetworkModel, path) -> None:
    Path(path).write_text(json.dumps(network_to_dict(model), indent=1) + "\n")


def fixture_path(name: str) -> Path:
    """Path of a network shipped in ``vppregion/data`` (e.g. ``"three_bus"``)."""
    return Path(__file__).parent / "data" / f"{name}.json"


def load_fixture(name: str) -> NetworkModel:
    return load_network(fixture_path(name))
