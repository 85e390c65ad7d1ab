from __future__ import annotations

from dataclasses import dataclass

import pytest

from vppregion.cost import build_bid
from vppregion.network import load_fixture
from vppregion.params import solve_param_selection
from vppregion.region import compute_region
from vppregion.scenarios import UncertaintyBox, enumerate_vertices

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = (bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {k:2d}: {detail}")


@dataclass
class Built:
    model: object
    params: object
    scenarios: object
    envelope: object
    bid: object = None


def _build(name: str, with_bid: bool = True) -> Built:
    m = load_fixture(name)
    p = solve_param_selection(m).params
    sc = enumerate_vertices(UncertaintyBox.from_model(m))
    env = compute_region(m, p, sc)
    return Built(m, p, sc, env, build_bid(m, p, sc, env) if with_bid else None)


@pytest.fixture(scope="session")
def three_bus() -> Built:
    return _build("three_bus")


@pytest.fixture(scope="session")
def toy() -> Built:
    return _build("lossless_toy")
