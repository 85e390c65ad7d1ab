from __future__ import annotations

import itertools

import numpy as np
import pytest

from helpers import gen, model, storage, two_bus
from vppregion.core import Mode, ScheduleParams
from vppregion.network import load_fixture
from vppregion.params import (ComplementarityError, ParamSelectionError, check_complementarity_duals,
                              check_rules, derive_mode_sets, enumerate_mode_fallback,
                              solve_param_selection, width_objective)


def test_generator_only_single_period_full_range():
    m = model(two_bus(load=2.0, gen=gen(pmin=1.0, pmax=9.0)))
    p = solve_param_selection(m).params
    assert p.pg_min[0, 0] == pytest.approx(1.0, abs=1e-5)
    assert p.pg_max[0, 0] == pytest.approx(9.0, abs=1e-5)


def test_generator_ramp_chain():
    """Two periods, ramps +-4 MW on [0, 10]: the ramp rules cap the summed width at 8 MW."""
    m = model(two_bus(load=2.0, horizon=2, gen=gen(pmin=0.0, pmax=10.0, rd=-4.0, ru=4.0)))
    p = solve_param_selection(m).params
    widths = p.pg_max[0] - p.pg_min[0]
    # oracle: (pmax2 - pmin1) + (pmax1 - pmin2) <= R_up - R_down = 8
    assert widths.sum() == pytest.approx(8.0, abs=1e-4)
    assert np.all(p.pg_min >= -1e-9) and np.all(p.pg_max <= 10 + 1e-9)
    assert check_rules(m, p) == []


def test_large_zeta_idles_storage():
    m = model(two_bus(load=2.0, horizon=2, storage=storage(), gen=gen()))
    sel = solve_param_selection(m, zeta=1e3)
    assert np.all(np.abs(sel.pc) < 1e-6) and np.all(np.abs(sel.pd) < 1e-6)
    assert np.all(sel.params.modes == Mode.IDLE)


def test_storage_reach_rules():
    m = model(two_bus(load=2.0, horizon=2, storage=storage(eta=1.0, pmax=4.0, smax=10.0, s0=5.0),
                      gen=gen()))
    p = solve_param_selection(m).params
    assert check_rules(m, p) == []
    for t in range(1, 2):
        assert p.soc_max[0, t] - p.soc_min[0, t - 1] <= 4.0 + 1e-6
        assert p.soc_max[0, t - 1] - p.soc_min[0, t] <= 4.0 + 1e-6


def test_three_bus_rules_and_modes(three_bus):
    p = three_bus.params
    assert check_rules(three_bus.model, p) == []
    # exactly one mode per (storage, period)
    assert set(np.unique(p.modes)) <= {int(m) for m in Mode}
    assert p.modes.shape == (1, 2)


@pytest.mark.parametrize("duals, ok, flagged", [
    ({(0, 0): 3.0, (0, 1): 0.5}, True, []),
    ({(0, 0): 3.0, (0, 1): -0.5}, False, [(0, 1)]),
    ({(0, 0): -1e-10}, True, []),
])
def test_complementarity_duals(duals, ok, flagged):
    assert check_complementarity_duals(duals, 1e-8) == (ok, flagged)


def test_derive_modes():
    modes = derive_mode_sets(np.array([[2.0, 0.0, 0.0]]), np.array([[0.0, 0.0, 1.0]]))
    assert modes.tolist() == [[Mode.CHARGE, Mode.IDLE, Mode.DISCHARGE]]
    with pytest.raises(ComplementarityError):
        derive_mode_sets(np.array([[1.0]]), np.array([[1.0]]))


@pytest.mark.parametrize("horizon, count", [(1, 3), (2, 9)])
def test_fallback_counts(horizon, count):
    m = model(two_bus(load=2.0, horizon=horizon, storage=storage(), gen=gen()))
    sel = enumerate_mode_fallback(m)
    assert sel.candidates == count and sel.fallback


def test_fallback_picks_argmax():
    m = load_fixture("three_bus")
    best = enumerate_mode_fallback(m)
    scores = {}
    for c in itertools.product([int(x) for x in Mode], repeat=2):
        modes = np.array(c).reshape(1, 2)
        try:
            scores[c] = enumerate_mode_fallback(m, candidates=[modes]).objective
        except ParamSelectionError:
            continue
    top = max(scores.values())
    winners = [c for c, v in scores.items() if v >= top - 1e-9 * max(1, abs(top))]
    assert tuple(best.params.modes.ravel()) == winners[0]
    assert best.objective == pytest.approx(top, rel=1e-7)


def test_fallback_cap():
    m = model(two_bus(load=2.0, horizon=2, storage=storage(), gen=gen()))
    with pytest.raises(ParamSelectionError, match="cap"):
        enumerate_mode_fallback(m, cap=8)


def test_zeta_monotone():
    m = load_fixture("three_bus")
    small = solve_param_selection(m, zeta=1e-4).objective
    large = solve_param_selection(m, zeta=1e-2).objective
    assert small >= large - 1e-7


def test_bad_zeta_and_infeasible():
    m = load_fixture("three_bus")
    with pytest.raises(ValueError):
        solve_param_selection(m, zeta=0.0)
    # load beyond what the branch can carry
    d = two_bus(load=500.0)
    with pytest.raises(ParamSelectionError, match="forecast"):
        solve_param_selection(model(d))


def test_params_round_trip(tmp_path, three_bus):
    p = three_bus.params
    path = tmp_path / "params.json"
    p.save(three_bus.model, path)
    back = ScheduleParams.load(path, three_bus.model)
    for f in ("pg_min", "pg_max", "soc_min", "soc_max", "modes"):
        assert np.array_equal(getattr(back, f), getattr(p, f))
    assert width_objective(back, three_bus.model) == pytest.approx(
        width_objective(p, three_bus.model))
