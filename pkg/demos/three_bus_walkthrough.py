"""Three-bus walkthrough: corridors, PCC region, bid and a short intraday check."""
from __future__ import annotations

import numpy as np

from vppregion import (UncertaintyBox, build_bid, compute_region, evaluate_bid, load_fixture,
                       sample_envelope, solve_param_selection, validate)
from vppregion.scenarios import enumerate_vertices

model = load_fixture("three_bus")
sel = solve_param_selection(model)
print("generator corridors (MW):")
for t in range(model.horizon):
    print(f"  period {t + 1}: [{sel.params.pg_min[0, t]:.3f}, {sel.params.pg_max[0, t]:.3f}]")
print("storage modes:", sel.params.modes.tolist())

scenarios = enumerate_vertices(UncertaintyBox.from_model(model))
print(f"{len(scenarios.extremes)} extreme scenarios")

env = compute_region(model, sel.params, scenarios)
for t in range(env.horizon):
    poly = env.polygon(t)
    print(f"period {t + 1}: {poly.n_vertices} vertices, area {poly.area:.2f} MW*MVar "
          f"(search polygon {env.periods[t].polytope.area:.2f})")

bid = build_bid(model, sel.params, scenarios, env)
print(f"cost pieces per period: {[len(s.distinct_pieces()) for s in bid.surfaces]}, "
      f"epsilon {bid.epsilon:.2f} $")

for s in sample_envelope(env, 3, seed=1):
    print(f"schedule {np.round(s.w, 2).tolist()} MW/MVar -> bid {evaluate_bid(bid, s.w):.2f} $")

rep = validate(model, sel.params, scenarios, env, bid, n_samples=50, n_realizations=5, seed=1)
print(f"intraday: {rep.n_feasible}/{rep.n_traces} feasible, "
      f"max residual {max(rep.max_residual.values()):.2e} p.u., "
      f"min bid margin {rep.coverage_min_margin:.2f} $")
