"""Feeder region area as DER uncertainty grows: none, top-1, top-2 (pass --full for all five)."""
from __future__ import annotations

import sys
import time

from vppregion import (UncertaintyBox, compute_region, load_fixture, rank_ders,
                       solve_param_selection, top_k_box)
from vppregion.scenarios import enumerate_vertices

model = load_fixture("feeder_5der")
params = solve_param_selection(model).params
box = UncertaintyBox.from_model(model)
print("DER ranking (id, score):", [(d, round(s, 3)) for d, s in rank_ders(model, box)])

ks = [0, 1, 2] + ([None] if "--full" in sys.argv else [])
for k in ks:
    sc = enumerate_vertices(box if k is None else top_k_box(model, box, k))
    t0 = time.perf_counter()
    env = compute_region(model, params, sc)
    label = "full" if k is None else f"top-{k}"
    print(f"{label:>6}: {len(sc.extremes):2d} extremes, area {env.total_area:.3f} MW*MVar, "
          f"{time.perf_counter() - t0:.1f} s")
