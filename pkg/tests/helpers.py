"""Small network builders shared by the tests."""
from __future__ import annotations

import copy

from vppregion.network import network_from_dict


def two_bus(load=5.0, horizon=1, r=0.0, x=0.0, gen=None, storage=None, lo=None, hi=None,
            beta=0.0, dp=1.0, dq=1.0):
    """PCC bus 1 feeding bus 2, one DER (net demand) at bus 2."""
    f = [float(load)] * horizon
    d = {
        "name": "two_bus",
        "base": {"s_mva": 10.0, "kv": 12.66},
        "horizon": horizon,
        "pcc": {"bus": 1, "dp": dp, "dq": dq},
        "buses": [{"id": 1, "v_sq_min": 1.0, "v_sq_max": 1.0},
                  {"id": 2, "v_sq_min": 0.81, "v_sq_max": 1.21}],
        "branches": [{"from": 1, "to": 2, "r": r, "x": x, "p_min": -100.0, "p_max": 100.0}],
        "generators": [] if gen is None else [gen],
        "storages": [] if storage is None else [storage],
        "ders": [{"id": 7, "bus": 2, "beta": beta, "forecast": f,
                  "lo": f if lo is None else lo, "hi": f if hi is None else hi}],
    }
    return d


def gen(bus=2, pmin=0.0, pmax=10.0, qmin=-4.0, qmax=4.0, rd=-10.0, ru=10.0, pieces=None):
    return {"bus": bus, "p_phys_min": pmin, "p_phys_max": pmax, "q_min": qmin, "q_max": qmax,
            "ramp_down": rd, "ramp_up": ru,
            "cost_pieces": pieces or [[pmin, 0.0], [pmax, 30.0 * (pmax - pmin)]]}


def storage(bus=2, eta=1.0, pmax=4.0, smin=0.0, smax=10.0, s0=5.0, cost=0.0):
    return {"bus": bus, "eta_c": eta, "eta_d": eta, "pc_max": pmax, "pd_max": pmax,
            "s_phys_min": smin, "s_phys_max": smax, "s_initial": s0,
            "c_charge": cost, "c_discharge": cost}


def model(d):
    return network_from_dict(copy.deepcopy(d))


def brute_force_hull_vertices(pts, tol=1e-6):
    """O(n^3) hull oracle: (i, j) is a hull edge when every point lies left of i->j
    or on the segment; hull vertices are the endpoints of such edges."""
    import numpy as np
    pts = np.asarray(pts, dtype=float)
    # dedup at tol, as the hull does
    keep = []
    for p in pts[np.lexsort((pts[:, 1], pts[:, 0]))]:
        if all(np.max(np.abs(p - q)) > tol for q in keep):
            keep.append(p)
    P = np.array(keep)
    n = len(P)
    if n < 3:
        return P
    verts = set()
    for i in range(n):
        D = P - P[i]
        norm = np.linalg.norm(D, axis=1)
        C = D[:, None, 0] * D[None, :, 1] - D[:, None, 1] * D[None, :, 0]   # C[j,k] = D_j x D_k
        dot = D @ D.T                                                         # dot[j,k] = D_j . D_k
        dist = C / np.where(norm > 0, norm, 1.0)[:, None]                    # signed distance of k from line i->j
        on_seg = (np.abs(dist) <= tol) & (dot >= -tol * norm[:, None]) & (dot <= (norm ** 2)[:, None] + tol * norm[:, None])
        ok = np.all((dist > tol) | on_seg, axis=1)
        ok[i] = False
        for j in np.nonzero(ok)[0]:
            verts.add(i)
            verts.add(int(j))
    return P[sorted(verts)]
