"""PCC power-transfer regions, bid cost surfaces and intraday validation for a VPP."""
from __future__ import annotations

__version__ = "0.1.0"

from .core import Grid, Mode, ScheduleParams, build_robust_program, deterministic_dispatch
from .cost import BidFunction, CostSurface, build_bid, evaluate_bid
from .geometry import Polytope2D, convex_hull_2d, hausdorff
from .harness import ValidationReport, rolling_simulate, sample_envelope, validate
from .network import NetworkModel, load_fixture, load_network
from .params import solve_param_selection
from .region import RegionEnvelope, compute_region, explore_period
from .scenarios import UncertaintyBox, enumerate_vertices, rank_ders, top_k_box

__all__ = [
    "BidFunction", "CostSurface", "Grid", "Mode", "NetworkModel", "Polytope2D", "RegionEnvelope",
    "ScheduleParams", "UncertaintyBox", "ValidationReport", "build_bid", "build_robust_program",
    "compute_region", "convex_hull_2d", "deterministic_dispatch", "enumerate_vertices",
    "evaluate_bid", "explore_period", "hausdorff", "load_fixture", "load_network", "rank_ders",
    "rolling_simulate", "sample_envelope", "solve_param_selection", "top_k_box", "validate",
]
