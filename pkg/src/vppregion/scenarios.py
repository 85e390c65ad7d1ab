"""Box uncertainty over renewable outputs: vertex scenarios and critical-DER reduction."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .network import NetworkModel

DEFAULT_CAP = 64


class ScenarioCapError(ValueError):
    pass


@dataclass(frozen=True)
class UncertaintyBox:
    """Per-(DER, period) intervals in MW; rows follow ``der_ids``."""

    der_ids: tuple[int, ...]
    lo: np.ndarray
    hi: np.ndarray
    forecast: np.ndarray

    def __post_init__(self):
        for name in ("lo", "hi", "forecast"):
            arr = np.array(getattr(self, name), dtype=float, ndmin=2)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if np.any(self.lo > self.hi):
            raise ValueError("box needs lo <= hi elementwise")

    @classmethod
    def from_model(cls, model: NetworkModel) -> "UncertaintyBox":
        if not model.ders:
            empty = np.zeros((0, model.horizon))
            return cls((), empty, empty, empty)
        return cls(tuple(d.id for d in model.ders),
                   np.array([d.lo for d in model.ders]),
                   np.array([d.hi for d in model.ders]),
                   np.array([d.forecast for d in model.ders]))

    @property
    def horizon(self) -> int:
        return self.lo.shape[1]

    def free_coords(self) -> list[tuple[int, int]]:
        """(row, period) pairs with lo < hi, row-major."""
        rows, cols = np.nonzero(self.lo < self.hi)
        return list(zip(rows.tolist(), cols.tolist()))

    def contains(self, values: np.ndarray, tol: float = 1e-9) -> bool:
        values = np.asarray(values, dtype=float)
        return bool(np.all(values >= self.lo - tol) and np.all(values <= self.hi + tol))

    def subset_of(self, other: "UncertaintyBox", tol: float = 0.0) -> bool:
        return bool(np.all(self.lo >= other.lo - tol) and np.all(self.hi <= other.hi + tol))


@dataclass(frozen=True)
class Scenario:
    values: np.ndarray          # (n_der, T) MW
    kind: str                   # "expected" | "extreme"
    index: int = -1             # vertex index for extremes
    bits: tuple[int, ...] = ()  # 0 = lo, 1 = hi for each free coordinate


@dataclass(frozen=True)
class ScenarioSet:
    box: UncertaintyBox
    expected: Scenario
    extremes: tuple[Scenario, ...]
    frozen: frozenset = field(default_factory=frozenset)

    @property
    def free_coords(self) -> list[tuple[int, int]]:
        return self.box.free_coords()

    def extreme_values(self) -> np.ndarray:
        """Stacked extreme realisations, shape (n_extreme, n_der, T)."""
        return np.stack([s.values for s in self.extremes])

    def period_patterns(self, t: int) -> tuple[np.ndarray, np.ndarray]:
        """Distinct period-``t`` realisations among the extremes.

        Returns ``(patterns, owner)`` where ``patterns`` has shape
        (n_pattern, n_der) and ``owner[s]`` is the pattern index of extreme s.
        Patterns are ordered by first appearance, which is the lo<hi
        lexicographic order over the period's free coordinates.
        """
        vals = self.extreme_values()[:, :, t]
        keys: dict[bytes, int] = {}
        owner = np.empty(len(vals), dtype=int)
        patterns = []
        for s, row in enumerate(vals):
            k = row.tobytes()
            if k not in keys:
                keys[k] = len(patterns)
                patterns.append(row)
            owner[s] = keys[k]
        return np.array(patterns).reshape(len(patterns), vals.shape[1]), owner


def der_scores(model: NetworkModel, box: UncertaintyBox, t: int) -> dict[int, float]:
    beta = {d.id: d.beta for d in model.ders}
    return {der: (1.0 + math.tan(beta[der])) * float(box.hi[k, t] - box.lo[k, t])
            for k, der in enumerate(box.der_ids)}


def rank_ders(model: NetworkModel, box: UncertaintyBox, t: int | None = None
              ) -> list[tuple[int, float]]:
    """Rank DERs by (1 + tan beta) * interval width, largest first.

    ``t`` is a 0-based period; ``None`` ranks by the sum over the horizon.
    Ties go to the smaller DER id.
    """
    periods = range(box.horizon) if t is None else [t]
    total: dict[int, float] = {der: 0.0 for der in box.der_ids}
    for tt in periods:
        for der, sc in der_scores(model, box, tt).items():
            total[der] += sc
    return sorted(total.items(), key=lambda kv: (-kv[1], kv[0]))


def reduce_box(box: UncertaintyBox, keep) -> UncertaintyBox:
    """Collapse every DER not in ``keep`` to its forecast."""
    keep = set(keep)
    unknown = keep - set(box.der_ids)
    if unknown:
        raise KeyError(f"unknown DER ids {sorted(unknown)}")
    lo, hi = box.lo.copy(), box.hi.copy()
    for k, der in enumerate(box.der_ids):
        if der not in keep:
            lo[k] = box.forecast[k]
            hi[k] = box.forecast[k]
    return UncertaintyBox(box.der_ids, lo, hi, box.forecast)


def top_k_box(model: NetworkModel, box: UncertaintyBox, k: int) -> UncertaintyBox:
    ranked = rank_ders(model, box)
    return reduce_box(box, [der for der, _ in ranked[:k]])


def enumerate_vertices(box: UncertaintyBox, cap: int = DEFAULT_CAP) -> ScenarioSet:
    """All vertices of the joint (DER, period) box, lo<hi lexicographic order."""
    coords = box.free_coords()
    n = 2 ** len(coords)
    if n > cap:
        raise ScenarioCapError(
            f"{len(coords)} uncertain coordinates give {n} extreme scenarios (cap {cap}); "
            "reduce the box to the critical DERs with rank_ders/reduce_box")
    extremes = []
    for idx, bits in enumerate(itertools.product((0, 1), repeat=len(coords))):
        vals = box.lo.copy()
        for (r, t), b in zip(coords, bits):
            vals[r, t] = box.hi[r, t] if b else box.lo[r, t]
        vals.setflags(write=False)
        extremes.append(Scenario(vals, "extreme", idx, tuple(bits)))
    expected = Scenario(box.forecast, "expected")
    degenerate = frozenset(der for k, der in enumerate(box.der_ids)
                           if np.all(box.lo[k] == box.hi[k]))
    return ScenarioSet(box, expected, tuple(extremes), degenerate)
