"""Candidate link graph: which spot pairs may be connected, at what cost.

Arc costs are squared displacements in pixel/frame units,
``dx**2 + dy**2 + dt**2``, so that two unit time steps are cheaper than one
double step and fragmented tracks are penalized. Every spot additionally
carries a start penalty (cost of having no predecessor) and an end penalty
(no successor); links only pay off when they beat the penalties they save.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, NamedTuple

import numpy as np

from .model import Spot, SpotSet


class Arc(NamedTuple):
    source: int
    target: int
    cost: float
    is_join: bool


@dataclass(frozen=True)
class GraphParams:
    """Construction parameters for the candidate graph.

    tracking_radius is the maximum spatial displacement (pixels) considered
    when generating inter-frame arcs; max_frame_gap the longest blink a link
    may bridge. penalty is the per-spot start/end cost; None picks
    ``(tracking_radius**2 + max_frame_gap**2) / 2`` so that every arc inside
    the radius/gap window can still appear in an optimal tracking.
    join_radius bounds same-frame duplicate links (0 disables joins).
    """

    tracking_radius: float
    max_frame_gap: int = 1
    penalty: float | None = None
    join_radius: float = 2.0
    quality_scaling: bool = False
    quality_floor: float = 0.2
    forbidden_arcs: frozenset[tuple[int, int]] = frozenset()

    def __post_init__(self):
        if not self.tracking_radius > 0:
            raise ValueError("tracking_radius must be positive")
        if self.max_frame_gap < 1:
            raise ValueError("max_frame_gap must be at least 1")
        if self.penalty is not None and not self.penalty > 0:
            raise ValueError("penalty must be positive")
        if self.join_radius < 0:
            raise ValueError("join_radius must be non-negative")
        if not 0 < self.quality_floor <= 1:
            raise ValueError("quality_floor must be in (0, 1]")
        object.__setattr__(self, "forbidden_arcs", frozenset(self.forbidden_arcs))

    @property
    def effective_penalty(self) -> float:
        if self.penalty is not None:
            return self.penalty
        return 0.5 * (self.tracking_radius ** 2 + self.max_frame_gap ** 2)


@dataclass(frozen=True)
class CandidateGraph:
    """Arcs plus per-spot penalties: the data of the tracking problem.

    Penalty tuples are aligned with ``spot_ids`` (which follows the spot-set
    order). Arc endpoints are spot ids.
    """

    arcs: tuple[Arc, ...]
    spot_ids: tuple[int, ...]
    start_penalties: tuple[float, ...]  # cost of a spot starting a track
    end_penalties: tuple[float, ...]    # cost of a spot ending a track
    params: GraphParams

    @property
    def n_spots(self) -> int:
        return len(self.spot_ids)

    @cached_property
    def index_of(self) -> dict[int, int]:
        return {sid: i for i, sid in enumerate(self.spot_ids)}

    @cached_property
    def arc_costs(self) -> dict[tuple[int, int], float]:
        return {(a.source, a.target): a.cost for a in self.arcs}

    def start_penalty_of(self, spot_id: int) -> float:
        return self.start_penalties[self.index_of[spot_id]]

    def end_penalty_of(self, spot_id: int) -> float:
        return self.end_penalties[self.index_of[spot_id]]

    def without_arcs(self, pairs: Iterable[tuple[int, int]]) -> "CandidateGraph":
        """Copy of the graph with the given (source, target) arcs removed."""
        removed = frozenset(pairs)
        params = GraphParams(
            tracking_radius=self.params.tracking_radius,
            max_frame_gap=self.params.max_frame_gap,
            penalty=self.params.penalty,
            join_radius=self.params.join_radius,
            quality_scaling=self.params.quality_scaling,
            quality_floor=self.params.quality_floor,
            forbidden_arcs=self.params.forbidden_arcs | removed,
        )
        return CandidateGraph(
            arcs=tuple(a for a in self.arcs
                       if (a.source, a.target) not in removed),
            spot_ids=self.spot_ids,
            start_penalties=self.start_penalties,
            end_penalties=self.end_penalties,
            params=params,
        )


def arc_cost(a: Spot, b: Spot) -> float:
    """Squared space-time displacement from ``a`` to a later spot ``b``."""
    dt = b.frame - a.frame
    return (a.x - b.x) ** 2 + (a.y - b.y) ** 2 + float(dt) ** 2


def join_cost(a: Spot, b: Spot, penalty: float) -> float:
    """Cost of linking two same-frame detections of one molecule.

    Spatial cost plus the mean of the two penalties a join sidesteps, so a
    join is never a free way around start/end bookkeeping.
    """
    return (a.x - b.x) ** 2 + (a.y - b.y) ** 2 + penalty


def quality_factor(quality: float, q_ref: float, floor: float = 0.2) -> float:
    """Penalty multiplier in [floor, 1]: weak spots are cheap to leave out."""
    if q_ref <= 0:
        return 1.0
    return min(1.0, max(floor, quality / q_ref))


def quality_penalty(spot: Spot, penalty: float, q_ref: float,
                    floor: float = 0.2, quality_scaling: bool = True) -> float:
    """Start/end penalty of one spot, optionally scaled by its quality."""
    if not quality_scaling:
        return penalty
    return penalty * quality_factor(spot.quality, q_ref, floor)


def _grid_index(xs: np.ndarray, ys: np.ndarray, cell: float) -> dict[tuple[int, int], np.ndarray]:
    """Bucket point indices into a uniform grid with the given cell edge."""
    cols = np.floor(xs / cell).astype(np.int64)
    rows = np.floor(ys / cell).astype(np.int64)
    buckets: dict[tuple[int, int], list[int]] = {}
    for i, key in enumerate(zip(cols, rows)):
        buckets.setdefault(key, []).append(i)
    return {k: np.asarray(v, dtype=np.intp) for k, v in buckets.items()}


def _neighborhood(buckets: dict[tuple[int, int], np.ndarray],
                  col: int, row: int, span: int) -> np.ndarray:
    hits = [buckets[key]
            for dc in range(-span, span + 1)
            for dr in range(-span, span + 1)
            if (key := (col + dc, row + dr)) in buckets]
    if not hits:
        return np.empty(0, dtype=np.intp)
    return np.concatenate(hits)


def build_graph(spots: SpotSet, params: GraphParams) -> CandidateGraph:
    """Enumerate every admissible arc between spots.

    Inter-frame arcs connect spots at most ``max_frame_gap`` frames and
    ``tracking_radius`` pixels apart; joins connect same-frame spots within
    ``join_radius``, directed by id so the arc set stays acyclic. Candidate
    lookup scans a uniform grid whose cell edge equals the tracking radius,
    so only the 3x3 cell neighborhood of each spot is examined per frame.
    """
    n = len(spots)
    radius = params.tracking_radius
    penalty = params.effective_penalty

    qualities = np.array([s.quality for s in spots.spots], dtype=float)
    if params.quality_scaling and n > 0:
        q_ref = float(np.median(qualities))
        if q_ref > 0:
            factors = np.clip(qualities / q_ref, params.quality_floor, 1.0)
        else:
            factors = np.ones(n)
    else:
        factors = np.ones(n)
    penalties = penalty * factors  # start == end penalty per spot

    ids = np.array([s.id for s in spots.spots], dtype=np.int64)
    xs = np.array([s.x for s in spots.spots], dtype=float)
    ys = np.array([s.y for s in spots.spots], dtype=float)
    frames = np.array([s.frame for s in spots.spots], dtype=np.int64)

    cell = radius
    grids: dict[int, dict[tuple[int, int], np.ndarray]] = {}
    for f, (lo, hi) in spots.frame_slices.items():
        idx = np.arange(lo, hi)
        buckets = _grid_index(xs[idx], ys[idx], cell)
        grids[f] = {k: idx[v] for k, v in buckets.items()}

    forbidden = params.forbidden_arcs
    arcs: list[Arc] = []
    r2 = radius * radius
    jr2 = params.join_radius ** 2
    join_span = max(1, math.ceil(params.join_radius / cell)) if params.join_radius > 0 else 0

    for i in range(n):
        col = math.floor(xs[i] / cell)
        row = math.floor(ys[i] / cell)
        # Inter-frame candidates: later frames within the gap limit.
        for gap in range(1, params.max_frame_gap + 1):
            buckets = grids.get(frames[i] + gap)
            if not buckets:
                continue
            cand = _neighborhood(buckets, col, row, 1)
            if cand.size == 0:
                continue
            d2 = (xs[cand] - xs[i]) ** 2 + (ys[cand] - ys[i]) ** 2
            for j, dist2 in zip(cand[d2 <= r2], d2[d2 <= r2]):
                pair = (int(ids[i]), int(ids[j]))
                if pair in forbidden:
                    continue
                arcs.append(Arc(pair[0], pair[1],
                                float(dist2) + float(gap) ** 2, False))
        # Same-frame joins, directed by id to rule out 2-cycles.
        if params.join_radius > 0:
            buckets = grids.get(frames[i])
            cand = _neighborhood(buckets, col, row, join_span)
            mask = ids[cand] > ids[i]
            cand = cand[mask]
            if cand.size == 0:
                continue
            d2 = (xs[cand] - xs[i]) ** 2 + (ys[cand] - ys[i]) ** 2
            for j, dist2 in zip(cand[d2 <= jr2], d2[d2 <= jr2]):
                pair = (int(ids[i]), int(ids[j]))
                if pair in forbidden:
                    continue
                mean_penalty = 0.5 * (penalties[i] + penalties[j])
                arcs.append(Arc(pair[0], pair[1],
                                float(dist2 + mean_penalty), True))

    arcs.sort(key=lambda a: (a.source, a.target))
    return CandidateGraph(
        arcs=tuple(arcs),
        spot_ids=tuple(int(v) for v in ids),
        start_penalties=tuple(float(v) for v in penalties),
        end_penalties=tuple(float(v) for v in penalties),
        params=params,
    )


def write_graph_csv(graph: CandidateGraph, path) -> None:
    """Debug dump of the arc list."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["source_id", "target_id", "cost", "is_join"])
        for a in graph.arcs:
            writer.writerow([a.source, a.target, repr(a.cost), int(a.is_join)])
