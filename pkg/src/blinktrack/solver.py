"""Exact tracking solver.

The track-partition problem is totally unimodular: it is equivalent to a
min-cost bipartite matching between out-copies and in-copies of the spots,
where matching (v, w) selects the arc v->w and an unmatched out-copy /
in-copy pays the end / start penalty of its spot. We solve it with
successive shortest augmenting paths under node potentials, which keeps
every Dijkstra scan on non-negative reduced costs.

Bookkeeping happens in "gain space": an arc's gain
``g = cost - end_penalty(source) - start_penalty(target)`` is what matching
it adds to the objective relative to leaving both copies unmatched. Arcs
with non-negative gain can never improve a tracking (if one were selected,
cutting it would not hurt), so the matcher only ever considers g < 0; the
brute-force oracle deliberately keeps them all.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .graphgen import CandidateGraph
from .model import MissingArcError, Track, Tracking

_FREE = -1   # row/column has no partner
_DUMMY = -2  # row is matched to its personal "no successor" slot

_BRUTE_FORCE_LIMIT = 14


class CertificateError(Exception):
    """The proposed tracking could not be proven optimal."""


class EnumerationLimitError(Exception):
    """Instance too large for exhaustive enumeration."""


class MatchingInstance:
    """Bipartite mirror of a candidate graph.

    Left nodes are out-copies (matched = has successor), right nodes are
    in-copies (matched = has predecessor); edges mirror the arcs. Spot ids
    are mapped to dense indices 0..n-1 in spot-set order.
    """

    def __init__(self, graph: CandidateGraph):
        self.graph = graph
        self.ids = list(graph.spot_ids)
        self.index = {sid: i for i, sid in enumerate(self.ids)}
        self.n = len(self.ids)
        self.start_penalties = np.asarray(graph.start_penalties, dtype=float)
        self.end_penalties = np.asarray(graph.end_penalties, dtype=float)
        m = len(graph.arcs)
        self.edge_source = np.empty(m, dtype=np.intp)
        self.edge_target = np.empty(m, dtype=np.intp)
        self.edge_cost = np.empty(m, dtype=float)
        for k, a in enumerate(graph.arcs):
            self.edge_source[k] = self.index[a.source]
            self.edge_target[k] = self.index[a.target]
            self.edge_cost[k] = a.cost
        self.edge_gain = (self.edge_cost
                          - self.end_penalties[self.edge_source]
                          - self.start_penalties[self.edge_target])

    @property
    def base_objective(self) -> float:
        """Cost of the all-singletons tracking."""
        return float(self.start_penalties.sum() + self.end_penalties.sum())


class _MatcherState:
    """Mutable matching plus dual potentials.

    Invariants maintained by `_augment`:
      * reduced gain  g - pi[row] - rho[col]  >= 0 for every kept edge,
      * matched edges are tight,
      * pot_floor lower-bounds the potential of every free column/dummy, so
        the virtual-sink comparison below ranks augmenting paths by their
        true cost even after potentials have drifted.
    """

    def __init__(self, instance: MatchingInstance,
                 rows_targets: list[np.ndarray], rows_gains: list[np.ndarray]):
        n = instance.n
        self.instance = instance
        self.rows_targets = rows_targets
        self.rows_gains = rows_gains
        self.pi = np.zeros(n)      # row (out-copy) potentials
        self.rho = np.zeros(n)     # column (in-copy) potentials
        self.rho_d = np.zeros(n)   # personal dummy-slot potentials
        self.match_row = np.full(n, _FREE, dtype=np.int64)
        self.match_col = np.full(n, _FREE, dtype=np.int64)
        self.pot_floor = 0.0


def _pruned_rows(instance: MatchingInstance,
                 keep_pairs: set[tuple[int, int]] | None = None
                 ) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Adjacency with only strictly improving edges (gain < 0).

    keep_pairs forces specific (row, col) index pairs to stay, so a warm
    start can keep its currently matched edges regardless of gain.
    """
    n = instance.n
    targets: list[list[int]] = [[] for _ in range(n)]
    gains: list[list[float]] = [[] for _ in range(n)]
    for u, w, g in zip(instance.edge_source, instance.edge_target,
                       instance.edge_gain):
        if g < 0.0 or (keep_pairs and (int(u), int(w)) in keep_pairs):
            targets[int(u)].append(int(w))
            gains[int(u)].append(float(g))
    return ([np.asarray(t, dtype=np.int64) for t in targets],
            [np.asarray(g, dtype=float) for g in gains])


def _augment(state: _MatcherState, u0: int,
             require_improvement: bool = False) -> bool:
    """Grow the matching by one alternating path rooted at row ``u0``.

    Runs Dijkstra over reduced gains. Free columns and free dummy slots
    relax a virtual sink with weight ``potential - pot_floor`` so that the
    sink's first pop identifies the target minimizing the TRUE path cost
    ``dist + potential + pi[u0]``; ending at the row's own dummy (cost 0,
    i.e. "leave u0 without successor") is always available.

    With require_improvement the augmentation is abandoned (no state is
    touched) unless that true cost is strictly negative.
    """
    n = state.instance.n
    pi, rho, rho_d = state.pi, state.rho, state.rho_d
    INF = np.inf
    dist_col = {}
    dist_dum = {}
    parent_col = {}
    done_col = set()
    done_dum = set()
    rows_entry = {}  # row -> dist at which its matched column was finalized
    heap: list[tuple[float, int, int]] = []  # (key, kind, index); kinds: 0 col, 1 dummy, 2 sink
    best_key = INF
    best_target: tuple[int, int] | None = None
    best_dist = INF

    def relax_sink(d: float, pot: float, kind: int, idx: int):
        nonlocal best_key, best_target, best_dist
        key = d + pot - state.pot_floor
        if key < best_key:
            best_key, best_target, best_dist = key, (kind, idx), d
            heapq.heappush(heap, (key, 2, -1))

    def relax_from_row(r: int, base: float):
        rows_entry[r] = base
        targets = state.rows_targets[r]
        if targets.size:
            nd = base + (state.rows_gains[r] - pi[r]) - rho[targets]
            for w, d in zip(targets, nd):
                w = int(w)
                if w in done_col or d >= dist_col.get(w, INF):
                    continue
                dist_col[w] = d
                parent_col[w] = r
                heapq.heappush(heap, (d, 0, w))
                if state.match_col[w] == _FREE:
                    relax_sink(d, rho[w], 0, w)
        if state.match_row[r] != _DUMMY:  # own dummy slot is open
            d = base - pi[r] - rho_d[r]
            if r not in done_dum and d < dist_dum.get(r, INF):
                dist_dum[r] = d
                heapq.heappush(heap, (d, 1, r))
                relax_sink(d, rho_d[r], 1, r)

    relax_from_row(u0, 0.0)

    target = None
    while heap:
        d, kind, idx = heapq.heappop(heap)
        if kind == 2:
            if d > best_key:
                continue  # stale sink entry
            target = best_target
            break
        if kind == 0:
            if idx in done_col or d > dist_col.get(idx, INF):
                continue
            done_col.add(idx)
            r = state.match_col[idx]
            if r >= 0:
                relax_from_row(int(r), d)
        else:
            if idx in done_dum or d > dist_dum.get(idx, INF):
                continue
            done_dum.add(idx)
            # A matched dummy slot has no outgoing residual edge besides its
            # owner, and the owner was necessarily entered first; free slots
            # only feed the sink. Nothing to expand.
    if target is None:
        raise CertificateError("augmentation found no reachable target")

    if require_improvement:
        true_cost = best_key + state.pot_floor + pi[u0]
        if true_cost >= -1e-12:
            return False

    d_star = best_dist
    # Dual updates: only nodes finalized strictly below the target distance
    # move, which preserves tightness of matched edges and non-negativity of
    # every reduced gain.
    for w in done_col:
        dw = dist_col[w]
        if dw < d_star:
            rho[w] += dw - d_star
            if rho[w] < state.pot_floor:
                state.pot_floor = rho[w]
    for r in done_dum:
        dr = dist_dum[r]
        if dr < d_star:
            rho_d[r] += dr - d_star
            if rho_d[r] < state.pot_floor:
                state.pot_floor = rho_d[r]
    for r, base in rows_entry.items():
        if r != u0 and base < d_star:
            pi[r] += d_star - base
    pi[u0] += d_star

    # Flip the alternating path, ending with u0 gaining an assignment.
    kind, idx = target
    if kind == 1:
        r = idx
        nxt = int(state.match_row[r])
        state.match_row[r] = _DUMMY
    else:
        r = int(parent_col[idx])
        nxt = int(state.match_row[r])
        state.match_row[r] = idx
        state.match_col[idx] = r
    while r != u0:
        if nxt < 0:
            raise CertificateError("alternating path reconstruction failed")
        w = nxt
        r = int(parent_col[w])
        nxt = int(state.match_row[r])
        state.match_row[r] = w
        state.match_col[w] = r
    return True


def _assemble(state: _MatcherState) -> Tracking:
    inst = state.instance
    n = inst.n
    ids = inst.ids
    succ = {}
    arc_cost_of = {}
    for u, w, c in zip(inst.edge_source, inst.edge_target, inst.edge_cost):
        arc_cost_of[(int(u), int(w))] = float(c)
    objective = 0.0
    for u in range(n):
        w = int(state.match_row[u])
        if w >= 0:
            succ[u] = w
            objective += arc_cost_of[(u, w)]
        else:
            objective += inst.end_penalties[u]
    tracks = []
    for w in range(n):
        if state.match_col[w] == _FREE:  # no predecessor: a track starts here
            objective += inst.start_penalties[w]
            points = [ids[w]]
            cur = w
            while cur in succ:
                cur = succ[cur]
                points.append(ids[cur])
            tracks.append(Track(tuple(points)))
    return Tracking.from_tracks(tracks, float(objective))


def solve(graph: CandidateGraph) -> Tracking:
    """Globally optimal tracking of the candidate graph.

    Always succeeds: the all-singletons tracking is feasible, so every
    out-copy can at worst fall back to its penalty slot.
    """
    instance = MatchingInstance(graph)
    if instance.n == 0:
        return Tracking.from_tracks([], 0.0)
    rows_targets, rows_gains = _pruned_rows(instance)
    state = _MatcherState(instance, rows_targets, rows_gains)
    for u in range(instance.n):
        if rows_targets[u].size:
            _augment(state, u)
        else:
            state.match_row[u] = _DUMMY
    return _assemble(state)


# ---------------------------------------------------------------------------
# Exhaustive oracle
# ---------------------------------------------------------------------------

def brute_force(graph: CandidateGraph) -> Tracking:
    """Exact optimum by enumerating predecessor/successor assignments.

    Walks the spots in order; each spot either ends its track (end penalty)
    or links to a later spot whose in-slot is still free. Memoized on the
    set of already-claimed in-slots, so the full assignment space is covered
    without revisiting states. Limited to 14 spots.
    """
    inst = MatchingInstance(graph)
    n = inst.n
    if n > _BRUTE_FORCE_LIMIT:
        raise EnumerationLimitError(
            f"brute force limited to {_BRUTE_FORCE_LIMIT} spots, got {n}")
    if n == 0:
        return Tracking.from_tracks([], 0.0)

    arcs_by_source: list[list[tuple[int, float]]] = [[] for _ in range(n)]
    for u, w, c in zip(inst.edge_source, inst.edge_target, inst.edge_cost):
        arcs_by_source[int(u)].append((int(w), float(c)))
    c2 = inst.start_penalties
    c3 = inst.end_penalties
    total_c2 = float(c2.sum())

    memo: dict[tuple[int, int], float] = {}

    def masked_start_penalties(mask: int) -> float:
        s = 0.0
        while mask:
            bit = mask & -mask
            s += c2[bit.bit_length() - 1]
            mask ^= bit
        return s

    def best(i: int, mask: int) -> float:
        if i == n:
            return total_c2 - masked_start_penalties(mask)
        key = (i, mask)
        val = memo.get(key)
        if val is not None:
            return val
        val = c3[i] + best(i + 1, mask)
        for w, cost in arcs_by_source[i]:
            bit = 1 << w
            if not mask & bit:
                val = min(val, cost + best(i + 1, mask | bit))
        memo[key] = val
        return val

    objective = best(0, 0)

    # Reconstruct one optimal assignment by replaying the argmin choices.
    succ: dict[int, int] = {}
    has_pred = 0
    mask = 0
    for i in range(n):
        stay = c3[i] + best(i + 1, mask)
        choice = None
        value = stay
        for w, cost in arcs_by_source[i]:
            bit = 1 << w
            if not mask & bit:
                cand = cost + best(i + 1, mask | bit)
                if cand < value - 1e-12:
                    value, choice = cand, w
        if choice is not None:
            succ[i] = choice
            mask |= 1 << choice
            has_pred |= 1 << choice
    tracks = []
    for w in range(n):
        if not has_pred & (1 << w):
            points = [inst.ids[w]]
            cur = w
            while cur in succ:
                cur = succ[cur]
                points.append(inst.ids[cur])
            tracks.append(Track(tuple(points)))
    return Tracking.from_tracks(tracks, float(objective))


# ---------------------------------------------------------------------------
# Optimality certificate
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DualCertificate:
    """Feasible dual potentials proving a tracking optimal.

    start_potentials bound the start penalties (alpha <= c2), end_potentials
    the end penalties (beta <= c3), and for every arc
    ``cost - beta[source] - alpha[target] >= 0`` with equality on used arcs;
    slack vanishes on unmatched copies. Their sum equals the objective.
    """

    start_potentials: tuple[float, ...]
    end_potentials: tuple[float, ...]

    @property
    def value(self) -> float:
        return float(sum(self.start_potentials) + sum(self.end_potentials))


def _edge_index(inst: MatchingInstance) -> dict[tuple[int, int], int]:
    return {(int(u), int(w)): k
            for k, (u, w) in enumerate(zip(inst.edge_source, inst.edge_target))}


def _matched_pairs(tracking: Tracking, inst: MatchingInstance,
                   edges: dict[tuple[int, int], int]) -> dict[int, int]:
    """Row index -> column index of every link the tracking uses."""
    pairs: dict[int, int] = {}
    for a, b in tracking.used_arcs():
        try:
            u, w = inst.index[a], inst.index[b]
        except KeyError:
            raise MissingArcError(f"tracking references unknown spot in ({a}, {b})")
        if (u, w) not in edges:
            raise MissingArcError(f"link ({a}, {b}) is not in the candidate graph")
        pairs[u] = w
    return pairs


def certify(tracking: Tracking, graph: CandidateGraph,
            tolerance: float = 1e-9) -> DualCertificate:
    """Construct and verify an optimality certificate for a tracking.

    Independent of the solver: shortest distances in the residual graph of
    the proposed matching (Bellman-Ford from a virtual root tied to all
    unmatched copies) yield dual potentials whenever the tracking is
    optimal. A negative residual cycle or any violated dual condition means
    the tracking is not optimal and raises :class:`CertificateError`.
    """
    inst = MatchingInstance(graph)
    n = inst.n
    if n == 0:
        return DualCertificate((), ())
    edges = _edge_index(inst)
    pairs = _matched_pairs(tracking, inst, edges)
    matched_col = {w: u for u, w in pairs.items()}
    if len(matched_col) != len(pairs):
        raise CertificateError("two tracks share an in-copy")

    # Residual graph over gains. Node layout: rows 0..n-1, cols n..2n-1,
    # root Z = 2n. Z pins unmatched copies at potential zero and upper-bounds
    # every column potential.
    src: list[int] = []
    dst: list[int] = []
    wgt: list[float] = []
    Z = 2 * n
    for u, w, g in zip(inst.edge_source, inst.edge_target, inst.edge_gain):
        u, w, g = int(u), int(w), float(g)
        if pairs.get(u) == w:
            src.append(n + w); dst.append(u); wgt.append(-g)
        else:
            src.append(u); dst.append(n + w); wgt.append(g)
    for u in range(n):
        src.append(u); dst.append(Z); wgt.append(0.0)
        if u not in pairs:
            src.append(Z); dst.append(u); wgt.append(0.0)
    for w in range(n):
        src.append(Z); dst.append(n + w); wgt.append(0.0)
        if w not in matched_col:
            src.append(n + w); dst.append(Z); wgt.append(0.0)

    src_a = np.asarray(src, dtype=np.intp)
    dst_a = np.asarray(dst, dtype=np.intp)
    wgt_a = np.asarray(wgt, dtype=float)
    dist = np.full(2 * n + 1, np.inf)
    dist[Z] = 0.0
    for sweep in range(2 * n + 2):
        cand = dist[src_a] + wgt_a
        new = dist.copy()
        np.minimum.at(new, dst_a, cand)
        if np.array_equal(new, dist):
            break
        dist = new
    else:
        raise CertificateError(
            "residual graph has a negative cycle: tracking is not optimal")
    if not np.all(np.isfinite(dist)):
        raise CertificateError("certificate distances did not close")

    p_row = dist[:n]
    s = -p_row  # end-penalty slack per out-copy
    r = np.zeros(n)  # start-penalty slack per in-copy
    for w, u in matched_col.items():
        r[w] = inst.edge_gain[edges[(u, w)]] + p_row[u]

    alpha = inst.start_penalties + r
    beta = inst.end_penalties + s

    # Dual feasibility.
    if np.any(r > tolerance) or np.any(s > tolerance):
        raise CertificateError("a dual potential exceeds its penalty bound")
    reduced = (inst.edge_cost - beta[inst.edge_source] - alpha[inst.edge_target])
    if np.any(reduced < -tolerance):
        raise CertificateError("an arc has negative reduced cost")
    # Complementary slackness.
    for u, w in pairs.items():
        if abs(reduced[edges[(u, w)]]) > tolerance:
            raise CertificateError("a used arc is not tight")
    for u in range(n):
        if u not in pairs and abs(s[u]) > tolerance:
            raise CertificateError("an unmatched out-copy has nonzero slack")
    for w in range(n):
        if w not in matched_col and abs(r[w]) > tolerance:
            raise CertificateError("an unmatched in-copy has nonzero slack")
    dual_value = float(alpha.sum() + beta.sum())
    scale = max(1.0, abs(tracking.objective))
    if abs(dual_value - tracking.objective) > tolerance * scale:
        raise CertificateError(
            f"duality gap {dual_value - tracking.objective:.3e}")
    return DualCertificate(tuple(float(v) for v in alpha),
                           tuple(float(v) for v in beta))


# ---------------------------------------------------------------------------
# Warm-started re-optimization
# ---------------------------------------------------------------------------

def reoptimize(graph: CandidateGraph, removed_arcs: Iterable[tuple[int, int]],
               previous: Tracking) -> Tracking:
    """Optimal tracking after deleting arcs, repairing ``previous`` in place.

    If none of the removed arcs was used, the previous tracking stays
    optimal and is returned unchanged. Otherwise the affected links are
    unmatched and only their endpoints (plus any newly profitable
    reassignments) are re-augmented under the previous dual potentials; a
    full re-solve is the fallback if the repair cannot be certified.
    """
    removed = {(int(a), int(b)) for a, b in removed_arcs}
    used = set(previous.used_arcs())
    if not removed & used:
        return previous

    reduced_graph = graph.without_arcs(removed)
    try:
        cert = certify(previous, graph)
    except CertificateError:
        return solve(reduced_graph)

    inst = MatchingInstance(reduced_graph)
    n = inst.n
    surviving: dict[int, int] = {}
    freed_rows: list[int] = []
    for a, b in used:
        u, w = inst.index[a], inst.index[b]
        if (a, b) in removed:
            freed_rows.append(u)
        else:
            surviving[u] = w

    rows_targets, rows_gains = _pruned_rows(
        inst, keep_pairs={(u, w) for u, w in surviving.items()})
    state = _MatcherState(inst, rows_targets, rows_gains)
    state.pi = np.asarray(cert.end_potentials) - inst.end_penalties
    state.rho = np.asarray(cert.start_potentials) - inst.start_penalties
    state.pot_floor = min(0.0, float(state.rho.min()))
    for u in range(n):
        state.match_row[u] = _DUMMY
    for u, w in surviving.items():
        state.match_row[u] = w
        state.match_col[w] = u
    for u in freed_rows:
        state.match_row[u] = _FREE

    budget = n
    augmentations = 0
    try:
        for u in sorted(freed_rows):
            _augment(state, u)
            augmentations += 1
            if augmentations > budget:
                raise CertificateError("repair budget exceeded")
        # Freed in-copies may now attract spots that sat on their penalty
        # slot; sweep those until no strictly improving path remains.
        improved = True
        while improved:
            improved = False
            for u in range(n):
                if state.match_row[u] == _DUMMY and rows_targets[u].size:
                    state.match_row[u] = _FREE
                    if _augment(state, u, require_improvement=True):
                        improved = True
                        augmentations += 1
                        if augmentations > budget:
                            raise CertificateError("repair budget exceeded")
                    elif state.match_row[u] == _FREE:
                        state.match_row[u] = _DUMMY
        repaired = _assemble(state)
        certify(repaired, reduced_graph)
        return repaired
    except CertificateError:
        return solve(reduced_graph)
