"""Diffusion statistics, radius selection, outlier feedback, and scoring.

MSD curves use the time-averaged estimator over all spot pairs at each
frame lag; diffusion coefficients come from a weighted linear fit of the
first few lags with a free intercept that absorbs the localization-noise
floor. The recommended tracking radius inverts the 2D first-passage
probability ``P(R, t) = 1 - exp(-R^2 / (4 D t))``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .graphgen import CandidateGraph, GraphParams, build_graph
from .model import Calibration, Spot, SpotSet, Track, Tracking
from .simulator import GroundTruth
from .solver import reoptimize, solve

MIN_TRACK_POINTS = 5  # shorter tracks give hopeless D estimates


class TrackTooShortError(ValueError):
    """Track is below the minimum length for the requested statistic."""


class DegenerateCurveError(ValueError):
    """MSD curve has too few lags to fit a line."""


@dataclass(frozen=True)
class DiffusionEstimate:
    track_id: int
    diffusion: float  # m^2/s; clamped to 0 when the fitted slope is negative
    n_points: int
    msd_curve: tuple[tuple[int, float], ...]  # (lag frames, MSD px^2)
    clamped: bool = False

    @property
    def log10_diffusion(self) -> float:
        return math.log10(self.diffusion) if self.diffusion > 0 else -math.inf


@dataclass(frozen=True)
class FeedbackReport:
    iterations: int
    arcs_removed: tuple[tuple[tuple[int, int], ...], ...]  # per iteration
    tracking: Tracking
    converged: bool


@dataclass(frozen=True)
class ConnectionRates:
    """False-positive / false-negative link rates against ground truth."""

    fp_rate: float
    fn_rate: float
    n_computed: int
    n_false_positive: int
    n_truth: int
    n_false_negative: int


def msd(track: Track, spots: SpotSet, max_lag: int
        ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Time-averaged MSD over all ordered pairs at each frame lag.

    Returns (lags, msd values in px^2, pair counts) for every lag in
    1..max_lag that has at least one pair. Frame differences are the true
    ones, so blink gaps contribute to the correct lag.
    """
    if len(track) < 2:
        raise TrackTooShortError("MSD needs at least two points")
    pts = [spots.by_id[p] for p in track.points]
    frames = np.array([p.frame for p in pts])
    xs = np.array([p.x for p in pts])
    ys = np.array([p.y for p in pts])
    sums: dict[int, float] = {}
    counts: dict[int, int] = {}
    n = len(pts)
    for i in range(n):
        lag = frames[i + 1:] - frames[i]
        keep = (lag >= 1) & (lag <= max_lag)
        d2 = (xs[i + 1:][keep] - xs[i]) ** 2 + (ys[i + 1:][keep] - ys[i]) ** 2
        for l, v in zip(lag[keep], d2):
            sums[int(l)] = sums.get(int(l), 0.0) + float(v)
            counts[int(l)] = counts.get(int(l), 0) + 1
    lags = np.array(sorted(sums), dtype=int)
    values = np.array([sums[l] / counts[l] for l in lags])
    weights = np.array([counts[l] for l in lags], dtype=float)
    return lags, values, weights


def estimate_diffusion(lags: np.ndarray, values: np.ndarray,
                       counts: np.ndarray, calibration: Calibration,
                       n_fit: int = 3) -> tuple[float, bool]:
    """Diffusion coefficient (m^2/s) from an MSD curve.

    Weighted least squares of ``msd = slope * lag + intercept`` over the
    first n_fit lags (weights = pair counts); the free intercept soaks up
    static localization error. ``slope = 4 D dt / px^2``; a negative slope
    clamps to zero and is flagged.
    """
    if len(lags) < 2:
        raise DegenerateCurveError("need at least two lags to fit a slope")
    k = min(n_fit, len(lags))
    x = np.asarray(lags[:k], dtype=float)
    y = np.asarray(values[:k], dtype=float)
    w = np.asarray(counts[:k], dtype=float)
    sw = w.sum()
    mx = (w * x).sum() / sw
    my = (w * y).sum() / sw
    var = (w * (x - mx) ** 2).sum()
    if var <= 0:
        raise DegenerateCurveError("lags are degenerate")
    slope = (w * (x - mx) * (y - my)).sum() / var
    d = slope * calibration.pixel_size ** 2 / (4.0 * calibration.frame_interval)
    if d < 0:
        return 0.0, True
    return float(d), False


def diffusion_estimates(tracking: Tracking, spots: SpotSet,
                        max_lag: int = 5, n_fit: int = 3,
                        min_points: int = MIN_TRACK_POINTS
                        ) -> list[DiffusionEstimate]:
    """Per-track estimates, skipping tracks below the length cutoff."""
    out = []
    for track_id, track in enumerate(tracking.tracks):
        if len(track) < min_points:
            continue
        lags, values, counts = msd(track, spots, max_lag)
        if len(lags) < 2:
            continue
        d, clamped = estimate_diffusion(lags, values, counts,
                                        spots.calibration, n_fit)
        out.append(DiffusionEstimate(
            track_id=track_id, diffusion=d, n_points=len(track),
            msd_curve=tuple((int(l), float(v)) for l, v in zip(lags, values)),
            clamped=clamped))
    return out


def radius_for_quantile(diffusion: float, gap: int, p: float,
                        calibration: Calibration) -> float:
    """Radius (pixels) containing a fraction p of displacements over ``gap``
    frames: inverts ``P(R, t) = 1 - exp(-R^2 / (4 D t))``."""
    if not 0 < p < 1:
        raise ValueError("p must be strictly between 0 and 1")
    t = gap * calibration.frame_interval
    r_m = math.sqrt(4.0 * diffusion * t * math.log(1.0 / (1.0 - p)))
    return r_m / calibration.pixel_size


def _robust_track_diffusion(steps_d2_per_gap: np.ndarray,
                            calibration: Calibration) -> float:
    """Median-based D from squared step lengths normalized per frame gap.

    Squared 2D Gaussian steps are exponential; the median of an exponential
    is ln 2 times its mean, hence the correction.
    """
    med = float(np.median(steps_d2_per_gap))
    return (med / math.log(2.0)) * calibration.pixel_size ** 2 \
        / (4.0 * calibration.frame_interval)


def detect_leaps(tracking: Tracking, spots: SpotSet,
                 threshold_radius: float | None = None,
                 probability: float = 0.99,
                 floor: float = 3.0) -> set[tuple[int, int]]:
    """Used arcs whose gap-normalized displacement marks a likely mislink.

    Steps are normalized by sqrt(gap) (Brownian scaling) so blink gaps are
    not flagged spuriously. With no explicit threshold each track gets its
    own: the radius containing ``probability`` of one-frame displacements at
    the track's median-based diffusion estimate, floored at ``floor``
    pixels. Joins are never leaps.
    """
    leaps: set[tuple[int, int]] = set()
    for track in tracking.tracks:
        pts = [spots.by_id[p] for p in track.points]
        steps = []
        for a, b in zip(pts, pts[1:]):
            gap = b.frame - a.frame
            if gap < 1:
                continue  # join link
            d2 = (a.x - b.x) ** 2 + (a.y - b.y) ** 2
            steps.append((a.id, b.id, d2 / gap))
        if not steps:
            continue
        if threshold_radius is None:
            d_rob = _robust_track_diffusion(
                np.array([s[2] for s in steps]), spots.calibration)
            thr = max(radius_for_quantile(d_rob, 1, probability,
                                          spots.calibration) if d_rob > 0
                      else 0.0, floor)
        else:
            thr = threshold_radius
        thr2 = thr * thr
        for a_id, b_id, d2_per_gap in steps:
            if d2_per_gap > thr2:
                leaps.add((a_id, b_id))
    return leaps


def feedback_loop(spots: SpotSet, params: GraphParams,
                  max_iterations: int = 5,
                  threshold_radius: float | None = None,
                  probability: float = 0.99,
                  floor: float = 3.0) -> FeedbackReport:
    """Track, forbid leap arcs, re-optimize; repeat until clean.

    Arcs are only ever removed, so the objective is non-decreasing across
    iterations. Hitting max_iterations with leaps still present returns the
    last tracking with converged=False.
    """
    graph = build_graph(spots, params)
    tracking = solve(graph)
    removed_per_iter: list[tuple[tuple[int, int], ...]] = []
    converged = False
    for _ in range(max_iterations):
        leaps = detect_leaps(tracking, spots, threshold_radius,
                             probability, floor)
        if not leaps:
            removed_per_iter.append(())
            converged = True
            break
        removed_per_iter.append(tuple(sorted(leaps)))
        tracking = reoptimize(graph, leaps, tracking)
        graph = graph.without_arcs(leaps)
    return FeedbackReport(
        iterations=len(removed_per_iter),
        arcs_removed=tuple(removed_per_iter),
        tracking=tracking,
        converged=converged)


# ---------------------------------------------------------------------------
# Ground-truth comparison
# ---------------------------------------------------------------------------

def truth_spotset(truth: GroundTruth) -> SpotSet:
    """Spot set of the visible ground-truth positions (perfect localizer).

    Spots outside the field are dropped, mirroring what any detector could
    see. Quality is 1 everywhere.
    """
    cal = truth.calibration
    records = []
    for p in range(truth.n_particles):
        for f in range(truth.n_frames):
            if not truth.visible[p, f]:
                continue
            x, y = float(truth.xs[p, f]), float(truth.ys[p, f])
            if 0 <= x < cal.image_width and 0 <= y < cal.image_height:
                records.append((f, p, x, y))
    records.sort()
    spots = tuple(Spot(id=i, frame=f, x=x, y=y, quality=1.0)
                  for i, (f, p, x, y) in enumerate(records))
    return SpotSet(spots=spots, frames=truth.n_frames, calibration=cal)


def _truth_connections(truth: GroundTruth) -> set[tuple[int, int, int]]:
    """(particle, frame_a, frame_b) for consecutive visible frames; spans
    blink gaps."""
    out = set()
    for p in range(truth.n_particles):
        vis = np.nonzero(truth.visible[p])[0]
        for a, b in zip(vis, vis[1:]):
            out.add((p, int(a), int(b)))
    return out


def _match_spots_to_truth(spots: SpotSet, truth: GroundTruth,
                          match_radius: float) -> dict[int, tuple[int, int]]:
    """Nearest-neighbor map spot id -> (particle, frame) within the radius."""
    mapping: dict[int, tuple[int, int]] = {}
    r2 = match_radius * match_radius
    for f in range(truth.n_frames):
        vis = np.nonzero(truth.visible[:, f])[0]
        lo_hi = spots.frame_slices.get(f)
        if lo_hi is None or vis.size == 0:
            continue
        tx = truth.xs[vis, f]
        ty = truth.ys[vis, f]
        for s in spots.spots[lo_hi[0]:lo_hi[1]]:
            d2 = (tx - s.x) ** 2 + (ty - s.y) ** 2
            k = int(np.argmin(d2))
            if d2[k] <= r2:
                mapping[s.id] = (int(vis[k]), f)
    return mapping


def evaluate(tracking: Tracking, spots: SpotSet, truth: GroundTruth,
             match_radius: float = 2.0) -> ConnectionRates:
    """Score computed links against ground-truth links.

    Spots are matched to truth positions by nearest neighbor within
    match_radius (exact when the spots ARE the truth positions). A computed
    inter-frame link is correct when both spots map to the same particle at
    consecutive visible frames; a join is correct when both spots map to
    the same particle and frame. The false-negative denominator counts only
    truth links whose two endpoints are both represented in the spot set.
    """
    mapping = _match_spots_to_truth(spots, truth, match_radius)
    truth_links = _truth_connections(truth)

    n_computed = 0
    n_fp = 0
    computed_truth_links: set[tuple[int, int, int]] = set()
    for a_id, b_id in tracking.used_arcs():
        n_computed += 1
        ma = mapping.get(a_id)
        mb = mapping.get(b_id)
        if ma is None or mb is None or ma[0] != mb[0]:
            n_fp += 1
            continue
        particle = ma[0]
        fa, fb = ma[1], mb[1]
        if fa == fb:  # join: same molecule, same frame - correct duplicate
            continue
        if (particle, fa, fb) in truth_links:
            computed_truth_links.add((particle, fa, fb))
        else:
            n_fp += 1

    represented: set[tuple[int, int]] = set(mapping.values())
    n_truth = 0
    n_fn = 0
    for particle, fa, fb in truth_links:
        if (particle, fa) in represented and (particle, fb) in represented:
            n_truth += 1
            if (particle, fa, fb) not in computed_truth_links:
                n_fn += 1

    return ConnectionRates(
        fp_rate=n_fp / n_computed if n_computed else 0.0,
        fn_rate=n_fn / n_truth if n_truth else 0.0,
        n_computed=n_computed,
        n_false_positive=n_fp,
        n_truth=n_truth,
        n_false_negative=n_fn)


# ---------------------------------------------------------------------------
# Exports
# ---------------------------------------------------------------------------

def export_diffusion_csv(estimates: Sequence[DiffusionEstimate], path) -> None:
    """``track_id,n_points,log10_D`` - one row per analyzable track."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["track_id", "n_points", "log10_D"])
        for e in estimates:
            writer.writerow([e.track_id, e.n_points, repr(e.log10_diffusion)])


def export_histogram_csv(estimates: Sequence[DiffusionEstimate], path,
                         lo: float = -16.0, hi: float = -10.0,
                         bin_width: float = 0.1) -> None:
    """Histogram of log10(D / m^2 s^-1), ``bin_left,count`` rows."""
    values = [e.log10_diffusion for e in estimates
              if math.isfinite(e.log10_diffusion)]
    edges = np.arange(lo, hi + bin_width, bin_width)
    counts, _ = np.histogram(values, bins=edges)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["bin_left", "count"])
        for left, count in zip(edges[:-1], counts):
            writer.writerow([repr(float(left)), int(count)])
