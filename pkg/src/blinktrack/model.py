"""Core data model: calibration, spots, tracks, and objective bookkeeping.

All tracking-side quantities live in pixel/frame units; SI units enter only
through :class:`Calibration`, which the analysis layer uses to convert
mean squared displacements into diffusion coefficients.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np

if TYPE_CHECKING:  # pragma: no cover
    from .graphgen import CandidateGraph

DEFAULT_PIXEL_SIZE = 100e-9  # meters per pixel
DEFAULT_FRAME_INTERVAL = 0.1  # seconds per frame
DEFAULT_PSF_FWHM = 300e-9  # diffraction-limited spot width, meters

_FWHM_TO_SIGMA = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))

SPOT_CSV_HEADER = ["frame", "x", "y", "quality", "amplitude"]
TRACK_CSV_HEADER = ["track_id", "frame", "x", "y"]


class DataFormatError(Exception):
    """A file does not match its declared on-disk format."""


class MissingArcError(Exception):
    """A tracking uses a spot pair that is not an arc of the candidate graph."""


def psf_sigma_from_fwhm(fwhm_m: float = DEFAULT_PSF_FWHM,
                        pixel_size: float = DEFAULT_PIXEL_SIZE) -> float:
    """Convert a spot FWHM in meters to a Gaussian sigma in pixels."""
    return fwhm_m * _FWHM_TO_SIGMA / pixel_size


@dataclass(frozen=True)
class Calibration:
    """Physical scale of a recording.

    pixel_size is meters per pixel, frame_interval seconds per frame, and
    psf_sigma the standard deviation (in pixels) of the rendered 2D Gaussian
    spot profile.
    """

    pixel_size: float = DEFAULT_PIXEL_SIZE
    frame_interval: float = DEFAULT_FRAME_INTERVAL
    image_width: int = 500
    image_height: int = 500
    psf_sigma: float = field(default=0.0)

    def __post_init__(self):
        for name in ("pixel_size", "frame_interval", "image_width",
                     "image_height"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")
        if self.psf_sigma == 0.0:
            object.__setattr__(
                self, "psf_sigma",
                psf_sigma_from_fwhm(DEFAULT_PSF_FWHM, self.pixel_size))
        if not self.psf_sigma > 0:
            raise ValueError("psf_sigma must be strictly positive")


@dataclass(frozen=True)
class Spot:
    """One localized (or simulated) point: frame index, position, quality.

    Coordinates are sub-pixel, in pixels. quality is a unitless detection
    confidence (the localizer uses the local signal-to-noise of the fitted
    amplitude). fit_converged is False when the Gaussian fit fell back to a
    plain intensity centroid.
    """

    id: int
    frame: int
    x: float
    y: float
    quality: float = 0.0
    amplitude: float | None = None
    fit_converged: bool = True

    def __post_init__(self):
        if self.frame < 0:
            raise ValueError("frame must be non-negative")
        if self.quality < 0:
            raise ValueError("quality must be non-negative")


@dataclass(frozen=True)
class SpotSet:
    """All spots of a recording, sorted by (frame, id), with unique ids."""

    spots: tuple[Spot, ...]
    frames: int
    calibration: Calibration

    def __post_init__(self):
        object.__setattr__(self, "spots", tuple(self.spots))
        ids = [s.id for s in self.spots]
        if len(set(ids)) != len(ids):
            raise ValueError("spot ids must be unique")
        keys = [(s.frame, s.id) for s in self.spots]
        if keys != sorted(keys):
            raise ValueError("spots must be sorted by (frame, id)")
        w, h = self.calibration.image_width, self.calibration.image_height
        for s in self.spots:
            if s.frame >= self.frames:
                raise ValueError(f"spot {s.id}: frame {s.frame} out of range")
            if not (0 <= s.x < w and 0 <= s.y < h):
                raise ValueError(f"spot {s.id}: position outside the image")

    def __len__(self) -> int:
        return len(self.spots)

    @cached_property
    def by_id(self) -> dict[int, Spot]:
        return {s.id: s for s in self.spots}

    @cached_property
    def frame_slices(self) -> dict[int, tuple[int, int]]:
        """Start/stop indices into ``spots`` for each frame."""
        out: dict[int, tuple[int, int]] = {}
        start = 0
        for i, s in enumerate(self.spots):
            if i == 0 or s.frame != self.spots[i - 1].frame:
                if i > 0:
                    out[self.spots[start].frame] = (start, i)
                start = i
        if self.spots:
            out[self.spots[start].frame] = (start, len(self.spots))
        return out

    def positions(self) -> np.ndarray:
        """(n, 2) array of x, y in spot order."""
        if not self.spots:
            return np.empty((0, 2))
        return np.array([(s.x, s.y) for s in self.spots])


@dataclass(frozen=True)
class Track:
    """Ordered spot ids of one molecule. Frames never decrease along the
    track; consecutive equal frames occur only across join links."""

    points: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "points", tuple(self.points))
        if not self.points:
            raise ValueError("a track cannot be empty")
        if len(set(self.points)) != len(self.points):
            raise ValueError("a track cannot repeat a spot")

    def __len__(self) -> int:
        return len(self.points)

    def links(self) -> list[tuple[int, int]]:
        """Consecutive id pairs, i.e. the arcs this track selects."""
        return list(zip(self.points[:-1], self.points[1:]))


@dataclass(frozen=True)
class Tracking:
    """A track partition: every spot of the input appears in exactly one
    track. objective is the tracking cost (sum of selected arc costs plus
    start/end penalties); log_likelihood is its negation."""

    tracks: tuple[Track, ...]
    objective: float
    log_likelihood: float

    @classmethod
    def from_tracks(cls, tracks: Iterable[Track], objective: float) -> "Tracking":
        return cls(tuple(tracks), objective, -objective)

    def used_arcs(self) -> list[tuple[int, int]]:
        """All consecutive spot-id pairs across all tracks."""
        out: list[tuple[int, int]] = []
        for t in self.tracks:
            out.extend(t.links())
        return out

    def track_of(self) -> dict[int, int]:
        """Map spot id -> track index."""
        return {p: i for i, t in enumerate(self.tracks) for p in t.points}


def verify_partition(tracking: Tracking, spots: SpotSet) -> None:
    """Raise if the tracking is not an exact partition of the spot set."""
    seen: list[int] = []
    for t in tracking.tracks:
        seen.extend(t.points)
    if len(seen) != len(set(seen)):
        raise ValueError("a spot appears in more than one track")
    if set(seen) != set(spots.by_id):
        raise ValueError("tracking does not cover the spot set exactly")
    for t in tracking.tracks:
        frames = [spots.by_id[p].frame for p in t.points]
        if any(b < a for a, b in zip(frames, frames[1:])):
            raise ValueError("track frames must be non-decreasing")


def recompute_objective(tracking: Tracking, graph: "CandidateGraph") -> float:
    """Re-derive the tracking cost from its structure.

    Sums the candidate-graph cost of every used arc plus one start penalty
    per track head and one end penalty per track tail. Raises
    :class:`MissingArcError` if a track uses a pair that is not an arc.
    """
    cost_of = graph.arc_costs
    start = graph.start_penalty_of
    end = graph.end_penalty_of
    total = 0.0
    for t in tracking.tracks:
        total += start(t.points[0]) + end(t.points[-1])
        for pair in t.links():
            try:
                total += cost_of[pair]
            except KeyError:
                raise MissingArcError(
                    f"link {pair} is not in the candidate graph") from None
    return total


# ---------------------------------------------------------------------------
# CSV interchange
#
# Spot CSV:  frame,x,y,quality,amplitude   (amplitude may be empty)
# Track CSV: track_id,frame,x,y
# Both UTF-8 with LF line endings; floats use repr() so a write/read/write
# round trip is bit-exact.
# ---------------------------------------------------------------------------

def _fmt(value: float) -> str:
    return repr(float(value))


def write_spots_csv(spots: SpotSet, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SPOT_CSV_HEADER)
        for s in spots.spots:
            amp = "" if s.amplitude is None else _fmt(s.amplitude)
            writer.writerow([s.frame, _fmt(s.x), _fmt(s.y), _fmt(s.quality), amp])


def read_spots_csv(path, calibration: Calibration | None = None,
                   frames: int | None = None) -> SpotSet:
    """Load a spot CSV. Ids are assigned in (frame, file order).

    When no calibration is given, one is synthesized with default physical
    scales and an image just large enough for the loaded positions.
    """
    rows = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != SPOT_CSV_HEADER:
            raise DataFormatError(f"bad spot CSV header in {path!s}: {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 5:
                raise DataFormatError(f"{path!s}:{lineno}: expected 5 columns")
            try:
                frame = int(row[0])
                x, y, quality = float(row[1]), float(row[2]), float(row[3])
                amplitude = float(row[4]) if row[4] != "" else None
            except ValueError as exc:
                raise DataFormatError(f"{path!s}:{lineno}: {exc}") from None
            rows.append((frame, x, y, quality, amplitude))
    rows.sort(key=lambda r: r[0])  # stable: keeps file order within a frame
    if calibration is None:
        w = int(max((r[1] for r in rows), default=0)) + 1
        h = int(max((r[2] for r in rows), default=0)) + 1
        calibration = Calibration(image_width=max(w, 1), image_height=max(h, 1))
    if frames is None:
        frames = max((r[0] for r in rows), default=-1) + 1
    spots = tuple(
        Spot(id=i, frame=f, x=x, y=y, quality=q, amplitude=a)
        for i, (f, x, y, q, a) in enumerate(rows))
    return SpotSet(spots=spots, frames=max(frames, 1), calibration=calibration)


def write_tracks_csv(tracking: Tracking, spots: SpotSet, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRACK_CSV_HEADER)
        for track_id, track in enumerate(tracking.tracks):
            for pid in track.points:
                s = spots.by_id[pid]
                writer.writerow([track_id, s.frame, _fmt(s.x), _fmt(s.y)])


def read_tracks_csv(path, calibration: Calibration | None = None,
                    frames: int | None = None) -> tuple[SpotSet, Tracking]:
    """Load a track CSV back into a spot set plus a tracking.

    The returned tracking carries ``nan`` as objective: track CSVs do not
    store costs, so the objective is only defined relative to a candidate
    graph (use :func:`recompute_objective`).
    """
    rows = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != TRACK_CSV_HEADER:
            raise DataFormatError(f"bad track CSV header in {path!s}: {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise DataFormatError(f"{path!s}:{lineno}: expected 4 columns")
            try:
                rows.append((int(row[0]), int(row[1]), float(row[2]), float(row[3])))
            except ValueError as exc:
                raise DataFormatError(f"{path!s}:{lineno}: {exc}") from None
    # Ids follow global (frame, file order) so the SpotSet stays sorted.
    order = sorted(range(len(rows)), key=lambda i: (rows[i][1], i))
    id_of_row = {row_idx: spot_id for spot_id, row_idx in enumerate(order)}
    if calibration is None:
        w = int(max((r[2] for r in rows), default=0)) + 1
        h = int(max((r[3] for r in rows), default=0)) + 1
        calibration = Calibration(image_width=max(w, 1), image_height=max(h, 1))
    if frames is None:
        frames = max((r[1] for r in rows), default=-1) + 1
    spots = tuple(
        Spot(id=id_of_row[i], frame=rows[i][1], x=rows[i][2], y=rows[i][3])
        for i in order)
    spot_set = SpotSet(spots=spots, frames=max(frames, 1), calibration=calibration)
    tracks: dict[int, list[int]] = {}
    for row_idx, (track_id, _, _, _) in enumerate(rows):
        tracks.setdefault(track_id, []).append(id_of_row[row_idx])
    tracking = Tracking.from_tracks(
        (Track(tuple(pts)) for _, pts in sorted(tracks.items())),
        objective=float("nan"))
    return spot_set, tracking
