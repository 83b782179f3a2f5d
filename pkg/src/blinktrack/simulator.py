"""Synthetic ground truth and movies: Brownian walks, power-law blinking,
Gaussian spots on Gaussian white noise.

Every stochastic ingredient draws from its own generator keyed by
``(seed, stream, index)`` - one stream per particle for the walk, one per
particle for blinking, one per frame for pixel noise - so results are
bit-reproducible and independent of any internal parallelism or evaluation
order.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .model import Calibration, DataFormatError

AMPLITUDE = 1.0  # peak of every rendered spot; only S/N matters downstream
BACKGROUND = 0.1 * AMPLITUDE  # constant offset keeping pixels positive

_MOVIE_MAGIC = b"SMMV"
_MOVIE_VERSION = 1
_HEADER = struct.Struct("<4sIIIIdd")

_STREAM_WALK = 0
_STREAM_BLINK = 1
_STREAM_NOISE = 2


@dataclass(frozen=True)
class SimParams:
    """Knobs of one simulated experiment.

    diffusion is in m^2/s; field is the square image side in pixels; snr the
    ratio of spot amplitude to noise standard deviation (may be ``inf`` for
    noiseless movies). Blinking on/off durations follow a discrete power law
    ``p(k) ~ (k * frame_interval / tau)**alpha`` truncated at
    max_state_frames; alpha must be below -1.
    """

    diffusion: float
    n_particles: int
    n_frames: int
    field: int = 500
    snr: float = 3.0
    blinking: bool = False
    tau: float = 1.0
    alpha: float = -2.0
    max_state_frames: int = 100
    seed: int = 0

    def __post_init__(self):
        if not self.diffusion > 0:
            raise ValueError("diffusion must be positive")
        if not self.snr > 0:
            raise ValueError("snr must be positive")
        if self.n_frames < 2:
            raise ValueError("n_frames must be at least 2")
        if self.n_particles < 0:
            raise ValueError("n_particles must be non-negative")
        if self.field < 1:
            raise ValueError("field must be at least 1 pixel")
        if not self.alpha < -1:
            raise ValueError("alpha must be below -1")
        if self.max_state_frames < 1:
            raise ValueError("max_state_frames must be at least 1")


@dataclass(frozen=True, eq=False)
class GroundTruth:
    """True trajectories and visibility, continuous sub-pixel positions.

    xs, ys, visible are (n_particles, n_frames) arrays. Positions may leave
    the field; no reflection is applied, so diffusion statistics stay
    unbiased and out-of-frame spots simply do not render.
    """

    xs: np.ndarray
    ys: np.ndarray
    visible: np.ndarray
    params: SimParams | None
    calibration: Calibration

    @property
    def n_particles(self) -> int:
        return self.xs.shape[0]

    @property
    def n_frames(self) -> int:
        return self.xs.shape[1]

    def trajectories(self) -> Iterator[list[tuple[int, float, float, bool]]]:
        """Per-particle list of (frame, x, y, visible)."""
        for p in range(self.n_particles):
            yield [(f, float(self.xs[p, f]), float(self.ys[p, f]),
                    bool(self.visible[p, f])) for f in range(self.n_frames)]


@dataclass(frozen=True, eq=False)
class Movie:
    """Frame-major float32 pixel stack with calibration metadata."""

    pixels: np.ndarray  # (n_frames, height, width)
    calibration: Calibration

    def __post_init__(self):
        if self.pixels.ndim != 3:
            raise ValueError("pixels must be (n_frames, height, width)")
        if not np.all(np.isfinite(self.pixels)):
            raise ValueError("pixels must be finite")

    @property
    def n_frames(self) -> int:
        return self.pixels.shape[0]

    @property
    def height(self) -> int:
        return self.pixels.shape[1]

    @property
    def width(self) -> int:
        return self.pixels.shape[2]


def _rng(seed: int, stream: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream, index])


def step_sigma_px(diffusion: float, calibration: Calibration) -> float:
    """Per-axis standard deviation of a one-frame step, in pixels."""
    return math.sqrt(2.0 * diffusion * calibration.frame_interval) / calibration.pixel_size


def default_calibration(params: SimParams) -> Calibration:
    return Calibration(image_width=params.field, image_height=params.field)


def simulate_walks(params: SimParams,
                   calibration: Calibration | None = None) -> GroundTruth:
    """Brownian trajectories, uniform initial positions over the field.

    Each axis gains independent Gaussian increments of standard deviation
    ``sqrt(2 * D * frame_interval) / pixel_size`` per frame step.
    """
    cal = calibration or default_calibration(params)
    n, t = params.n_particles, params.n_frames
    sigma = step_sigma_px(params.diffusion, cal)
    xs = np.empty((n, t))
    ys = np.empty((n, t))
    for p in range(n):
        rng = _rng(params.seed, _STREAM_WALK, p)
        x0, y0 = rng.uniform(0.0, params.field, size=2)
        steps = rng.normal(0.0, sigma, size=(t - 1, 2))
        xs[p] = np.concatenate(([x0], x0 + np.cumsum(steps[:, 0])))
        ys[p] = np.concatenate(([y0], y0 + np.cumsum(steps[:, 1])))
    visible = simulate_blinking(params, t)
    return GroundTruth(xs=xs, ys=ys, visible=visible, params=params,
                       calibration=cal)


def state_duration_pmf(params: SimParams) -> np.ndarray:
    """Truncated power-law pmf over state durations 1..max_state_frames.

    ``(k * dt / tau)**alpha`` is proportional to ``k**alpha``, so tau and
    the frame interval drop out after normalization; they are kept in the
    parameter set for interface fidelity.
    """
    k = np.arange(1, params.max_state_frames + 1, dtype=float)
    weights = k ** params.alpha
    return weights / weights.sum()


def simulate_blinking(params: SimParams, n_frames: int) -> np.ndarray:
    """(n_particles, n_frames) visibility mask.

    With blinking disabled everything is visible. Otherwise each particle
    starts on or off with a fair coin and alternates, durations drawn from
    the truncated power-law pmf.
    """
    n = params.n_particles
    if not params.blinking:
        return np.ones((n, n_frames), dtype=bool)
    pmf = state_duration_pmf(params)
    cdf = np.cumsum(pmf)
    visible = np.empty((n, n_frames), dtype=bool)
    for p in range(n):
        rng = _rng(params.seed, _STREAM_BLINK, p)
        state = bool(rng.random() < 0.5)
        filled = 0
        while filled < n_frames:
            duration = int(np.searchsorted(cdf, rng.random())) + 1
            end = min(filled + duration, n_frames)
            visible[p, filled:end] = state
            filled = end
            state = not state
    return visible


def render_movie(truth: GroundTruth, params: SimParams) -> Movie:
    """Rasterize visible particles as 2D Gaussians and add white noise.

    Each spot contributes ``A * exp(-(dx^2 + dy^2) / (2 sigma^2))`` within a
    box of half-width 6 sigma around its (sub-pixel) center, on top of a
    constant background; noise of standard deviation ``A / snr`` is then
    added to every pixel.
    """
    cal = truth.calibration
    w, h = cal.image_width, cal.image_height
    sigma = cal.psf_sigma
    half = int(math.ceil(6.0 * sigma))
    noise_sigma = AMPLITUDE / params.snr if math.isfinite(params.snr) else 0.0
    frames = np.empty((truth.n_frames, h, w), dtype=np.float32)
    for f in range(truth.n_frames):
        img = np.full((h, w), BACKGROUND, dtype=float)
        for p in range(truth.n_particles):
            if not truth.visible[p, f]:
                continue
            x, y = truth.xs[p, f], truth.ys[p, f]
            cx, cy = int(round(x)), int(round(y))
            x0, x1 = max(0, cx - half), min(w, cx + half + 1)
            y0, y1 = max(0, cy - half), min(h, cy + half + 1)
            if x0 >= x1 or y0 >= y1:
                continue  # wandered out of frame
            gx = np.arange(x0, x1, dtype=float) - x
            gy = np.arange(y0, y1, dtype=float) - y
            img[y0:y1, x0:x1] += AMPLITUDE * np.exp(
                -(gx[None, :] ** 2 + gy[:, None] ** 2) / (2.0 * sigma ** 2))
        if noise_sigma > 0.0:
            rng = _rng(params.seed, _STREAM_NOISE, f)
            img += rng.normal(0.0, noise_sigma, size=(h, w))
        frames[f] = img.astype(np.float32)
    return Movie(pixels=frames, calibration=cal)


def simulate_movie(params: SimParams,
                   calibration: Calibration | None = None
                   ) -> tuple[GroundTruth, Movie]:
    """Convenience: walks, blinking, and rendering in one call."""
    truth = simulate_walks(params, calibration)
    return truth, render_movie(truth, params)


# ---------------------------------------------------------------------------
# Movie container: "SMMV", little-endian u32 version/width/height/n_frames,
# f64 pixel_size_m and frame_interval_s, then f32 pixels frame-major
# row-major. Bit-exact round trip.
# ---------------------------------------------------------------------------

def write_movie(movie: Movie, path) -> None:
    header = _HEADER.pack(_MOVIE_MAGIC, _MOVIE_VERSION,
                          movie.width, movie.height, movie.n_frames,
                          movie.calibration.pixel_size,
                          movie.calibration.frame_interval)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(movie.pixels, dtype="<f4").tobytes())


def read_movie(path, psf_sigma: float | None = None) -> Movie:
    with open(path, "rb") as fh:
        raw = fh.read(_HEADER.size)
        if len(raw) < _HEADER.size:
            raise DataFormatError(f"{path!s}: truncated movie header")
        magic, version, width, height, n_frames, pixel_size, dt = _HEADER.unpack(raw)
        if magic != _MOVIE_MAGIC:
            raise DataFormatError(f"{path!s}: bad magic {magic!r}")
        if version != _MOVIE_VERSION:
            raise DataFormatError(f"{path!s}: unsupported version {version}")
        data = fh.read()
    expected = width * height * n_frames * 4
    if len(data) != expected:
        raise DataFormatError(
            f"{path!s}: expected {expected} pixel bytes, found {len(data)}")
    pixels = np.frombuffer(data, dtype="<f4").reshape(n_frames, height, width)
    cal = Calibration(pixel_size=pixel_size, frame_interval=dt,
                      image_width=width, image_height=height,
                      psf_sigma=psf_sigma if psf_sigma is not None else 0.0)
    return Movie(pixels=pixels.copy(), calibration=cal)


def write_pgm(movie: Movie, path, frame: int = 0) -> None:
    """16-bit binary PGM of one frame, min-max scaled for eyeballing."""
    img = movie.pixels[frame].astype(float)
    lo, hi = float(img.min()), float(img.max())
    scale = 65535.0 / (hi - lo) if hi > lo else 0.0
    data = ((img - lo) * scale).astype(">u2")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{movie.width} {movie.height}\n65535\n".encode("ascii"))
        fh.write(data.tobytes())


# ---------------------------------------------------------------------------
# Ground-truth CSV: particle_id,frame,x,y,visible
# ---------------------------------------------------------------------------

def write_truth_csv(truth: GroundTruth, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("particle_id,frame,x,y,visible\n")
        for p in range(truth.n_particles):
            for f in range(truth.n_frames):
                fh.write(f"{p},{f},{float(truth.xs[p, f])!r},"
                         f"{float(truth.ys[p, f])!r},"
                         f"{int(truth.visible[p, f])}\n")


def read_truth_csv(path, calibration: Calibration | None = None) -> GroundTruth:
    import csv as _csv
    rows: dict[int, list[tuple[int, float, float, bool]]] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        reader = _csv.reader(fh)
        header = next(reader, None)
        if header != ["particle_id", "frame", "x", "y", "visible"]:
            raise DataFormatError(f"bad ground-truth header in {path!s}: {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                rows.setdefault(int(row[0]), []).append(
                    (int(row[1]), float(row[2]), float(row[3]), row[4] == "1"))
            except (ValueError, IndexError) as exc:
                raise DataFormatError(f"{path!s}:{lineno}: {exc}") from None
    if not rows:
        raise DataFormatError(f"{path!s}: no trajectories")
    n_frames = max(len(v) for v in rows.values())
    n = max(rows) + 1
    xs = np.zeros((n, n_frames))
    ys = np.zeros((n, n_frames))
    visible = np.zeros((n, n_frames), dtype=bool)
    for p, entries in rows.items():
        entries.sort(key=lambda e: e[0])
        if [e[0] for e in entries] != list(range(n_frames)):
            raise DataFormatError(
                f"{path!s}: particle {p} does not cover frames 0..{n_frames - 1}")
        for f, x, y, vis in entries:
            xs[p, f], ys[p, f], visible[p, f] = x, y, vis
    if calibration is None:
        side = int(max(xs.max(), ys.max())) + 1
        calibration = Calibration(image_width=max(side, 1),
                                  image_height=max(side, 1))
    return GroundTruth(xs=xs, ys=ys, visible=visible, params=None,
                       calibration=calibration)
