"""Spot detection and sub-pixel localization.

Frames are band-passed with a Laplacian-of-Gaussian (Mexican-hat) filter at
the PSF scale, local maxima above a noise-scaled threshold become
candidates, and each candidate is refined by a Gauss-Newton least-squares
fit of a fixed-width 2D Gaussian plus constant offset. The detection
threshold is deliberately permissive: false positives are cheap to leave
untracked once penalties are quality-scaled, false negatives are not
recoverable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import ndimage

from .model import Calibration, Spot, SpotSet
from .simulator import Movie

_MAD_TO_SIGMA = 1.4826022185056018  # 1 / Phi^-1(3/4)


@dataclass(frozen=True)
class LocalizerParams:
    """detection_threshold is in multiples of the estimated filtered-noise
    sigma; fit_window the odd side length of the fit region in pixels."""

    detection_threshold: float = 3.0
    fit_window: int = 7
    max_fit_iterations: int = 20
    min_separation: float = 3.0

    def __post_init__(self):
        if not self.detection_threshold > 0:
            raise ValueError("detection_threshold must be positive")
        if self.fit_window < 3 or self.fit_window % 2 == 0:
            raise ValueError("fit_window must be odd and at least 3")
        if self.max_fit_iterations < 1:
            raise ValueError("max_fit_iterations must be at least 1")
        if self.min_separation < 0:
            raise ValueError("min_separation must be non-negative")


class FitResult(NamedTuple):
    x: float
    y: float
    amplitude: float
    background: float
    converged: bool


def estimate_noise_sigma(values: np.ndarray) -> float:
    """Robust sigma via the median absolute deviation."""
    v = np.asarray(values, dtype=float).ravel()
    med = np.median(v)
    return _MAD_TO_SIGMA * float(np.median(np.abs(v - med)))


def detect(frame: np.ndarray, params: LocalizerParams,
           psf_sigma: float) -> np.ndarray:
    """Candidate maxima as an (n, 2) integer array of (x, y) pixel indices.

    Maxima of the inverted LoG response above
    ``detection_threshold * sigma_hat`` survive; of any pair closer than
    min_separation only the stronger is kept.
    """
    img = np.asarray(frame, dtype=float)
    # The truncated LoG kernel does not sum exactly to zero, so a constant
    # background leaks a small DC response; removing the median first keeps
    # noiseless frames clean.
    response = -ndimage.gaussian_laplace(img - np.median(img),
                                         sigma=psf_sigma)
    sigma_hat = estimate_noise_sigma(response)
    # On (nearly) noiseless frames the MAD collapses and numerical ripple
    # would qualify as maxima; a tiny peak-relative floor screens that out
    # without touching any realistic noise regime.
    floor = 1e-6 * float(np.abs(response).max(initial=0.0))
    threshold = params.detection_threshold * max(sigma_hat, floor)
    neighbors = np.ones((3, 3), dtype=bool)
    neighbors[1, 1] = False  # strict maxima: plateaus are not peaks
    peaks = (response > ndimage.maximum_filter(
        response, footprint=neighbors, mode="nearest")) \
        & (response > threshold)
    ys, xs = np.nonzero(peaks)
    if xs.size == 0:
        return np.empty((0, 2), dtype=int)
    order = np.argsort(-response[ys, xs], kind="stable")
    xs, ys = xs[order], ys[order]
    kept_x: list[int] = []
    kept_y: list[int] = []
    min_sep2 = params.min_separation ** 2
    for x, y in zip(xs, ys):
        d2 = [(x - kx) ** 2 + (y - ky) ** 2 for kx, ky in zip(kept_x, kept_y)]
        if all(d >= min_sep2 for d in d2):
            kept_x.append(int(x))
            kept_y.append(int(y))
    out = np.array(list(zip(kept_x, kept_y)), dtype=int)
    return out[np.lexsort((out[:, 0], out[:, 1]))]  # canonical (y, x) order


def fit_gaussian(frame: np.ndarray, candidate: tuple[int, int],
                 params: LocalizerParams, psf_sigma: float) -> FitResult:
    """Least-squares refinement of one candidate.

    Fits amplitude, center, and constant offset of a Gaussian of fixed
    width psf_sigma over the fit window by Gauss-Newton. If the iteration
    diverges (leaves the window, goes non-finite, or exhausts the budget
    without settling) the background-subtracted intensity centroid is
    returned instead, marked unconverged.
    """
    cx, cy = candidate
    half = params.fit_window // 2
    img = np.asarray(frame, dtype=float)
    patch = img[cy - half:cy + half + 1, cx - half:cx + half + 1]
    if patch.shape != (params.fit_window, params.fit_window):
        raise ValueError("candidate does not have a full fit window")
    gx, gy = np.meshgrid(np.arange(cx - half, cx + half + 1, dtype=float),
                         np.arange(cy - half, cy + half + 1, dtype=float))
    border = np.concatenate([patch[0], patch[-1], patch[1:-1, 0], patch[1:-1, -1]])
    b = float(np.median(border))
    a = max(float(patch[half, half]) - b, 1e-6)
    x, y = float(cx), float(cy)
    inv_two_s2 = 1.0 / (2.0 * psf_sigma ** 2)
    inv_s2 = 1.0 / psf_sigma ** 2
    flat = patch.ravel()
    converged = False
    for _ in range(params.max_fit_iterations):
        dx = gx - x
        dy = gy - y
        e = np.exp(-(dx * dx + dy * dy) * inv_two_s2)
        model = a * e + b
        resid = flat - model.ravel()
        jac = np.column_stack([
            e.ravel(),
            (a * e * dx * inv_s2).ravel(),
            (a * e * dy * inv_s2).ravel(),
            np.ones(flat.size),
        ])
        try:
            delta, *_ = np.linalg.lstsq(jac, resid, rcond=None)
        except np.linalg.LinAlgError:
            break
        a += delta[0]
        x += delta[1]
        y += delta[2]
        b += delta[3]
        if not (np.isfinite(x) and np.isfinite(y) and np.isfinite(a)):
            break
        if abs(x - cx) > half + 1 or abs(y - cy) > half + 1:
            break  # ran away from the candidate
        if abs(delta[1]) < 1e-4 and abs(delta[2]) < 1e-4:
            converged = True
            break
    if converged and a > 0:
        return FitResult(x, y, a, b, True)
    # Centroid fallback on the background-subtracted window.
    w = np.clip(patch - b, 0.0, None)
    total = w.sum()
    if total <= 0:
        return FitResult(float(cx), float(cy), max(a, 0.0), b, False)
    return FitResult(float((w * gx).sum() / total),
                     float((w * gy).sum() / total),
                     max(float(patch[half, half] - b), 0.0), b, False)


def localize_movie(movie: Movie, params: LocalizerParams | None = None) -> SpotSet:
    """Detect and fit every frame; ids run in (frame, y, x) order.

    Candidates too close to the border for a full fit window are dropped.
    Quality is the fitted amplitude over the robust noise sigma of the raw
    frame - a local signal-to-noise ratio.
    """
    params = params or LocalizerParams()
    cal = movie.calibration
    half = params.fit_window // 2
    records: list[tuple[int, float, float, float, float, bool]] = []
    for f in range(movie.n_frames):
        frame = movie.pixels[f].astype(float)
        noise = max(estimate_noise_sigma(frame), 1e-12)
        for x, y in detect(frame, params, cal.psf_sigma):
            if not (half <= x < movie.width - half
                    and half <= y < movie.height - half):
                continue
            fit = fit_gaussian(frame, (int(x), int(y)), params, cal.psf_sigma)
            px = min(max(fit.x, 0.0), movie.width - 1e-9)
            py = min(max(fit.y, 0.0), movie.height - 1e-9)
            records.append((f, px, py, fit.amplitude / noise,
                            fit.amplitude, fit.converged))
    records.sort(key=lambda r: (r[0], r[2], r[1]))
    spots = tuple(
        Spot(id=i, frame=f, x=x, y=y, quality=q, amplitude=amp,
             fit_converged=conv)
        for i, (f, x, y, q, amp, conv) in enumerate(records))
    return SpotSet(spots=spots, frames=movie.n_frames, calibration=cal)
