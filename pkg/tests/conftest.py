"""Shared builders for the test suite."""

import numpy as np
import pytest

from blinktrack.graphgen import Arc, CandidateGraph, GraphParams
from blinktrack.model import Calibration, Spot, SpotSet


def make_calibration(width=500, height=500, **kwargs):
    return Calibration(image_width=width, image_height=height, **kwargs)


def make_spotset(rows, width=500, height=500, frames=None, **cal_kwargs):
    """rows: iterable of (frame, x, y) or (frame, x, y, quality)."""
    rows = [r if len(r) == 4 else (*r, 1.0) for r in rows]
    order = sorted(range(len(rows)), key=lambda i: (rows[i][0], i))
    spots = tuple(Spot(id=i, frame=rows[j][0], x=rows[j][1], y=rows[j][2],
                       quality=rows[j][3])
                  for i, j in enumerate(order))
    n_frames = frames or (max((r[0] for r in rows), default=-1) + 1)
    return SpotSet(spots=spots, frames=max(n_frames, 1),
                   calibration=make_calibration(width, height, **cal_kwargs))


def random_graph(rng, max_points=10, constant_penalty=True):
    """Random tracking instance with arbitrary non-negative costs.

    Arcs are a random subset of the time-ordered pairs (plus a few same-frame
    joins directed by id); costs are uniform, unrelated to geometry, so the
    solver is exercised on the full combinatorial problem, not just metric
    instances.
    """
    n = int(rng.integers(2, max_points + 1))
    n_frames = int(rng.integers(2, 5))
    frames = np.sort(rng.integers(0, n_frames, n))
    penalty = float(rng.uniform(5.0, 50.0))
    params = GraphParams(tracking_radius=1e6, max_frame_gap=n_frames,
                         penalty=penalty, join_radius=1e6)
    arcs = []
    for i in range(n):
        for j in range(i + 1, n):
            gap = int(frames[j] - frames[i])
            if gap > 0 and rng.random() < 0.6:
                arcs.append(Arc(i, j, float(rng.uniform(0.0, 3.0 * penalty)),
                                False))
            elif gap == 0 and rng.random() < 0.3:
                arcs.append(Arc(i, j, float(rng.uniform(0.0, 2.0 * penalty)),
                                True))
    if constant_penalty:
        start = end = tuple([penalty] * n)
    else:
        start = tuple(float(v) for v in rng.uniform(2.0, 2.0 * penalty, n))
        end = tuple(float(v) for v in rng.uniform(2.0, 2.0 * penalty, n))
    return CandidateGraph(arcs=tuple(arcs), spot_ids=tuple(range(n)),
                          start_penalties=start, end_penalties=end,
                          params=params)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
