import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from blinktrack.analysis import (ConnectionRates, DegenerateCurveError,
                                 TrackTooShortError, detect_leaps,
                                 diffusion_estimates, estimate_diffusion,
                                 evaluate, export_diffusion_csv,
                                 export_histogram_csv, feedback_loop, msd,
                                 radius_for_quantile, truth_spotset)
from blinktrack.graphgen import GraphParams, build_graph
from blinktrack.model import Calibration, Track, Tracking
from blinktrack.simulator import (GroundTruth, SimParams, simulate_walks,
                                  step_sigma_px)
from blinktrack.solver import solve
from conftest import make_spotset


def cal100():
    return Calibration()  # 100 nm/px, 0.1 s/frame


def track_of(spots):
    return Track(tuple(s.id for s in spots.spots))


class TestMsd:
    def test_static_track_is_zero(self):
        spots = make_spotset([(f, 10.0, 10.0) for f in range(6)])
        lags, values, counts = msd(track_of(spots), spots, max_lag=3)
        assert list(lags) == [1, 2, 3]
        assert np.allclose(values, 0.0)
        assert list(counts) == [5, 4, 3]

    def test_ballistic_track_is_quadratic(self):
        spots = make_spotset([(f, 10.0 + f, 10.0) for f in range(8)])
        lags, values, _ = msd(track_of(spots), spots, max_lag=4)
        assert np.allclose(values, np.asarray(lags, dtype=float) ** 2)

    def test_gaps_use_true_frame_differences(self):
        spots = make_spotset([(0, 0.0, 0.0), (1, 1.0, 0.0), (3, 3.0, 0.0)])
        lags, values, counts = msd(track_of(spots), spots, max_lag=4)
        assert list(lags) == [1, 2, 3]
        assert list(counts) == [1, 1, 1]
        assert values[2] == pytest.approx(9.0)

    def test_too_short_track(self):
        spots = make_spotset([(0, 1.0, 1.0)])
        with pytest.raises(TrackTooShortError):
            msd(Track((0,)), spots, max_lag=3)

    def test_brownian_msd_matches_theory(self):
        cal = cal100()
        diffusion = 1e-13
        params = SimParams(diffusion=diffusion, n_particles=40,
                           n_frames=501, field=500, seed=17)
        truth = simulate_walks(params, cal)
        spots = truth_spotset(truth)
        sigma2 = step_sigma_px(diffusion, cal) ** 2
        # rebuild per-particle tracks from truth directly
        values = []
        ns = []
        for p in range(truth.n_particles):
            ids = [s.id for s in spots.spots
                   if abs(s.x - truth.xs[p, s.frame]) < 1e-9
                   and abs(s.y - truth.ys[p, s.frame]) < 1e-9]
            if len(ids) < 2:
                continue
            lags, v, c = msd(Track(tuple(ids)), spots, max_lag=1)
            values.append(v[0])
            ns.append(c[0])
        pooled = float(np.average(values, weights=ns))
        n_pairs = sum(ns)
        theory = 2.0 * sigma2  # per-axis variance, two axes
        stderr = theory * math.sqrt(2.0 / n_pairs)  # exponential steps
        assert abs(pooled - theory) < 3 * stderr


class TestEstimateDiffusion:
    def test_exact_linear_curve(self):
        cal = cal100()
        diffusion = 3.7e-13
        slope = 4 * diffusion * cal.frame_interval / cal.pixel_size ** 2
        lags = np.array([1, 2, 3])
        values = slope * lags
        counts = np.array([10.0, 9.0, 8.0])
        d, clamped = estimate_diffusion(lags, values, counts, cal)
        assert not clamped
        assert d == pytest.approx(diffusion, rel=1e-12)

    def test_intercept_absorbs_localization_noise(self):
        cal = cal100()
        diffusion = 2e-13
        slope = 4 * diffusion * cal.frame_interval / cal.pixel_size ** 2
        lags = np.array([1, 2, 3])
        values = slope * lags + 0.5  # static jitter floor
        d, _ = estimate_diffusion(lags, values, np.ones(3), cal)
        assert d == pytest.approx(diffusion, rel=1e-9)

    def test_negative_slope_clamps(self):
        cal = cal100()
        d, clamped = estimate_diffusion(np.array([1, 2]),
                                        np.array([2.0, 1.0]),
                                        np.ones(2), cal)
        assert d == 0.0 and clamped

    def test_degenerate_curve(self):
        with pytest.raises(DegenerateCurveError):
            estimate_diffusion(np.array([1]), np.array([1.0]),
                               np.ones(1), cal100())

    def test_immobile_track_with_jitter_sits_at_noise_floor(self):
        """Localization jitter of sigma_loc px mimics diffusion of order
        sigma_loc^2 px^2/frame, so even static emitters get a nonzero D."""
        cal = cal100()
        rng = np.random.default_rng(23)
        sigma_loc = 0.3
        rows = [(f, 50.0 + rng.normal(0, sigma_loc),
                 50.0 + rng.normal(0, sigma_loc)) for f in range(200)]
        spots = make_spotset(rows)
        lags, values, counts = msd(track_of(spots), spots, max_lag=5)
        d, clamped = estimate_diffusion(lags, values, counts, cal)
        floor_scale = sigma_loc ** 2 * cal.pixel_size ** 2 / cal.frame_interval
        assert d < 20 * floor_scale
        # the raw MSD itself sits near 4 sigma_loc^2 (static + noise)
        assert values[0] == pytest.approx(4 * sigma_loc ** 2, rel=0.3)

    def test_ensemble_median_recovers_true_diffusion(self):
        cal = cal100()
        diffusion = 1e-13
        params = SimParams(diffusion=diffusion, n_particles=60,
                           n_frames=200, field=500, seed=29)
        truth = simulate_walks(params, cal)
        spots = truth_spotset(truth)
        graph = build_graph(spots, GraphParams(tracking_radius=5.0,
                                               max_frame_gap=2))
        tracking = solve(graph)
        estimates = diffusion_estimates(tracking, spots)
        assert len(estimates) >= 40
        median = np.median([e.diffusion for e in estimates])
        assert median == pytest.approx(diffusion, rel=0.15)


class TestRadiusForQuantile:
    def test_characteristic_radius(self):
        cal = cal100()
        d = 1e-13
        p = 1.0 - math.exp(-1.0)
        want = math.sqrt(4 * d * cal.frame_interval) / cal.pixel_size
        assert radius_for_quantile(d, 1, p, cal) == pytest.approx(want)

    def test_paper_calibration_values(self):
        cal = cal100()
        assert radius_for_quantile(1e-13, 1, 0.99, cal) == \
            pytest.approx(4.292, abs=0.01)
        r_fast = radius_for_quantile(1e-12, 1, 0.99, cal)
        assert r_fast == pytest.approx(13.57, abs=0.01)
        assert r_fast <= 15.0

    def test_rejects_bad_probability(self):
        with pytest.raises(ValueError):
            radius_for_quantile(1e-13, 1, 1.0, cal100())

    @given(st.floats(1e-15, 1e-11), st.integers(1, 5),
           st.floats(0.01, 0.995))
    @settings(max_examples=200)
    def test_inverse_property(self, diffusion, gap, p):
        cal = cal100()
        radius = radius_for_quantile(diffusion, gap, p, cal)
        r_m = radius * cal.pixel_size
        t = gap * cal.frame_interval
        back = 1.0 - math.exp(-r_m ** 2 / (4 * diffusion * t))
        assert back == pytest.approx(p, abs=1e-12)


class TestDetectLeaps:
    def test_quiet_track_has_no_leaps(self):
        spots = make_spotset([(f, 10.0 + 0.3 * f, 10.0) for f in range(10)])
        tracking = Tracking.from_tracks([track_of(spots)], 0.0)
        assert detect_leaps(tracking, spots, threshold_radius=5.0) == set()

    def test_planted_jump_is_found(self):
        rows = [(f, 10.0 + 0.2 * f, 10.0) for f in range(5)]
        rows += [(f, 30.0 + 0.2 * f, 10.0) for f in range(5, 10)]
        spots = make_spotset(rows)
        tracking = Tracking.from_tracks([track_of(spots)], 0.0)
        leaps = detect_leaps(tracking, spots, threshold_radius=5.0)
        assert leaps == {(4, 5)}

    def test_adaptive_threshold_catches_jump_in_slow_track(self):
        rng = np.random.default_rng(31)
        xs = np.cumsum(rng.normal(0, 0.2, 30)) + 50.0
        rows = [(f, float(x), 50.0) for f, x in enumerate(xs)]
        rows[15] = (15, rows[15][1] + 12.0, 50.0)  # one foreign-molecule hop
        spots = make_spotset(rows)
        tracking = Tracking.from_tracks([track_of(spots)], 0.0)
        leaps = detect_leaps(tracking, spots)
        assert (14, 15) in leaps

    def test_blink_gap_is_normalized_not_flagged(self):
        # a sqrt(4)-scaled displacement across a 4-frame gap is an ordinary
        # step, not a leap
        rows = [(0, 10.0, 10.0), (1, 12.0, 10.0), (5, 16.0, 10.0),
                (6, 18.0, 10.0)]
        spots = make_spotset(rows)
        tracking = Tracking.from_tracks([track_of(spots)], 0.0)
        assert detect_leaps(tracking, spots, threshold_radius=3.0) == set()


class TestFeedbackLoop:
    def test_clean_input_converges_immediately(self):
        spots = make_spotset([(f, 10.0 + 0.3 * f, 10.0) for f in range(8)])
        report = feedback_loop(spots, GraphParams(tracking_radius=5.0),
                               threshold_radius=5.0)
        assert report.iterations == 1
        assert report.arcs_removed == ((),)
        assert report.converged

    def test_objective_non_decreasing_and_leap_removed(self):
        rows = [(f, 10.0 + 0.2 * f, 10.0) for f in range(5)]
        rows += [(f, 14.0 + 0.2 * f, 10.0) for f in range(5, 10)]
        spots = make_spotset(rows)
        params = GraphParams(tracking_radius=5.0, max_frame_gap=1)
        baseline = solve(build_graph(spots, params))
        report = feedback_loop(spots, params, threshold_radius=2.0)
        assert report.converged
        assert report.tracking.objective >= baseline.objective - 1e-9
        removed = {arc for it in report.arcs_removed for arc in it}
        assert (4, 5) in removed
        for a, b in report.tracking.used_arcs():
            sa, sb = spots.by_id[a], spots.by_id[b]
            gap = sb.frame - sa.frame
            assert math.hypot(sb.x - sa.x, sb.y - sa.y) <= 2.0 * math.sqrt(gap)


def perfect_tracking_from_truth(truth, spots):
    """Group spots by their generating particle (exact positions)."""
    by_particle = {}
    for s in spots.spots:
        hit = np.flatnonzero(
            (np.abs(truth.xs[:, s.frame] - s.x) < 1e-9)
            & (np.abs(truth.ys[:, s.frame] - s.y) < 1e-9)
            & truth.visible[:, s.frame])
        by_particle.setdefault(int(hit[0]), []).append(s.id)
    tracks = [Track(tuple(ids)) for _, ids in sorted(by_particle.items())]
    return Tracking.from_tracks(tracks, 0.0)


class TestEvaluate:
    def make_case(self, blinking=False, seed=37):
        params = SimParams(diffusion=1e-13, n_particles=20, n_frames=30,
                           field=200, seed=seed, blinking=blinking)
        truth = simulate_walks(params, Calibration(image_width=200,
                                                   image_height=200))
        spots = truth_spotset(truth)
        return truth, spots

    def test_perfect_tracking_scores_zero(self):
        truth, spots = self.make_case(blinking=True)
        tracking = perfect_tracking_from_truth(truth, spots)
        rates = evaluate(tracking, spots, truth, match_radius=0.5)
        assert rates.fp_rate == 0.0
        assert rates.fn_rate == 0.0
        assert rates.n_truth > 0

    def test_all_singletons_misses_everything(self):
        truth, spots = self.make_case()
        tracking = Tracking.from_tracks(
            [Track((s.id,)) for s in spots.spots], 0.0)
        rates = evaluate(tracking, spots, truth, match_radius=0.5)
        assert rates.fp_rate == 0.0
        assert rates.fn_rate == 1.0
        assert rates.n_computed == 0

    def test_truth_connections_span_blink_gaps(self):
        xs = np.full((1, 6), 10.0)
        ys = np.full((1, 6), 10.0)
        visible = np.array([[True, False, False, True, True, False]])
        truth = GroundTruth(xs=xs, ys=ys, visible=visible, params=None,
                            calibration=Calibration(image_width=64,
                                                    image_height=64))
        spots = truth_spotset(truth)
        tracking = Tracking.from_tracks([Track(tuple(s.id for s in spots.spots))],
                                        0.0)
        rates = evaluate(tracking, spots, truth, match_radius=0.5)
        assert rates.n_truth == 2  # frames 0->3 and 3->4
        assert rates.fn_rate == 0.0 and rates.fp_rate == 0.0

    def test_wrong_link_counts_as_false_positive(self):
        truth, spots = self.make_case()
        tracking = perfect_tracking_from_truth(truth, spots)
        # merge the first two tracks with one bogus cross-particle link
        t0, t1, *rest = tracking.tracks
        merged = []
        a_ids = list(t0.points)
        b_ids = list(t1.points)
        by_frame = lambda pid: spots.by_id[pid].frame
        if by_frame(a_ids[-1]) < by_frame(b_ids[-1]):
            head, tail = a_ids, [p for p in b_ids
                                 if by_frame(p) > by_frame(a_ids[-1])]
            rest_b = [p for p in b_ids if by_frame(p) <= by_frame(a_ids[-1])]
            tracks = [Track(tuple(head + tail))] + \
                ([Track(tuple(rest_b))] if rest_b else []) + list(rest)
            bogus = Tracking.from_tracks(tracks, 0.0)
            rates = evaluate(bogus, spots, truth, match_radius=0.5)
            assert rates.n_false_positive >= 1


class TestTruthSpotset:
    def test_only_visible_in_field_positions(self):
        xs = np.array([[10.0, -5.0, 20.0]])
        ys = np.array([[10.0, 10.0, 20.0]])
        visible = np.array([[True, True, False]])
        truth = GroundTruth(xs=xs, ys=ys, visible=visible, params=None,
                            calibration=Calibration(image_width=64,
                                                    image_height=64))
        spots = truth_spotset(truth)
        assert len(spots) == 1
        assert spots.spots[0].frame == 0


def test_export_csvs(tmp_path):
    cal = cal100()
    spots = make_spotset([(f, 10.0 + f, 10.0) for f in range(8)])
    tracking = Tracking.from_tracks([track_of(spots)], 0.0)
    estimates = diffusion_estimates(tracking, spots)
    d_path = tmp_path / "d.csv"
    export_diffusion_csv(estimates, d_path)
    lines = d_path.read_text().splitlines()
    assert lines[0] == "track_id,n_points,log10_D"
    assert len(lines) == 2
    h_path = tmp_path / "h.csv"
    export_histogram_csv(estimates, h_path)
    rows = h_path.read_text().splitlines()
    assert rows[0] == "bin_left,count"
    total = sum(int(r.split(",")[1]) for r in rows[1:])
    assert total == 1
