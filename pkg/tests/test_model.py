import math

import pytest

from blinktrack.graphgen import GraphParams, build_graph
from blinktrack.model import (Calibration, MissingArcError, Spot, SpotSet,
                              Track, Tracking, psf_sigma_from_fwhm,
                              read_spots_csv, read_tracks_csv,
                              recompute_objective, verify_partition,
                              write_spots_csv, write_tracks_csv)
from conftest import make_spotset


def test_calibration_rejects_nonpositive_fields():
    with pytest.raises(ValueError):
        Calibration(pixel_size=0.0)
    with pytest.raises(ValueError):
        Calibration(frame_interval=-1.0)


def test_default_psf_sigma_is_fwhm_converted():
    # 300 nm FWHM at 100 nm/px -> sigma = 3 / (2 sqrt(2 ln 2)) px
    expected = 3.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))
    assert Calibration().psf_sigma == pytest.approx(expected)
    assert psf_sigma_from_fwhm(300e-9, 100e-9) == pytest.approx(expected)


def test_spotset_validates_order_and_bounds():
    cal = Calibration(image_width=10, image_height=10)
    with pytest.raises(ValueError):
        SpotSet((Spot(0, 1, 1, 1), Spot(1, 0, 1, 1)), frames=2, calibration=cal)
    with pytest.raises(ValueError):
        SpotSet((Spot(0, 0, 11.0, 1.0),), frames=1, calibration=cal)
    with pytest.raises(ValueError):
        SpotSet((Spot(0, 0, 1, 1), Spot(0, 1, 2, 2)), frames=2, calibration=cal)


def test_track_rejects_empty_and_duplicates():
    with pytest.raises(ValueError):
        Track(())
    with pytest.raises(ValueError):
        Track((1, 2, 1))


def graph_of(rows, penalty, **params):
    spots = make_spotset(rows)
    return spots, build_graph(spots, GraphParams(penalty=penalty, **params))


def test_recompute_objective_single_point():
    spots, graph = graph_of([(0, 5.0, 5.0)], penalty=20.0, tracking_radius=5.0)
    tracking = Tracking.from_tracks([Track((0,))], objective=40.0)
    assert recompute_objective(tracking, graph) == pytest.approx(40.0)


def test_recompute_objective_one_arc():
    spots, graph = graph_of([(0, 5.0, 5.0), (1, 8.0, 5.0)], penalty=20.0,
                            tracking_radius=5.0)
    tracking = Tracking.from_tracks([Track((0, 1))], objective=0.0)
    # arc cost 9 + 1 = 10, plus one start and one end penalty
    assert recompute_objective(tracking, graph) == pytest.approx(50.0)


def test_recompute_objective_empty():
    spots, graph = graph_of([], penalty=20.0, tracking_radius=5.0)
    tracking = Tracking.from_tracks([], objective=0.0)
    assert recompute_objective(tracking, graph) == 0.0


def test_recompute_objective_missing_arc():
    spots, graph = graph_of([(0, 5.0, 5.0), (1, 100.0, 100.0)], penalty=20.0,
                            tracking_radius=5.0)
    tracking = Tracking.from_tracks([Track((0, 1))], objective=0.0)
    with pytest.raises(MissingArcError):
        recompute_objective(tracking, graph)


def test_verify_partition_catches_missing_and_repeated_spots():
    spots = make_spotset([(0, 1.0, 1.0), (1, 2.0, 2.0)])
    verify_partition(Tracking.from_tracks([Track((0, 1))], 0.0), spots)
    with pytest.raises(ValueError):
        verify_partition(Tracking.from_tracks([Track((0,))], 0.0), spots)
    with pytest.raises(ValueError):
        verify_partition(
            Tracking.from_tracks([Track((0, 1)), Track((1,))], 0.0), spots)


def test_spot_csv_round_trip_is_bit_exact(tmp_path):
    spots = make_spotset([(0, 1.25, 2.5, 3.5), (0, 0.1, 0.2, 0.0),
                          (2, 499.99968642, 3.0, 1.0)])
    p1 = tmp_path / "a.csv"
    p2 = tmp_path / "b.csv"
    write_spots_csv(spots, p1)
    loaded = read_spots_csv(p1, spots.calibration, frames=spots.frames)
    write_spots_csv(loaded, p2)
    assert p1.read_bytes() == p2.read_bytes()
    assert [(s.frame, s.x, s.y, s.quality) for s in loaded.spots] == \
        [(s.frame, s.x, s.y, s.quality) for s in spots.spots]


def test_spot_csv_keeps_optional_amplitude(tmp_path):
    cal = Calibration(image_width=10, image_height=10)
    spots = SpotSet((Spot(0, 0, 1.0, 1.0, 2.0, amplitude=None),
                     Spot(1, 0, 2.0, 2.0, 2.0, amplitude=1.5)),
                    frames=1, calibration=cal)
    path = tmp_path / "s.csv"
    write_spots_csv(spots, path)
    loaded = read_spots_csv(path, cal, frames=1)
    assert loaded.spots[0].amplitude is None
    assert loaded.spots[1].amplitude == 1.5


def test_track_csv_round_trip(tmp_path):
    spots = make_spotset([(0, 1.0, 1.0), (1, 2.0, 2.0), (0, 7.5, 8.5)])
    tracking = Tracking.from_tracks([Track((0, 2)), Track((1,))], 12.0)
    path = tmp_path / "t.csv"
    write_tracks_csv(tracking, spots, path)
    loaded_spots, loaded_tracking = read_tracks_csv(
        path, spots.calibration, frames=spots.frames)
    verify_partition(loaded_tracking, loaded_spots)
    got = sorted(
        sorted((loaded_spots.by_id[p].frame, loaded_spots.by_id[p].x)
               for p in t.points) for t in loaded_tracking.tracks)
    want = sorted(
        sorted((spots.by_id[p].frame, spots.by_id[p].x) for p in t.points)
        for t in tracking.tracks)
    assert got == want
    # and a rewrite is byte-identical
    path2 = tmp_path / "t2.csv"
    write_tracks_csv(loaded_tracking, loaded_spots, path2)
    assert path.read_bytes() == path2.read_bytes()
