import json
import math

import numpy as np
import pytest

from blinktrack.cli import main
from blinktrack.model import read_spots_csv, read_tracks_csv
from blinktrack.simulator import read_movie


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline_dir(tmp_path_factory):
    """One tiny end-to-end pipeline shared by the read-only tests."""
    d = tmp_path_factory.mktemp("pipeline")
    assert run("simulate", "--output", d / "movie.smmv",
               "--truth", d / "truth.csv",
               "--field", 64, "--frames", 12, "--particles", 6,
               "--snr", 5.0, "--seed", 3) == 0
    assert run("localize", "--movie", d / "movie.smmv",
               "--output", d / "spots.csv") == 0
    assert run("track", "--spots", d / "spots.csv",
               "--output", d / "tracks.csv",
               "--report", d / "report.json",
               "--radius", 6.0, "--max-gap", 2) == 0
    assert run("analyze", "--tracks", d / "tracks.csv",
               "--output", d / "dcoef.csv",
               "--histogram", d / "hist.csv") == 0
    assert run("evaluate", "--tracks", d / "tracks.csv",
               "--truth", d / "truth.csv",
               "--output", d / "metrics.json") == 0
    return d


class TestPipeline:
    def test_stage_outputs_compose(self, pipeline_dir):
        d = pipeline_dir
        movie = read_movie(d / "movie.smmv")
        assert movie.n_frames == 12
        spots = read_spots_csv(d / "spots.csv")
        assert len(spots) > 0
        _, tracking = read_tracks_csv(d / "tracks.csv")
        assert len(tracking.tracks) > 0
        metrics = json.loads((d / "metrics.json").read_text())
        assert 0.0 <= metrics["fp_rate"] <= 1.0
        assert 0.0 <= metrics["fn_rate"] <= 1.0
        assert metrics["fn_rate"] < 0.3  # snr 5: nearly all links recovered

    def test_track_report_has_separate_timings(self, pipeline_dir):
        report = json.loads((pipeline_dir / "report.json").read_text())
        assert "graph_build_seconds" in report
        assert "solve_seconds" in report
        assert report["n_spots"] > 0 and report["objective"] > 0

    def test_manifests_written(self, pipeline_dir):
        manifest = json.loads(
            (pipeline_dir / "movie.smmv.manifest.json").read_text())
        assert manifest["command"] == "simulate"
        assert manifest["params"]["seed"] == 3
        assert manifest["params"]["field"] == 64

    def test_analyze_outputs(self, pipeline_dir):
        lines = (pipeline_dir / "dcoef.csv").read_text().splitlines()
        assert lines[0] == "track_id,n_points,log10_D"
        hist = (pipeline_dir / "hist.csv").read_text().splitlines()
        assert hist[0] == "bin_left,count"


class TestReproducibility:
    def test_same_seed_bytes_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        a.mkdir(), b.mkdir()
        for d in (a, b):
            assert run("simulate", "--output", d / "m.smmv",
                       "--truth", d / "t.csv", "--field", 48,
                       "--frames", 6, "--particles", 4, "--seed", 11) == 0
        assert (a / "m.smmv").read_bytes() == (b / "m.smmv").read_bytes()
        assert (a / "t.csv").read_bytes() == (b / "t.csv").read_bytes()

    def test_rerun_from_manifest_reproduces(self, tmp_path):
        d = tmp_path
        assert run("simulate", "--output", d / "m.smmv",
                   "--truth", d / "t.csv", "--field", 48, "--frames", 6,
                   "--particles", 4, "--seed", 12, "--snr", 2.5) == 0
        original = (d / "m.smmv").read_bytes()
        assert run("simulate", "--output", d / "m2.smmv",
                   "--truth", d / "t2.csv",
                   "--from-manifest", d / "m.smmv.manifest.json") == 0
        assert (d / "m2.smmv").read_bytes() == original
        assert (d / "t.csv").read_bytes() == (d / "t2.csv").read_bytes()

    def test_desk_preset_sets_sizes(self, tmp_path):
        d = tmp_path
        assert run("simulate", "--desk", "--frames", 4,
                   "--output", d / "m.smmv", "--truth", d / "t.csv") == 0
        movie = read_movie(d / "m.smmv")
        assert movie.width == 128 and movie.n_frames == 4  # explicit flag wins


class TestErrors:
    def test_snr_zero_rejected_as_usage_error(self, tmp_path):
        code = run("simulate", "--output", tmp_path / "m.smmv",
                   "--truth", tmp_path / "t.csv", "--snr", 0.0,
                   "--field", 32, "--frames", 4, "--particles", 2)
        assert code == 1

    def test_corrupt_magic_is_data_error(self, tmp_path):
        bad = tmp_path / "bad.smmv"
        bad.write_bytes(b"JUNKJUNKJUNK" + b"\0" * 64)
        code = run("localize", "--movie", bad, "--output", tmp_path / "s.csv")
        assert code == 2

    def test_unknown_flag_is_usage_error(self, tmp_path, capsys):
        with pytest.raises(SystemExit) as exc:
            run("simulate", "--nope", "x")
        assert exc.value.code == 1

    def test_missing_subcommand_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            run()
        assert exc.value.code == 1


class TestToyTracking:
    def test_two_spot_csv_gives_single_track(self, tmp_path):
        spots_csv = tmp_path / "spots.csv"
        spots_csv.write_text(
            "frame,x,y,quality,amplitude\n"
            "0,10.0,10.0,1.0,\n"
            "1,11.0,10.0,1.0,\n")
        out = tmp_path / "tracks.csv"
        assert run("track", "--spots", spots_csv, "--output", out,
                   "--radius", 5.0) == 0
        _, tracking = read_tracks_csv(out)
        assert len(tracking.tracks) == 1
        assert len(tracking.tracks[0]) == 2

    def test_empty_movie_gives_empty_spot_csv(self, tmp_path):
        assert run("simulate", "--output", tmp_path / "m.smmv",
                   "--truth", tmp_path / "t.csv", "--field", 32,
                   "--frames", 4, "--particles", 0, "--snr", 100.0,
                   "--seed", 5) == 0
        assert run("localize", "--movie", tmp_path / "m.smmv",
                   "--output", tmp_path / "s.csv") == 0
        spots = read_spots_csv(tmp_path / "s.csv")
        assert len(spots) == 0

    def test_identical_track_and_truth_score_zero(self, tmp_path):
        # build truth, track its own visible positions, evaluate: zeros
        d = tmp_path
        assert run("simulate", "--output", d / "m.smmv",
                   "--truth", d / "t.csv", "--field", 64, "--frames", 10,
                   "--particles", 3, "--snr", 50.0, "--seed", 21) == 0
        assert run("localize", "--movie", d / "m.smmv",
                   "--output", d / "s.csv") == 0
        assert run("track", "--spots", d / "s.csv", "--output", d / "k.csv",
                   "--radius", 6.0, "--max-gap", 2) == 0
        assert run("evaluate", "--tracks", d / "k.csv", "--truth", d / "t.csv",
                   "--output", d / "e.json") == 0
        metrics = json.loads((d / "e.json").read_text())
        assert metrics["fp_rate"] == 0.0
        assert metrics["fn_rate"] == 0.0


class TestSweepAndBench:
    def test_sweep_writes_summary(self, tmp_path):
        out = tmp_path / "sweep"
        assert run("sweep", "--output-dir", out, "--snr", 3.0, 5.0,
                   "--particles", 4, "--frames", 8, "--field", 48,
                   "--seed", 31) == 0
        lines = (out / "summary.csv").read_text().splitlines()
        assert lines[0] == "snr,fp_rate,fn_rate,n_computed,n_truth"
        assert len(lines) == 3
        assert (out / "tracks_snr3.csv").exists()

    def test_bench_emits_scaling_csv(self, tmp_path):
        out = tmp_path / "bench.csv"
        assert run("bench", "--output", out, "--densities", 5, 10,
                   "--frames", 6, "--field", 64, "--seed", 41) == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "density,n_spots,n_arcs,build_seconds,solve_seconds"
        assert len(lines) == 3
        n_arcs = [int(l.split(",")[2]) for l in lines[1:]]
        assert n_arcs[1] > n_arcs[0]
