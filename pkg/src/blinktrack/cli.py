"""Command-line pipeline: simulate -> localize -> track -> analyze -> evaluate.

Every command writes a ``<output>.manifest.json`` capturing its parameters
and seed; re-running with ``--from-manifest`` reproduces the run byte for
byte. Exit codes: 0 success, 1 usage error, 2 data-format error, 3 internal
invariant violation (a tracking that fails its optimality certificate).
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import __version__
from .analysis import (diffusion_estimates, evaluate, export_diffusion_csv,
                       export_histogram_csv, feedback_loop, truth_spotset)
from .graphgen import GraphParams, build_graph
from .localizer import LocalizerParams, localize_movie
from .model import (Calibration, DataFormatError, read_spots_csv,
                    read_tracks_csv, write_spots_csv, write_tracks_csv)
from .simulator import (SimParams, read_movie, read_truth_csv, render_movie,
                        simulate_walks, write_movie, write_truth_csv)
from .solver import CertificateError, solve

USAGE_ERROR = 1
DATA_ERROR = 2
INVARIANT_ERROR = 3

DESK_PRESET = {"field": 128, "frames": 100, "particles": 50}


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        self.exit(USAGE_ERROR, f"{self.prog}: error: {message}\n")


def _write_json(path, payload: dict) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _write_manifest(output_path, command: str, params: dict) -> None:
    _write_json(str(output_path) + ".manifest.json", {
        "command": command,
        "params": params,
        "version": __version__,
    })


def _load_manifest(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"cannot read manifest {path}: {exc}") from None
    if "params" not in payload:
        raise DataFormatError(f"manifest {path} has no params block")
    return payload["params"]


def _resolve(args, defaults: dict) -> dict:
    """Merge manifest params and CLI flags over built-in defaults.

    CLI flags all default to None so an explicitly passed flag wins over
    the manifest, which wins over the defaults.
    """
    params = dict(defaults)
    if getattr(args, "from_manifest", None):
        loaded = _load_manifest(args.from_manifest)
        params.update({k: v for k, v in loaded.items() if k in defaults})
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            params[key] = value
    return params


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

SIM_DEFAULTS = {
    "diffusion": 1e-13, "particles": 100, "frames": 500, "field": 500,
    "snr": 3.0, "blinking": False, "tau": 1.0, "alpha": -2.0,
    "max_state_frames": 100, "seed": 1,
    "pixel_size": 100e-9, "frame_interval": 0.1,
}


def cmd_simulate(args) -> int:
    params = _resolve(args, SIM_DEFAULTS)
    if args.desk:
        for key, value in DESK_PRESET.items():
            if getattr(args, key, None) is None:
                params[key] = value
    sim = SimParams(
        diffusion=params["diffusion"], n_particles=params["particles"],
        n_frames=params["frames"], field=params["field"], snr=params["snr"],
        blinking=params["blinking"], tau=params["tau"], alpha=params["alpha"],
        max_state_frames=params["max_state_frames"], seed=params["seed"])
    cal = Calibration(pixel_size=params["pixel_size"],
                      frame_interval=params["frame_interval"],
                      image_width=params["field"], image_height=params["field"])
    truth = simulate_walks(sim, cal)
    movie = render_movie(truth, sim)
    write_movie(movie, args.output)
    write_truth_csv(truth, args.truth)
    _write_manifest(args.output, "simulate", params)
    print(f"wrote {args.output} ({movie.n_frames} frames, "
          f"{movie.width}x{movie.height}) and {args.truth}")
    return 0


# ---------------------------------------------------------------------------
# localize
# ---------------------------------------------------------------------------

LOC_DEFAULTS = {
    "threshold": 3.0, "fit_window": 7, "max_fit_iterations": 20,
    "min_separation": 3.0, "psf_sigma": 0.0,
}


def cmd_localize(args) -> int:
    params = _resolve(args, LOC_DEFAULTS)
    movie = read_movie(args.movie,
                       psf_sigma=params["psf_sigma"] or None)
    loc = LocalizerParams(
        detection_threshold=params["threshold"],
        fit_window=params["fit_window"],
        max_fit_iterations=params["max_fit_iterations"],
        min_separation=params["min_separation"])
    spots = localize_movie(movie, loc)
    write_spots_csv(spots, args.output)
    _write_manifest(args.output, "localize", params)
    print(f"localized {len(spots)} spots over {movie.n_frames} frames "
          f"-> {args.output}")
    return 0


# ---------------------------------------------------------------------------
# track
# ---------------------------------------------------------------------------

TRACK_DEFAULTS = {
    "radius": 5.0, "max_gap": 3, "penalty": 0.0, "join_radius": 2.0,
    "quality_scaling": False, "feedback": False, "max_iterations": 5,
}


def cmd_track(args) -> int:
    params = _resolve(args, TRACK_DEFAULTS)
    spots = read_spots_csv(args.spots)
    graph_params = GraphParams(
        tracking_radius=params["radius"],
        max_frame_gap=params["max_gap"],
        penalty=params["penalty"] or None,
        join_radius=params["join_radius"],
        quality_scaling=params["quality_scaling"])
    t0 = time.perf_counter()
    graph = build_graph(spots, graph_params)
    t1 = time.perf_counter()
    if params["feedback"]:
        report = feedback_loop(spots, graph_params,
                               max_iterations=params["max_iterations"])
        tracking = report.tracking
        iterations = report.iterations
    else:
        tracking = solve(graph)
        iterations = 1
    t2 = time.perf_counter()
    write_tracks_csv(tracking, spots, args.output)
    _write_manifest(args.output, "track", params)
    report_payload = {
        "n_spots": len(spots),
        "n_arcs": len(graph.arcs),
        "n_tracks": len(tracking.tracks),
        "objective": tracking.objective,
        "iterations": iterations,
        "graph_build_seconds": t1 - t0,
        "solve_seconds": t2 - t1,
    }
    if args.report:
        _write_json(args.report, report_payload)
    print(f"tracked {len(spots)} spots into {len(tracking.tracks)} tracks, "
          f"objective {tracking.objective:.6g} "
          f"(build {t1 - t0:.3f}s, solve {t2 - t1:.3f}s) -> {args.output}")
    return 0


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------

ANALYZE_DEFAULTS = {
    "pixel_size": 100e-9, "frame_interval": 0.1,
    "max_lag": 5, "fit_lags": 3, "min_points": 5,
}


def cmd_analyze(args) -> int:
    params = _resolve(args, ANALYZE_DEFAULTS)
    cal_probe = Calibration(pixel_size=params["pixel_size"],
                            frame_interval=params["frame_interval"],
                            image_width=1_000_000, image_height=1_000_000)
    spots, tracking = read_tracks_csv(args.tracks, calibration=cal_probe)
    estimates = diffusion_estimates(
        tracking, spots, max_lag=params["max_lag"],
        n_fit=params["fit_lags"], min_points=params["min_points"])
    export_diffusion_csv(estimates, args.output)
    if args.histogram:
        export_histogram_csv(estimates, args.histogram)
    _write_manifest(args.output, "analyze", params)
    print(f"analyzed {len(estimates)} tracks -> {args.output}")
    return 0


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

EVAL_DEFAULTS = {"match_radius": 2.0}


def cmd_evaluate(args) -> int:
    params = _resolve(args, EVAL_DEFAULTS)
    truth = read_truth_csv(args.truth)
    spots, tracking = read_tracks_csv(
        args.tracks, calibration=truth.calibration)
    rates = evaluate(tracking, spots, truth,
                     match_radius=params["match_radius"])
    payload = {
        "fp_rate": rates.fp_rate,
        "fn_rate": rates.fn_rate,
        "n_computed_connections": rates.n_computed,
        "n_false_positive": rates.n_false_positive,
        "n_truth_connections": rates.n_truth,
        "n_false_negative": rates.n_false_negative,
    }
    _write_json(args.output, payload)
    _write_manifest(args.output, "evaluate", params)
    print(f"FP rate {rates.fp_rate:.4f}, FN rate {rates.fn_rate:.4f} "
          f"-> {args.output}")
    return 0


# ---------------------------------------------------------------------------
# sweep: the S/N grid of the accuracy experiment
# ---------------------------------------------------------------------------

SWEEP_DEFAULTS = {
    "diffusion": 1e-13, "particles": 50, "frames": 100, "field": 128,
    "radius": 5.0, "max_gap": 3, "seed": 1, "match_radius": 2.0,
    "quality_scaling": True,
}


def _sweep_one(workdir: str, snr: float, params: dict) -> dict:
    out = Path(workdir)
    out.mkdir(parents=True, exist_ok=True)
    sim = SimParams(diffusion=params["diffusion"],
                    n_particles=params["particles"],
                    n_frames=params["frames"], field=params["field"],
                    snr=snr, seed=params["seed"])
    cal = Calibration(image_width=params["field"], image_height=params["field"])
    truth = simulate_walks(sim, cal)
    movie = render_movie(truth, sim)
    spots = localize_movie(movie)
    graph_params = GraphParams(tracking_radius=params["radius"],
                               max_frame_gap=params["max_gap"],
                               quality_scaling=params["quality_scaling"])
    tracking = solve(build_graph(spots, graph_params))
    rates = evaluate(tracking, spots, truth,
                     match_radius=params["match_radius"])
    write_spots_csv(spots, out / f"spots_snr{snr:g}.csv")
    write_tracks_csv(tracking, spots, out / f"tracks_snr{snr:g}.csv")
    return {"snr": snr, "fp_rate": rates.fp_rate, "fn_rate": rates.fn_rate,
            "n_computed": rates.n_computed, "n_truth": rates.n_truth}


def cmd_sweep(args) -> int:
    params = _resolve(args, SWEEP_DEFAULTS)
    snrs = args.snr or [1.0, 2.0, 3.0, 4.0, 5.0]
    outdir = Path(args.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_sweep_one,
                                    [str(outdir)] * len(snrs), snrs,
                                    [params] * len(snrs)))
    else:
        results = [_sweep_one(str(outdir), snr, params) for snr in snrs]
    summary = outdir / "summary.csv"
    with open(summary, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("snr,fp_rate,fn_rate,n_computed,n_truth\n")
        for r in results:
            fh.write(f"{r['snr']:g},{r['fp_rate']!r},{r['fn_rate']!r},"
                     f"{r['n_computed']},{r['n_truth']}\n")
    _write_manifest(summary, "sweep", {**params, "snr": list(snrs)})
    for r in results:
        print(f"snr {r['snr']:g}: FP {r['fp_rate']:.4f} FN {r['fn_rate']:.4f}")
    print(f"summary -> {summary}")
    return 0


# ---------------------------------------------------------------------------
# bench: arc-count and runtime scaling vs particle density
# ---------------------------------------------------------------------------

BENCH_DEFAULTS = {
    "diffusion": 1e-13, "frames": 20, "field": 128, "radius": 5.0,
    "max_gap": 3, "seed": 1,
}


def cmd_bench(args) -> int:
    params = _resolve(args, BENCH_DEFAULTS)
    densities = args.densities or [50, 100, 150, 200]
    rows = []
    for density in densities:
        sim = SimParams(diffusion=params["diffusion"], n_particles=density,
                        n_frames=params["frames"], field=params["field"],
                        seed=params["seed"])
        cal = Calibration(image_width=params["field"],
                          image_height=params["field"])
        spots = truth_spotset(simulate_walks(sim, cal))
        graph_params = GraphParams(tracking_radius=params["radius"],
                                   max_frame_gap=params["max_gap"])
        t0 = time.perf_counter()
        graph = build_graph(spots, graph_params)
        t1 = time.perf_counter()
        solve(graph)
        t2 = time.perf_counter()
        rows.append((density, len(spots), len(graph.arcs), t1 - t0, t2 - t1))
        print(f"density {density}: {len(spots)} spots, {len(graph.arcs)} arcs, "
              f"build {t1 - t0:.3f}s, solve {t2 - t1:.3f}s")
    with open(args.output, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("density,n_spots,n_arcs,build_seconds,solve_seconds\n")
        for density, n_spots, n_arcs, tb, ts in rows:
            fh.write(f"{density},{n_spots},{n_arcs},{tb!r},{ts!r}\n")
    _write_manifest(args.output, "bench",
                    {**params, "densities": list(densities)})
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="blinktrack",
                     description="Single-molecule tracking pipeline")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="render a synthetic movie + ground truth")
    p.add_argument("--output", required=True, help="movie file (.smmv)")
    p.add_argument("--truth", required=True, help="ground-truth CSV")
    p.add_argument("--diffusion", type=float, help="m^2/s (default 1e-13)")
    p.add_argument("--particles", type=int, help="particles per movie")
    p.add_argument("--frames", type=int)
    p.add_argument("--field", type=int, help="square field side in pixels")
    p.add_argument("--snr", type=float, help="signal-to-noise ratio")
    p.add_argument("--blinking", action="store_const", const=True, default=None)
    p.add_argument("--tau", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--max-state-frames", dest="max_state_frames", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--pixel-size", dest="pixel_size", type=float)
    p.add_argument("--frame-interval", dest="frame_interval", type=float)
    p.add_argument("--desk", action="store_true",
                   help="desk-scale preset: 128px field, 100 frames, 50 particles")
    p.add_argument("--from-manifest", dest="from_manifest")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("localize", help="detect and fit spots in a movie")
    p.add_argument("--movie", required=True)
    p.add_argument("--output", required=True, help="spot CSV")
    p.add_argument("--threshold", type=float, help="noise sigmas (default 3)")
    p.add_argument("--fit-window", dest="fit_window", type=int)
    p.add_argument("--max-fit-iterations", dest="max_fit_iterations", type=int)
    p.add_argument("--min-separation", dest="min_separation", type=float)
    p.add_argument("--psf-sigma", dest="psf_sigma", type=float)
    p.add_argument("--from-manifest", dest="from_manifest")
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("track", help="link a spot CSV into tracks")
    p.add_argument("--spots", required=True)
    p.add_argument("--output", required=True, help="track CSV")
    p.add_argument("--report", help="timing/objective JSON")
    p.add_argument("--radius", type=float, help="tracking radius, px")
    p.add_argument("--max-gap", dest="max_gap", type=int)
    p.add_argument("--penalty", type=float,
                   help="start/end penalty (default (R^2+gap^2)/2)")
    p.add_argument("--join-radius", dest="join_radius", type=float)
    p.add_argument("--quality-scaling", dest="quality_scaling",
                   action="store_const", const=True, default=None)
    p.add_argument("--feedback", action="store_const", const=True, default=None,
                   help="forbid leap arcs and re-optimize")
    p.add_argument("--max-iterations", dest="max_iterations", type=int)
    p.add_argument("--from-manifest", dest="from_manifest")
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("analyze", help="diffusion coefficients from tracks")
    p.add_argument("--tracks", required=True)
    p.add_argument("--output", required=True, help="per-track D CSV")
    p.add_argument("--histogram", help="optional log10 D histogram CSV")
    p.add_argument("--pixel-size", dest="pixel_size", type=float)
    p.add_argument("--frame-interval", dest="frame_interval", type=float)
    p.add_argument("--max-lag", dest="max_lag", type=int)
    p.add_argument("--fit-lags", dest="fit_lags", type=int)
    p.add_argument("--min-points", dest="min_points", type=int)
    p.add_argument("--from-manifest", dest="from_manifest")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("evaluate", help="FP/FN link rates vs ground truth")
    p.add_argument("--tracks", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--output", required=True, help="metrics JSON")
    p.add_argument("--match-radius", dest="match_radius", type=float)
    p.add_argument("--from-manifest", dest="from_manifest")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="full pipeline over an S/N grid")
    p.add_argument("--output-dir", required=True)
    p.add_argument("--snr", type=float, nargs="+")
    p.add_argument("--diffusion", type=float)
    p.add_argument("--particles", type=int)
    p.add_argument("--frames", type=int)
    p.add_argument("--field", type=int)
    p.add_argument("--radius", type=float)
    p.add_argument("--max-gap", dest="max_gap", type=int)
    p.add_argument("--match-radius", dest="match_radius", type=float)
    p.add_argument("--quality-scaling", dest="quality_scaling",
                   action="store_const", const=True, default=None)
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--from-manifest", dest="from_manifest")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("bench", help="arc count and runtime vs density")
    p.add_argument("--output", required=True, help="CSV of scaling data")
    p.add_argument("--densities", type=int, nargs="+")
    p.add_argument("--diffusion", type=float)
    p.add_argument("--frames", type=int)
    p.add_argument("--field", type=int)
    p.add_argument("--radius", type=float)
    p.add_argument("--max-gap", dest="max_gap", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--from-manifest", dest="from_manifest")
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DataFormatError as exc:
        print(f"data format error: {exc}", file=sys.stderr)
        return DATA_ERROR
    except CertificateError as exc:
        print(f"internal invariant violation: {exc}", file=sys.stderr)
        return INVARIANT_ERROR
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR


if __name__ == "__main__":
    sys.exit(main())
