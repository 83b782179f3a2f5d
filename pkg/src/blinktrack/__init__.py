"""Single-molecule tracking toolkit.

Links blinking fluorophore detections across video frames by solving the
max-likelihood track-partition problem exactly (min-cost bipartite matching),
and bundles everything needed to exercise the tracker end to end: a Brownian
movie simulator with power-law blinking, a spot localizer, diffusion (MSD)
analysis with automatic radius selection and outlier feedback, and a
ground-truth evaluation harness.
"""

from .model import (
    Calibration,
    DataFormatError,
    MissingArcError,
    Spot,
    SpotSet,
    Track,
    Tracking,
    psf_sigma_from_fwhm,
    read_spots_csv,
    read_tracks_csv,
    recompute_objective,
    write_spots_csv,
    write_tracks_csv,
)
from .graphgen import (
    Arc,
    CandidateGraph,
    GraphParams,
    arc_cost,
    build_graph,
    join_cost,
    quality_penalty,
    write_graph_csv,
)
from .solver import (
    CertificateError,
    DualCertificate,
    EnumerationLimitError,
    MatchingInstance,
    brute_force,
    certify,
    reoptimize,
    solve,
)
from .simulator import (
    GroundTruth,
    Movie,
    SimParams,
    read_movie,
    read_truth_csv,
    render_movie,
    simulate_blinking,
    simulate_movie,
    simulate_walks,
    state_duration_pmf,
    step_sigma_px,
    write_movie,
    write_pgm,
    write_truth_csv,
)
from .localizer import (
    LocalizerParams,
    detect,
    estimate_noise_sigma,
    fit_gaussian,
    localize_movie,
)
from .analysis import (
    ConnectionRates,
    DegenerateCurveError,
    DiffusionEstimate,
    FeedbackReport,
    TrackTooShortError,
    detect_leaps,
    diffusion_estimates,
    estimate_diffusion,
    evaluate,
    export_diffusion_csv,
    export_histogram_csv,
    feedback_loop,
    msd,
    radius_for_quantile,
    truth_spotset,
)

__version__ = "0.1.0"
