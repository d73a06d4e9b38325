"""Learned majorization-minimization solvers for ill-posed linear inverse
problems, with a synthetic EEG-like benchmark.

The solver replaces the objective by a diagonal quadratic surrogate at each
iterate. A recurrent network predicts the per-coordinate reciprocal
curvature, projected into an interval certified by analytic curvature
bounds, so every step keeps the monotone descent guarantee of classical
majorization-minimization while learning to move faster than the
worst-case curvature allows.
"""

from .exceptions import (
    ConfigError,
    CurvMMError,
    CurvatureUnavailableError,
    DomainError,
    EvaluationError,
    FormatError,
    InvalidInputError,
    NumericError,
    ShapeError,
)
from .losses import (
    DomainConstraints,
    ObjectiveSpec,
    cos_sim,
    lower_gradient,
    lower_objective,
    lower_objective_parts,
    upper_loss,
)
from .phinet import PhiParameters, identity_phi, make_phi, phi_forward
from .predictor import (
    PredictorParameters,
    initial_state,
    make_predictor,
    predict_p,
    project_interval,
)
from .curvature import (
    CurvatureBounds,
    CurvatureInterval,
    SpectralEstimate,
    curvature_bounds,
    estimate_lambda_max,
    valid_interval,
)
from .solver import (
    MAJORANT_MODES,
    SolverConfig,
    SolverTrace,
    calibrate_amplitude,
    mm_step,
    solve_lower,
)
from .bilevel import (
    AdamState,
    Checkpoint,
    TrainConfig,
    TrainResult,
    adaptive_moment_step,
    hypergradient,
    load_checkpoint,
    save_checkpoint,
    split_indices,
    train,
    training_loss,
)
from .datagen import (
    GeneratorConfig,
    GridGeometry,
    InverseProblemInstance,
    RingGeometry,
    generate_dataset,
    gaussian_waveform,
    make_geometry,
    make_leadfield,
    make_source_patch,
    oscillatory_waveform,
    read_dataset,
    simulate_sample,
    write_dataset,
)
from .metrics import (
    MetricsReport,
    auc_extent,
    evaluate,
    localization_error,
    nmse,
    psnr,
    time_error,
)

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "Checkpoint",
    "ConfigError",
    "CurvMMError",
    "CurvatureBounds",
    "CurvatureInterval",
    "CurvatureUnavailableError",
    "DomainConstraints",
    "DomainError",
    "EvaluationError",
    "FormatError",
    "GeneratorConfig",
    "GridGeometry",
    "InvalidInputError",
    "InverseProblemInstance",
    "MAJORANT_MODES",
    "MetricsReport",
    "NumericError",
    "ObjectiveSpec",
    "PhiParameters",
    "PredictorParameters",
    "RingGeometry",
    "ShapeError",
    "SolverConfig",
    "SolverTrace",
    "SpectralEstimate",
    "TrainConfig",
    "TrainResult",
    "adaptive_moment_step",
    "auc_extent",
    "calibrate_amplitude",
    "cos_sim",
    "curvature_bounds",
    "estimate_lambda_max",
    "evaluate",
    "gaussian_waveform",
    "generate_dataset",
    "hypergradient",
    "identity_phi",
    "initial_state",
    "load_checkpoint",
    "localization_error",
    "lower_gradient",
    "lower_objective",
    "lower_objective_parts",
    "make_geometry",
    "make_leadfield",
    "make_phi",
    "make_predictor",
    "make_source_patch",
    "mm_step",
    "nmse",
    "oscillatory_waveform",
    "phi_forward",
    "predict_p",
    "project_interval",
    "psnr",
    "read_dataset",
    "save_checkpoint",
    "simulate_sample",
    "solve_lower",
    "split_indices",
    "time_error",
    "train",
    "training_loss",
    "upper_loss",
    "valid_interval",
    "write_dataset",
]
