"""Numerical laboratory for mean-square exponential dichotomies.

Simulates linear Ito systems path by path, estimates and fits
nonuniform mean-square envelopes, checks perturbation smallness
conditions with their predicted constants, and constructs perturbed
projections by Picard iteration on the coupled integral equations.
"""

from .coefficients import (
    CoefficientSpec,
    Expression,
    Interval,
    MatrixExpression,
    spec_from_mapping,
    verify_bounds,
)
from .dichotomy import (
    KIND_CONTRACTION,
    KIND_DICHOTOMY,
    STABLE,
    UNSTABLE,
    DichotomyParams,
    ProjectionFamily,
    VerifyReport,
    fit_envelope,
    fit_envelope_joint,
    green_function,
    projection_at,
    verify_dichotomy,
    write_params_csv,
    write_verify_csv,
)
from .engine import (
    MsNormCurve,
    SimGrid,
    TransitionEnsemble,
    ms_norm_curve,
    rebase,
    simulate_forward,
    transition,
    write_curve_csv,
    write_ensemble_csv,
)
from .errors import (
    AbsentCoefficientError,
    ArgumentError,
    ConditionError,
    ConfigError,
    ConstructionError,
    ConvergenceError,
    DomainError,
    ExpressionError,
    FitError,
    GluingError,
    GridError,
    MsdlabError,
    TruncationError,
    UnderdeterminedError,
)
from .fixedpoint import (
    GluedProjections,
    KernelField,
    build_projection_left,
    build_projection_right,
    cocycle_defect,
    glue_projections,
    picard_solve_contraction,
    picard_solve_green,
    picard_solve_U,
    picard_solve_V,
    write_convergence_csv,
    write_field_csv,
)
from .linalg import cond_two, spectral_norm, spectral_norm_sq
from .oracle import (
    CertificateRow,
    EnvelopeReport,
    ExampleParams,
    example_diagonal_spec,
    example_u_mc_spec,
    log_ms_u,
    log_ms_v,
    log_transition_ms_u,
    log_transition_ms_v,
    ms_u,
    ms_v,
    nonuniformity_certificate,
    transition_ms_u,
    true_envelope,
    witnesses,
)
from .rng import counter_state, gaussian_increments
from .robustness import (
    RobustnessReport,
    check_contraction_condition,
    check_dichotomy_condition,
    check_drift_only,
    m_tilde,
    perturbed_projection_norm_bound,
    projection_distance_bound,
    s_invertibility_bound,
    solution_distance_bound,
    write_report_csv,
)
from .cli import ExperimentConfig, config_from_mapping, load_config, main, run

__version__ = "0.1.0"

__all__ = [
    "AbsentCoefficientError",
    "ArgumentError",
    "CertificateRow",
    "CoefficientSpec",
    "ConditionError",
    "ConfigError",
    "ConstructionError",
    "ConvergenceError",
    "DichotomyParams",
    "DomainError",
    "EnvelopeReport",
    "ExampleParams",
    "ExperimentConfig",
    "Expression",
    "ExpressionError",
    "FitError",
    "GluedProjections",
    "GluingError",
    "GridError",
    "Interval",
    "KIND_CONTRACTION",
    "KIND_DICHOTOMY",
    "KernelField",
    "MatrixExpression",
    "MsNormCurve",
    "MsdlabError",
    "ProjectionFamily",
    "RobustnessReport",
    "STABLE",
    "SimGrid",
    "TransitionEnsemble",
    "TruncationError",
    "UNSTABLE",
    "UnderdeterminedError",
    "VerifyReport",
    "build_projection_left",
    "build_projection_right",
    "check_contraction_condition",
    "check_dichotomy_condition",
    "check_drift_only",
    "cocycle_defect",
    "cond_two",
    "config_from_mapping",
    "counter_state",
    "example_diagonal_spec",
    "example_u_mc_spec",
    "fit_envelope",
    "fit_envelope_joint",
    "gaussian_increments",
    "glue_projections",
    "green_function",
    "load_config",
    "log_ms_u",
    "log_ms_v",
    "log_transition_ms_u",
    "log_transition_ms_v",
    "m_tilde",
    "main",
    "ms_norm_curve",
    "ms_u",
    "ms_v",
    "nonuniformity_certificate",
    "perturbed_projection_norm_bound",
    "picard_solve_U",
    "picard_solve_V",
    "picard_solve_contraction",
    "picard_solve_green",
    "projection_at",
    "projection_distance_bound",
    "rebase",
    "run",
    "s_invertibility_bound",
    "simulate_forward",
    "solution_distance_bound",
    "spec_from_mapping",
    "spectral_norm",
    "spectral_norm_sq",
    "transition",
    "transition_ms_u",
    "true_envelope",
    "verify_bounds",
    "verify_dichotomy",
    "witnesses",
    "write_convergence_csv",
    "write_curve_csv",
    "write_ensemble_csv",
    "write_field_csv",
    "write_params_csv",
    "write_report_csv",
    "write_verify_csv",
]
