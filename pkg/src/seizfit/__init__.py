"""Fit SIS, SIR and SEIZ spreading models to cumulative event counts."""
__version__ = "0.1.0"

from .data import EventLog, ObservationSeries, bin_cumulative, generate_synthetic, load_binned, load_events
from .fitting import (
    FitProblem,
    FitResult,
    OptimizerConfig,
    multi_start_fit,
    numerical_jacobian,
    relative_error_2norm,
    residuals,
    solve_bounded_lsq,
)
from .integrator import SolverConfig, Trajectory, integrate, simulate
from .models import (
    REFERENCE_SEIZ,
    CompartmentState,
    ModelKind,
    SeizParams,
    SirParams,
    SisParams,
    seiz_rhs,
    sir_rhs,
    sis_rhs,
    validate_params,
)
from .report import FitReport, build_report, classify_r0, emit
