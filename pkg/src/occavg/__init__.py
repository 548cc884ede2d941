"""Occupation measures of controlled Markov chains and averaging of two-timescale systems.

The main entry points are re-exported here; see the submodules for details.
"""

__version__ = "0.1.0"

from .errors import (ConfigError, ConvergenceFailure, GuardError, InfeasibleError, InvalidArgument, ModelViolation,
                     NumericalFailure, OccavgError, ResourceLimitError)
from .measures import GridSpec, MetricBasis, OccMeasure, build_metric_basis, rho
from .system import ControlPlan, SystemSpec, simulate, simulate_batch
from .stationary import MeasurePolytope, build_kernel, stationary_polytope, support
from .happrox import TestVector, loms_report, psi_h_dp, strong_nu_estimate, weak_nu_estimate
from .hybrid import HybridSpec, TimeGrid, make_time_grid, simulate_hybrid
from .inclusion import VelocityOracle, optimize_F0, project_onto_Vg, solve_inclusion, support_Vg
from .synthesis import SynthesisConfig, assemble_plan, optimality_gap, verify_tracking

__all__ = [
    "ConfigError", "ConvergenceFailure", "GuardError", "InfeasibleError", "InvalidArgument", "ModelViolation",
    "NumericalFailure", "OccavgError", "ResourceLimitError",
    "GridSpec", "MetricBasis", "OccMeasure", "build_metric_basis", "rho",
    "ControlPlan", "SystemSpec", "simulate", "simulate_batch",
    "MeasurePolytope", "build_kernel", "stationary_polytope", "support",
    "TestVector", "loms_report", "psi_h_dp", "strong_nu_estimate", "weak_nu_estimate",
    "HybridSpec", "TimeGrid", "make_time_grid", "simulate_hybrid",
    "VelocityOracle", "optimize_F0", "project_onto_Vg", "solve_inclusion", "support_Vg",
    "SynthesisConfig", "assemble_plan", "optimality_gap", "verify_tracking",
]
