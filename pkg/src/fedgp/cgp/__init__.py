"""Energy minimization by successive geometric programming."""

from .condense import condensation_weights, condense_posynomial
from .optimizer import (Infeasible, Iterate, OptimizerOptions, OptimizerReport, OptStatus,
                        baseline_optimize, build_approx_gp, find_initial_feasible, optimize,
                        params_from_dict, params_to_dict, run_gia)
from .rounding import RoundingFailed, round_to_integers
from .templates import FullOptimization, Template, build_equivalent, mode_name

__all__ = ["condensation_weights", "condense_posynomial", "Infeasible", "Iterate", "OptimizerOptions", "OptimizerReport",
           "OptStatus", "baseline_optimize", "build_approx_gp", "find_initial_feasible", "optimize",
           "params_from_dict", "params_to_dict", "run_gia", "RoundingFailed", "round_to_integers", "FullOptimization", "Template",
           "build_equivalent", "mode_name"]
