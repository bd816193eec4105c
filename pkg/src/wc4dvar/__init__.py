"""Optimal sensor placement for weak-constraint 4D-Var data assimilation."""

__version__ = "0.1.0"

from .assimilation import DAProblem, ForecastPrior, map_solve, sc_posterior, simulate_observations, wc_cost
from .criteria import (
    DesignEvaluator,
    build_criterion_operator,
    criterion_exact,
    criterion_selected,
    reconcile_constants,
    sc_criterion_selected,
    wc_sc_gap_bound,
)
from .operators import EvolutionFamily, LinearOperator, ObservationOperator, ProblemDims, SensorDesign
from .selection import exhaustive_select, gks_select, greedy_select, raf_select, random_design_sample
from .traceest import lanczos_apply_f, slq_trace, xnystrace_logdet

__all__ = [
    "DAProblem",
    "DesignEvaluator",
    "EvolutionFamily",
    "ForecastPrior",
    "LinearOperator",
    "ObservationOperator",
    "ProblemDims",
    "SensorDesign",
    "build_criterion_operator",
    "criterion_exact",
    "criterion_selected",
    "exhaustive_select",
    "gks_select",
    "greedy_select",
    "lanczos_apply_f",
    "map_solve",
    "raf_select",
    "random_design_sample",
    "reconcile_constants",
    "sc_criterion_selected",
    "sc_posterior",
    "simulate_observations",
    "slq_trace",
    "wc_cost",
    "wc_sc_gap_bound",
    "xnystrace_logdet",
]
