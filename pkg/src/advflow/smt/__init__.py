from .encode import SmtQuery, TargetBand, chunk_ranges, encode, split_inject_caps
from .plan import (
    Injection,
    PerturbationPlan,
    PlanRealizationError,
    ValidationReport,
    bands_satisfied,
    build_plan,
    reconstruct,
    validate,
)
from .solve import SolveResult, SolverConfig, SolverFailure, Verdict, solve_text

__all__ = [
    "Injection",
    "PerturbationPlan",
    "PlanRealizationError",
    "SmtQuery",
    "SolveResult",
    "SolverConfig",
    "SolverFailure",
    "TargetBand",
    "ValidationReport",
    "Verdict",
    "bands_satisfied",
    "build_plan",
    "chunk_ranges",
    "encode",
    "reconstruct",
    "solve_text",
    "split_inject_caps",
    "validate",
]
