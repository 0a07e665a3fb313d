from .expr import AffineMatrix, bmat, blkdiag_expr, he_expr
from .model import (
    LmiConstraint,
    SdpProblem,
    SdpSolution,
    SolverConfig,
    VarHandle,
    reformulate_quadratic,
    solve,
    verify_solution,
)
from .dump import dump_problem, load_problem

__all__ = [
    "AffineMatrix",
    "bmat",
    "blkdiag_expr",
    "he_expr",
    "VarHandle",
    "LmiConstraint",
    "SdpProblem",
    "SdpSolution",
    "SolverConfig",
    "reformulate_quadratic",
    "solve",
    "verify_solution",
    "dump_problem",
    "load_problem",
]
