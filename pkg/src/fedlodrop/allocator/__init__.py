"""Joint dropout-rate and subcarrier allocation: exact search, P-SCA and baselines."""

from .checks import HessianReport, LoweredRound, fd_hessian, hessian_check, lower_to_protocol
from .problem import (
    AllocationSolution,
    InfeasibleError,
    ProblemConstants,
    SolverError,
    appendix_hessian_2x2,
    gap_term,
    gap_term_hessian,
    objective_p2,
    objective_p2_grad,
    random_constants,
)
from .psca import integrality_violation, project_assignment, psca_solve
from .relaxation import RelaxationResult, solve_relaxation
from .search import (
    assignment_matrix,
    branch_and_bound,
    exhaustive_oracle,
    no_dropout,
    owners_of,
    round_robin,
    subcarrier_fixed,
)
from .subproblem import DeviceCapacity, device_capacity, minimize_box, solve_p2

SOLVERS = {
    "bnb": branch_and_bound,
    "psca": psca_solve,
    "oracle": exhaustive_oracle,
    "subcarrier_fixed": subcarrier_fixed,
    "no_dropout": no_dropout,
}


def solve(method: str, constants: ProblemConstants, instance, **options) -> AllocationSolution:
    """Dispatch to a named allocation scheme."""
    try:
        fn = SOLVERS[method.replace("-", "_")]
    except KeyError:
        raise ValueError(f"unknown method {method!r}; choose from {sorted(SOLVERS)}") from None
    return fn(constants, instance, **options)
