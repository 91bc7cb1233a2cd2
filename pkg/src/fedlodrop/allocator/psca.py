"""Penalized successive convex approximation over the relaxed assignment.

Binary ``z`` is replaced by ``z in [0, 1]`` plus the penalty
``tau * sum(z - z^2)``, a difference of convex functions. Each outer step
linearizes the concave part at the previous iterate ``z_bar``
(``z^2 ~ 2 z_bar z - z_bar^2``), which leaves the linear cost
``tau (1 - 2 z_bar)`` on ``z`` inside the convex relaxation.
"""

from __future__ import annotations

import numpy as np

from ..network_model import NetworkInstance
from .problem import AllocationSolution, ProblemConstants
from .relaxation import solve_relaxation
from .search import _better, assignment_matrix, owners_of, round_robin
from .subproblem import solve_p2


def integrality_violation(z: np.ndarray) -> float:
    """``max z (1 - z)``; zero exactly at binary points."""
    z = np.asarray(z, dtype=float)
    return float(np.max(z * (1.0 - z)))


def project_assignment(z: np.ndarray) -> np.ndarray:
    """Row-argmax per subcarrier, lowest device index on ties."""
    return assignment_matrix(owners_of(z), np.asarray(z).shape[0])


def psca_solve(
    pc: ProblemConstants,
    instance: NetworkInstance,
    penalty_tau: float | None = None,
    max_outer: int = 50,
    tol: float = 1e-4,
    integrality_tol: float = 1e-3,
    starts: tuple = ("relaxed", "round_robin"),
) -> AllocationSolution:
    """Penalized SCA followed by binary projection and an exact continuous re-solve.

    The outer loop runs once from each entry of ``starts``: ``"relaxed"`` (the
    relaxed root ``z``), ``"round_robin"``, or an explicit ``(K, S)`` array.
    ``penalty_tau`` defaults to ten times the magnitude of the relaxed root
    objective and doubles whenever the iterates settle at a fractional point.
    Every iterate is projected and re-solved; the best feasible projection
    over all starts is returned. Starting from a binary point the penalty keeps
    the iterates there unless the objective pulls them away, so the result is
    never worse than any binary start.
    """
    K, S = instance.n_devices, instance.n_subcarriers
    if penalty_tau is not None and not penalty_tau > 0:
        raise ValueError("penalty tau must be positive")
    root = solve_relaxation(pc, instance)
    if not root.feasible:
        return AllocationSolution.infeasible(K, S, method="psca", outer_iterations=0, converged=False)
    tau0 = penalty_tau if penalty_tau is not None else 10.0 * max(abs(root.objective), 1e-3)
    best = None
    tried = set()

    def consider(z):
        nonlocal best
        owners = owners_of(z)
        if owners in tried or len(set(owners)) < K:
            return
        tried.add(owners)
        cand = solve_p2(pc, instance, assignment_matrix(owners, K))
        if _better(cand, best):
            best = cand

    runs = []
    for start in starts:
        if isinstance(start, str):
            z_bar = {"relaxed": lambda: root.z, "round_robin": lambda: round_robin(K, S)}[start]()
        else:
            z_bar = np.asarray(start, dtype=float)
        tau = tau0
        consider(z_bar)
        converged = False
        violation = integrality_violation(z_bar)
        outer = 0
        for outer in range(1, max_outer + 1):
            rel = solve_relaxation(pc, instance, z_cost=tau * (1.0 - 2.0 * z_bar))
            if not rel.feasible:
                break
            consider(rel.z)
            step = float(np.max(np.abs(rel.z - z_bar)))
            z_bar = rel.z
            violation = integrality_violation(z_bar)
            if step < tol:
                if violation <= integrality_tol:
                    converged = True
                    break
                tau *= 2.0
        runs.append({"outer_iterations": outer, "converged": converged, "penalty_tau": tau,
                     "integrality_violation": violation})
    meta = {
        "method": "psca",
        "outer_iterations": sum(r["outer_iterations"] for r in runs),
        "converged": all(r["converged"] for r in runs),
        "integrality_violation": max(r["integrality_violation"] for r in runs),
        "starts": runs,
    }
    if best is None:
        return AllocationSolution.infeasible(K, S, **meta)
    best.metadata.update(meta)
    return best
