"""Exact search over subcarrier assignments, its brute-force oracle and the fixed baselines."""

from __future__ import annotations

import heapq
import itertools

import numpy as np

from ..network_model import NetworkInstance
from .problem import AllocationSolution, ProblemConstants, objective_p2
from .relaxation import solve_relaxation
from .subproblem import KEPT_FLOOR, device_capacity, minimize_box, solve_p2

ORACLE_LIMIT = 100_000


def assignment_matrix(owners, n_devices: int) -> np.ndarray:
    """Binary ``(K, S)`` matrix from the owning device of each subcarrier."""
    owners = list(owners)
    z = np.zeros((n_devices, len(owners)))
    z[owners, np.arange(len(owners))] = 1.0
    return z


def owners_of(z: np.ndarray) -> tuple:
    """Owning device per subcarrier; lowest index wins ties."""
    return tuple(int(v) for v in np.argmax(np.asarray(z), axis=0))


def _better(sol: AllocationSolution, best: AllocationSolution | None, tol: float = 1e-12) -> bool:
    if not sol.feasible:
        return False
    if best is None or not best.feasible:
        return True
    if sol.objective < best.objective - tol:
        return True
    return abs(sol.objective - best.objective) <= tol and owners_of(sol.z) < owners_of(best.z)


def exhaustive_oracle(pc: ProblemConstants, instance: NetworkInstance, limit: int = ORACLE_LIMIT) -> AllocationSolution:
    """Enumerate every one-device-per-subcarrier assignment and keep the best."""
    K, S = instance.n_devices, instance.n_subcarriers
    count = K**S
    if count > limit:
        raise ValueError(f"{count} assignments exceed the oracle limit of {limit}")
    best = None
    n_feasible = 0
    for owners in itertools.product(range(K), repeat=S):
        sol = solve_p2(pc, instance, assignment_matrix(owners, K))
        n_feasible += sol.feasible
        if _better(sol, best):
            best = sol
    if best is None:
        best = AllocationSolution.infeasible(K, S)
    best.metadata.update(method="oracle", assignments_evaluated=count, feasible_assignments=n_feasible)
    return best


def round_robin(n_devices: int, n_subcarriers: int) -> np.ndarray:
    return assignment_matrix([s % n_devices for s in range(n_subcarriers)], n_devices)


def subcarrier_fixed(pc: ProblemConstants, instance: NetworkInstance, z: np.ndarray | None = None) -> AllocationSolution:
    """Continuous variables optimized on a fixed assignment (round-robin by default)."""
    K, S = instance.n_devices, instance.n_subcarriers
    if z is None:
        z = round_robin(K, S)
    sol = solve_p2(pc, instance, z)
    sol.metadata["method"] = "subcarrier_fixed"
    return sol


def no_dropout(pc: ProblemConstants, instance: NetworkInstance) -> AllocationSolution:
    """Every device carries the full adapter (``gamma = 0``); feasible only if some assignment allows it."""
    K, S = instance.n_devices, instance.n_subcarriers
    kept = np.ones(K)
    best_z, best_margin = None, -np.inf
    if K**S <= ORACLE_LIMIT:
        candidates = itertools.product(range(K), repeat=S)
    else:
        candidates = [owners_of(round_robin(K, S))]
    for owners in candidates:
        z = assignment_matrix(owners, K)
        caps = [device_capacity(instance, k, np.flatnonzero(z[k])) for k in range(K)]
        margin = min(c.fraction for c in caps)
        if margin > best_margin:
            best_z, best_margin, best_caps = z, margin, caps
    if best_margin < 1.0 - 1e-12:
        return AllocationSolution.infeasible(K, S, method="no_dropout", best_capacity=best_margin)
    m_hat = np.array([c.loads / c.fraction for c in best_caps]) * instance.full_payload
    return AllocationSolution(objective_p2(pc, kept), np.zeros(K), m_hat, best_z, True,
                              {"method": "no_dropout", "capacity": [c.fraction for c in best_caps]})


def _bounds_for(prefix: tuple, K: int, S: int) -> tuple[np.ndarray, np.ndarray]:
    lo, hi = np.zeros((K, S)), np.ones((K, S))
    for s, k in enumerate(prefix):
        lo[:, s] = 0.0
        hi[:, s] = 0.0
        lo[k, s] = hi[k, s] = 1.0
    return lo, hi


def _coverable(prefix: tuple, instance: NetworkInstance) -> bool:
    """Enough unfixed subcarriers remain for the devices that have none yet."""
    K, S = instance.n_devices, instance.n_subcarriers
    have = set(prefix)
    missing = [k for k in range(K) if k not in have]
    return len(missing) <= S - len(prefix)


def capacity_bound(pc: ProblemConstants, instance: NetworkInstance, prefix: tuple) -> float:
    """Lower bound for all completions of ``prefix``: every device may also use every unfixed subcarrier.

    Each device's capacity is computed as if it alone held the unfixed
    subcarriers, which can only enlarge its feasible kept fraction.
    """
    K, S = instance.n_devices, instance.n_subcarriers
    free = list(range(len(prefix), S))
    u = np.array([
        device_capacity(instance, k, [s for s, owner in enumerate(prefix) if owner == k] + free).fraction
        for k in range(K)
    ])
    if np.any(u <= 0):
        return float("inf")
    ub = np.minimum(1.0, u)
    g = minimize_box(pc, np.minimum(KEPT_FLOOR, ub), ub)
    return objective_p2(pc, g)


def branch_and_bound(
    pc: ProblemConstants,
    instance: NetworkInstance,
    node_budget: int = 100_000,
    tol: float = 1e-9,
) -> AllocationSolution:
    """Globally optimal assignment by best-first branch and bound.

    Subcarriers are fixed in index order; children are tried in descending
    order of the parent's relaxed ``z`` (lowest device index on ties). A node
    is pruned when too few subcarriers remain to serve every device, when its
    relaxation is infeasible, or when a lower bound cannot beat the incumbent.
    Two bounds are used: :func:`capacity_bound` (cheap, tried first) and the
    convex relaxation; their maximum orders the queue. Complete assignments are solved exactly with
    :func:`solve_p2`. Exceeding ``node_budget`` returns the incumbent flagged
    ``optimal=False``. ``tol`` is the slack in the pruning test.
    """
    K, S = instance.n_devices, instance.n_subcarriers
    if K == 1:
        sol = solve_p2(pc, instance, np.ones((1, S)))
        sol.metadata.update(method="bnb", nodes_explored=1, optimal=sol.feasible)
        return sol
    root = solve_relaxation(pc, instance)
    nodes = 1
    best = None
    if root.feasible:
        for z0 in (assignment_matrix(owners_of(root.z), K), round_robin(K, S)):
            if np.all(z0.sum(axis=1) >= 1):
                cand = solve_p2(pc, instance, z0)
                nodes += 1
                if _better(cand, best):
                    best = cand
    heap = []
    counter = itertools.count()
    if root.feasible:
        heapq.heappush(heap, (root.objective, next(counter), (), root.z))
    exhausted = False
    while heap:
        lb, _, prefix, z_rel = heapq.heappop(heap)
        if best is not None and lb >= best.objective - tol:
            continue
        d = len(prefix)
        order = sorted(range(K), key=lambda k: (-z_rel[k, d], k))
        for k in order:
            if nodes >= node_budget:
                exhausted = True
                break
            child = prefix + (k,)
            if not _coverable(child, instance):
                continue
            nodes += 1
            if len(child) == S:
                cand = solve_p2(pc, instance, assignment_matrix(child, K))
                if _better(cand, best):
                    best = cand
                continue
            quick = capacity_bound(pc, instance, child)
            if best is not None and quick >= best.objective - tol:
                continue
            lo, hi = _bounds_for(child, K, S)
            rel = solve_relaxation(pc, instance, lo, hi)
            if not rel.feasible:
                continue
            # an inaccurate solve is not trusted as a bound; inherit the parent's
            child_lb = max(quick, rel.objective if rel.status == "optimal" else lb)
            if best is not None and child_lb >= best.objective - tol:
                continue
            heapq.heappush(heap, (child_lb, next(counter), child, rel.z))
        if exhausted:
            break
    if best is None:
        best = AllocationSolution.infeasible(K, S)
    best.metadata.update(method="bnb", nodes_explored=nodes, optimal=not exhausted,
                         root_bound=root.objective if root.feasible else None)
    return best

