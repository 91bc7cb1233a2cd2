"""Numeric convexity check of the gap term and rounding of solutions for the protocol."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..network_model import NetworkInstance, RoundAllocation, check_constraints
from .problem import AllocationSolution, ProblemConstants, appendix_hessian_2x2, gap_term


def fd_hessian(fun, x: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central-difference Hessian of a scalar function."""
    x = np.asarray(x, dtype=float)
    n = x.size
    hess = np.zeros((n, n))
    eye = np.eye(n) * h
    f0 = fun(x)
    for i in range(n):
        hess[i, i] = (fun(x + eye[i]) - 2 * f0 + fun(x - eye[i])) / h**2
        for j in range(i + 1, n):
            v = (fun(x + eye[i] + eye[j]) - fun(x + eye[i] - eye[j])
                 - fun(x - eye[i] + eye[j]) + fun(x - eye[i] - eye[j])) / (4 * h**2)
            hess[i, j] = hess[j, i] = v
    return hess


@dataclass
class HessianReport:
    min_eigenvalues: list = field(default_factory=list)
    closed_form_rel_error: list = field(default_factory=list)  # K=2 only
    skipped: list = field(default_factory=list)  # (index, reason)

    @property
    def min_eigenvalue(self) -> float:
        return min(self.min_eigenvalues) if self.min_eigenvalues else float("nan")


def hessian_check(pc: ProblemConstants, gamma_tilde_samples, h: float = 1e-4) -> HessianReport:
    """Finite-difference Hessian of the bare gap term at each sample.

    Samples must sit at least ``2h`` inside the domain ``g^2 < a``; others are
    skipped with a note. For two devices the term-by-term closed form is
    compared entrywise (relative to the largest entry).
    """
    report = HessianReport()
    a = pc.a
    fun = lambda g: gap_term(pc, g)  # noqa: E731
    for i, g in enumerate(np.atleast_2d(np.asarray(gamma_tilde_samples, dtype=float))):
        if np.any((np.abs(g) + 2 * h) ** 2 >= a):
            report.skipped.append((i, "outside the strictly feasible region"))
            continue
        hess = fd_hessian(fun, g, h)
        report.min_eigenvalues.append(float(np.min(np.linalg.eigvalsh(hess))))
        if pc.n_devices == 2:
            closed = appendix_hessian_2x2(a[0], a[1], g[0], g[1])
            report.closed_form_rel_error.append(float(np.max(np.abs(closed - hess)) / np.max(np.abs(closed))))
    return report


@dataclass
class LoweredRound:
    gamma: np.ndarray
    m_hat: np.ndarray  # integral parameter counts
    z: np.ndarray
    feasible: bool
    violations: list
    repaired: bool = False  # loads shrunk within the coverage slack
    gamma_raised: bool = False  # loads floored and gamma raised to match

    def allocation(self) -> RoundAllocation:
        return RoundAllocation(self.z, self.m_hat, self.gamma)


def _budget_broken(instance, z, m, gamma, k) -> bool:
    return bool({"C1", "C2"} & set(check_constraints(instance, RoundAllocation(z, m, gamma)).violations[k]))


def lower_to_protocol(solution: AllocationSolution, instance: NetworkInstance) -> LoweredRound:
    """Integral per-subcarrier parameter counts for a solved round.

    Loads on assigned subcarriers are rounded up. A device whose latency or
    energy budget then breaks is repaired by removing single parameters
    (largest rounding overshoot first) while ``sum M_hat >= (1 - gamma) M``
    still holds. If the coverage slack runs out first, its loads are floored
    instead and its rate raised to ``1 - sum M_hat / M`` so coverage holds
    exactly; ``gamma_raised`` records that. Anything still violated is
    reported in ``violations``.
    """
    if not solution.feasible:
        raise ValueError("cannot lower an infeasible solution")
    z = np.asarray(solution.z, dtype=float)
    gamma = np.asarray(solution.gamma, dtype=float).copy()
    raw = np.where(z > 0.5, solution.m_hat, 0.0)
    near = np.abs(raw - np.round(raw)) < 1e-9
    m = np.where(near, np.round(raw), np.ceil(raw))
    full = instance.full_payload
    repaired = raised = False
    for k in range(instance.n_devices):
        if not _budget_broken(instance, z, m, gamma, k):
            continue
        need = (1.0 - gamma[k]) * full
        for s in np.argsort(-(m[k] - raw[k]), kind="stable"):
            while m[k, s] >= 1 and m[k].sum() - 1 >= need * (1 - 1e-12) and _budget_broken(instance, z, m, gamma, k):
                m[k, s] -= 1
                repaired = True
        if _budget_broken(instance, z, m, gamma, k):
            m[k] = np.floor(raw[k] + 1e-9)
            carried = m[k].sum()
            if carried > 0:
                gamma[k] = max(gamma[k], 1.0 - carried / full)
                raised = True
    final = check_constraints(instance, RoundAllocation(z, m, gamma))
    return LoweredRound(gamma, m, z, final.feasible, final.violations, repaired, raised)
