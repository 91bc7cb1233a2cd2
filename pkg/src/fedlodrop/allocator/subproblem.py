"""The convex subproblem for a fixed subcarrier assignment.

For fixed ``z`` the constraints decouple per device: a device can carry any
kept fraction ``g_k`` up to its transport capacity ``u_k`` -- the largest
fraction of the full payload its assigned subcarriers can move within the
deadline and energy budget (a small LP in the per-subcarrier loads and the
two latency slacks). What remains is

    min f(g)  s.t.  lo <= g_k <= min(1, u_k)

with ``f`` strictly convex. Two routes solve it:

* ``kkt`` (default): with ``s = sqrt(sum 1/(a_k - g_k^2))`` held fixed the
  stationarity conditions separate into monotone scalar equations, so the
  optimum is the unique fixed point ``s^2 = sum 1/(a_k - g_k(s)^2)``, found by
  bracketing. Exact to root-finding precision.
* ``primal_dual``: projected multiplier ascent on the capacity constraints
  with the box-constrained primal minimized per iterate, diminishing steps
  ``c / sqrt(i + 1)``.
"""

from __future__ import annotations

from dataclasses import dataclass
import numpy as np
from scipy.optimize import brentq, linprog

from ..network_model import NetworkInstance
from .problem import AllocationSolution, ProblemConstants, SolverError, objective_p2

KEPT_FLOOR = 1e-6  # smallest kept fraction; gamma < 1 strictly
CAPACITY_EPS = 1e-9


@dataclass(frozen=True)
class DeviceCapacity:
    fraction: float  # u_k, max carried fraction of M (may exceed 1)
    loads: np.ndarray  # per-subcarrier fraction of M achieving it (S,)
    t_dl: float
    t_ul: float
    latency_dual: float  # multiplier of T_dl + T_ul <= slack
    energy_dual: float  # multiplier of the energy budget


def device_slack(instance: NetworkInstance, k: int) -> tuple[float, float]:
    """Time and energy left after local computation and circuit energy."""
    dev = instance.devices[k]
    return instance.round_deadline - dev.compute_latency, dev.energy_budget - dev.compute_energy - dev.circuit_energy


def device_capacity(instance: NetworkInstance, k: int, subcarriers) -> DeviceCapacity:
    """Largest fraction of the payload device ``k`` can move on ``subcarriers``.

    LP variables ``m_s`` (fraction of M on subcarrier s), ``T_dl``, ``T_ul``::

        max sum m_s
        s.t. m_s M Q / R_dl[s] <= T_dl,  m_s M Q / R_ul[s] <= T_ul,
             T_dl + T_ul <= T0 - T_cmp,  sum m_s M e_s <= E_budget - E_cmp - xi
    """
    subs = tuple(sorted(int(s) for s in subcarriers))
    cache = instance.__dict__.setdefault("_capacity_cache", {})
    if (k, subs) not in cache:
        cache[(k, subs)] = _capacity_lp(instance, k, subs)
    return cache[(k, subs)]


def _capacity_lp(instance: NetworkInstance, k: int, subs: tuple) -> DeviceCapacity:
    S = instance.n_subcarriers
    t_slack, e_slack = device_slack(instance, k)
    empty = DeviceCapacity(0.0, np.zeros(S), 0.0, 0.0, 0.0, 0.0)
    r_dl = instance.downlink_rates[k]
    r_ul = instance.uplink_rate[k]
    usable = [s for s in subs if r_dl[s] > 0 and r_ul[s] > 0]
    if t_slack <= 0 or e_slack < 0 or not usable:
        return empty
    M, Q = instance.full_payload, instance.bits_per_param
    energy = instance.uplink_energy_per_param[k]
    n = len(usable)
    # variables: m_1..m_n, T_dl, T_ul
    c = np.zeros(n + 2)
    c[:n] = -1.0
    rows, rhs = [], []
    for i, s in enumerate(usable):
        row = np.zeros(n + 2)
        row[i] = M * Q / r_dl[s]
        row[n] = -1.0
        rows.append(row)
        rhs.append(0.0)
        row = np.zeros(n + 2)
        row[i] = M * Q / r_ul[s]
        row[n + 1] = -1.0
        rows.append(row)
        rhs.append(0.0)
    row = np.zeros(n + 2)
    row[n] = row[n + 1] = 1.0
    rows.append(row)
    rhs.append(t_slack)
    row = np.zeros(n + 2)
    row[:n] = [M * energy[s] for s in usable]
    rows.append(row)
    rhs.append(e_slack)
    res = linprog(c, A_ub=np.array(rows), b_ub=np.array(rhs), bounds=[(0, None)] * (n + 2), method="highs")
    if res.status != 0:
        return empty
    loads = np.zeros(S)
    loads[usable] = res.x[:n]
    duals = -res.ineqlin.marginals
    return DeviceCapacity(float(-res.fun), loads, float(res.x[n]), float(res.x[n + 1]),
                          float(duals[-2]), float(duals[-1]))


def _root_kept(a: float, target: float, upper: float) -> float:
    """Solve ``g / (a - g^2)^2 = target`` for ``g`` in ``[0, upper]`` (clipped)."""
    if target <= 0:
        return 0.0
    phi = lambda g: g / (a - g * g) ** 2 - target  # noqa: E731
    if upper * upper < a and phi(upper) <= 0:
        return upper
    hi = min(upper, np.sqrt(a) * (1 - 1e-15))
    if phi(hi) <= 0:
        return hi
    return brentq(phi, 0.0, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)


def minimize_box(pc: ProblemConstants, lo: np.ndarray, hi: np.ndarray, slopes: np.ndarray | None = None) -> np.ndarray:
    """Exact minimizer of ``-slopes . g + beta * sqrt(sum 1/(a - g^2))`` over ``lo <= g <= hi``."""
    a = pc.a
    alpha = pc.linear_slopes if slopes is None else np.asarray(slopes, dtype=float)
    beta = pc.gap_scale
    lo = np.asarray(lo, dtype=float)
    hi = np.minimum(np.asarray(hi, dtype=float), np.sqrt(a))
    if beta == 0:
        return np.where(alpha > 0, hi, lo)

    def kept_at(s: float) -> np.ndarray:
        g = np.array([_root_kept(a[k], alpha[k] * s / beta, hi[k]) for k in range(len(a))])
        return np.clip(g, lo, hi)

    def resid(s: float) -> float:
        g = kept_at(s)
        return s * s - float(np.sum(1.0 / (a - g * g)))

    s_lo = np.sqrt(np.sum(1.0 / (a - lo * lo)))
    if resid(s_lo) >= 0:
        return kept_at(s_lo)
    s_hi = 2.0 * s_lo
    while resid(s_hi) < 0:
        s_hi *= 2.0
        if s_hi > 1e150:
            raise SolverError("could not bracket the gap-term fixed point")
    s_star = brentq(resid, s_lo, s_hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=1000)
    return kept_at(s_star)


def _primal_dual(pc: ProblemConstants, lo, ub, step0: float, max_iters: int, tol: float):
    """Projected multiplier ascent on ``g_k <= u_k``; returns ``(g, multipliers, iterations)``."""
    alpha = pc.linear_slopes
    box_hi = np.minimum(1.0, np.sqrt(pc.a))
    chi = np.zeros(pc.n_devices)
    g = minimize_box(pc, lo, box_hi, alpha - chi)
    for i in range(max_iters):
        step = step0 / np.sqrt(i + 1.0)
        chi_new = np.maximum(chi + step * (g - ub), 0.0)
        g_new = minimize_box(pc, lo, box_hi, alpha - chi_new)
        moved = max(np.max(np.abs(chi_new - chi)), np.max(np.abs(g_new - g)))
        chi, g = chi_new, g_new
        if moved < tol:
            return np.minimum(g, ub), chi, i + 1
    raise SolverError(f"primal-dual did not converge in {max_iters} iterations", last_iterate=(g, chi))


def solve_p2(
    pc: ProblemConstants,
    instance: NetworkInstance,
    z: np.ndarray,
    method: str = "kkt",
    step0: float = 1.0,
    max_iters: int = 20000,
    tol: float = 1e-8,
) -> AllocationSolution:
    """Optimal kept fractions and loads for the binary assignment ``z``.

    Returns an infeasible solution when some device cannot carry any positive
    fraction of the payload (no subcarrier, or no time/energy left).
    """
    z = np.asarray(z, dtype=float)
    K, S = instance.n_devices, instance.n_subcarriers
    if z.shape != (K, S) or np.any(np.abs(z.sum(axis=0) - 1) > 1e-9) or not np.all(np.isin(z, (0.0, 1.0))):
        raise ValueError("assignment must be binary with exactly one device per subcarrier")
    caps = [device_capacity(instance, k, np.flatnonzero(z[k])) for k in range(K)]
    u = np.array([c.fraction for c in caps])
    if np.any(u < CAPACITY_EPS):
        return AllocationSolution.infeasible(K, S, method=method, reason="device without transport capacity",
                                             capacity=u)
    ub = np.minimum(1.0, u)
    lo = np.minimum(KEPT_FLOOR, ub)
    iterations = 0
    if method == "kkt":
        g = minimize_box(pc, lo, ub)
        grad_gap = pc.gap_scale * g / ((pc.a - g**2) ** 2 * np.sqrt(np.sum(1.0 / (pc.a - g**2))))
        chi = np.where(g >= ub - 1e-12, np.maximum(pc.linear_slopes - grad_gap, 0.0), 0.0)
    elif method == "primal_dual":
        g, chi, iterations = _primal_dual(pc, lo, ub, step0, max_iters, tol)
    else:
        raise ValueError(f"unknown method {method!r}")
    m_hat = np.zeros((K, S))
    for k, cap in enumerate(caps):
        m_hat[k] = cap.loads * (g[k] / cap.fraction) * instance.full_payload
    return AllocationSolution(
        objective=objective_p2(pc, g),
        gamma=1.0 - g,
        m_hat=m_hat,
        z=z.copy(),
        metadata={
            "method": method,
            "iterations": iterations,
            "capacity": u,
            "capacity_multiplier": chi,
            "latency_multiplier": [c.latency_dual for c in caps],
            "energy_multiplier": [c.energy_dual for c in caps],
        },
    )
