"""Continuous relaxation of the assignment problem, shared by B&B bounding and P-SCA.

Binary ``z`` is relaxed to ``[z_lo, z_hi]`` with one unit of assignment per
subcarrier. Loads ``m[k, s]`` (fractions of the full payload) are linked to
``z`` by ``m <= z * cap`` where ``cap[k, s]`` is what subcarrier ``s`` alone
could carry for device ``k``; every binary-feasible point satisfies this, so
the relaxation is a valid lower bound. An optional linear cost on ``z``
carries the linearized penalty of P-SCA.

The cvxpy problem is parameterized and compiled once per ``(K, S)``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import cvxpy as cp
import numpy as np

from ..network_model import NetworkInstance
from .problem import ProblemConstants
from .subproblem import device_slack

_MODELS: dict = {}


@dataclass
class RelaxationResult:
    status: str
    objective: float  # P2 objective value (without the linear z cost)
    total: float  # objective including the linear z cost
    gamma_tilde: np.ndarray
    z: np.ndarray
    m: np.ndarray  # fractions of M

    @property
    def feasible(self) -> bool:
        return self.status in ("optimal", "optimal_inaccurate")


class _Model:
    def __init__(self, K: int, S: int):
        self.a = cp.Parameter(K, name="a")
        self.alpha = cp.Parameter(K, nonneg=True, name="alpha")
        self.beta = cp.Parameter(nonneg=True, name="beta")
        self.q_dl = cp.Parameter((K, S), nonneg=True, name="q_dl")
        self.q_ul = cp.Parameter((K, S), nonneg=True, name="q_ul")
        self.energy = cp.Parameter((K, S), nonneg=True, name="energy")
        self.cap = cp.Parameter((K, S), nonneg=True, name="cap")
        self.usable = cp.Parameter((K, S), nonneg=True, name="usable")
        self.t_slack = cp.Parameter(K, name="t_slack")
        self.e_slack = cp.Parameter(K, name="e_slack")
        self.z_lo = cp.Parameter((K, S), name="z_lo")
        self.z_hi = cp.Parameter((K, S), name="z_hi")
        self.z_cost = cp.Parameter((K, S), name="z_cost")

        self.g = cp.Variable(K, name="gamma_tilde")
        self.m = cp.Variable((K, S), nonneg=True, name="m")
        self.z = cp.Variable((K, S), name="z")
        self.t_dl = cp.Variable(K, nonneg=True)
        self.t_ul = cp.Variable(K, nonneg=True)
        self.t = cp.Variable(K, nonneg=True)

        ones_k = np.ones((1, K))
        cons = [
            self.g >= 0,
            self.g <= 1,
            self.t >= cp.power(self.a - cp.square(self.g), -0.5),
            cp.multiply(self.q_dl, self.m) <= self.t_dl[:, None] @ np.ones((1, S)),
            cp.multiply(self.q_ul, self.m) <= self.t_ul[:, None] @ np.ones((1, S)),
            self.t_dl + self.t_ul <= self.t_slack,
            cp.sum(cp.multiply(self.energy, self.m), axis=1) <= self.e_slack,
            cp.sum(self.m, axis=1) >= self.g,
            self.m <= cp.multiply(self.cap, self.z),
            ones_k @ self.z == np.ones((1, S)),
            cp.sum(cp.multiply(self.usable, self.z), axis=1) >= 1,
            self.z >= self.z_lo,
            self.z <= self.z_hi,
        ]
        self.p2_value = -self.alpha @ self.g + self.beta * cp.norm(self.t, 2)
        self.problem = cp.Problem(cp.Minimize(self.p2_value + cp.sum(cp.multiply(self.z_cost, self.z))), cons)


def _model(K: int, S: int) -> _Model:
    if (K, S) not in _MODELS:
        _MODELS[(K, S)] = _Model(K, S)
    return _MODELS[(K, S)]


def link_data(instance: NetworkInstance) -> dict:
    """Per-(device, subcarrier) coefficients of the relaxed constraint set, in payload fractions."""
    K, S = instance.n_devices, instance.n_subcarriers
    M, Q = instance.full_payload, instance.bits_per_param
    r_dl, r_ul = instance.downlink_rates, instance.uplink_rate
    usable = (r_dl > 0) & (r_ul > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        q_dl = np.where(usable, M * Q / r_dl, 0.0)
        q_ul = np.where(usable, M * Q / r_ul, 0.0)
        energy = np.where(usable, M * instance.uplink_energy_per_param, 0.0)
    slack = np.array([device_slack(instance, k) for k in range(K)])
    t_slack, e_slack = slack[:, 0], slack[:, 1]
    cap = np.zeros((K, S))
    for k in range(K):
        if t_slack[k] <= 0 or e_slack[k] < 0:
            continue
        by_time = t_slack[k] / np.maximum(q_dl[k] + q_ul[k], 1e-300)
        by_energy = np.where(energy[k] > 0, e_slack[k] / np.maximum(energy[k], 1e-300), np.inf)
        cap[k] = np.where(usable[k], np.minimum(1.0, np.minimum(by_time, by_energy)), 0.0)
    return {"q_dl": q_dl, "q_ul": q_ul, "energy": energy, "cap": cap, "usable": (cap > 0).astype(float),
            "t_slack": t_slack, "e_slack": e_slack}


def solve_relaxation(
    pc: ProblemConstants,
    instance: NetworkInstance,
    z_lo: np.ndarray | None = None,
    z_hi: np.ndarray | None = None,
    z_cost: np.ndarray | None = None,
) -> RelaxationResult:
    K, S = instance.n_devices, instance.n_subcarriers
    data = instance.__dict__.get("_link_data")
    if data is None:
        data = link_data(instance)
        instance.__dict__["_link_data"] = data
    mdl = _model(K, S)
    mdl.a.value = pc.a
    mdl.alpha.value = pc.linear_slopes
    mdl.beta.value = pc.gap_scale
    for name in ("q_dl", "q_ul", "energy", "cap", "usable", "t_slack", "e_slack"):
        getattr(mdl, name).value = data[name]
    mdl.z_lo.value = np.zeros((K, S)) if z_lo is None else np.asarray(z_lo, dtype=float)
    mdl.z_hi.value = np.ones((K, S)) if z_hi is None else np.asarray(z_hi, dtype=float)
    mdl.z_cost.value = np.zeros((K, S)) if z_cost is None else np.asarray(z_cost, dtype=float)
    nan = np.full(K, np.nan)
    if np.any(data["t_slack"] <= 0) or np.any(data["e_slack"] < 0) or S < K:
        return RelaxationResult("infeasible", np.inf, np.inf, nan, np.full((K, S), np.nan), np.full((K, S), np.nan))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        try:
            mdl.problem.solve(solver=cp.CLARABEL)
        except cp.error.SolverError:
            mdl.problem.solve(solver=cp.SCS, eps=1e-9)
    status = mdl.problem.status
    if status not in ("optimal", "optimal_inaccurate"):
        return RelaxationResult(status, np.inf, np.inf, nan, np.full((K, S), np.nan), np.full((K, S), np.nan))
    alpha_sum = float(np.sum(pc.linear_slopes))
    return RelaxationResult(
        status,
        float(mdl.p2_value.value) + alpha_sum,
        float(mdl.problem.value) + alpha_sum,
        np.clip(mdl.g.value, 0.0, 1.0),
        np.clip(mdl.z.value, 0.0, 1.0),
        np.maximum(mdl.m.value, 0.0),
    )
