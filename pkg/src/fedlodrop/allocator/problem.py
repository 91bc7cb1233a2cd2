"""Constants, objective and solution records of the joint dropout/subcarrier problem.

After substituting ``g_k = 1 - gamma_k`` (the kept fraction) the objective is

    (I / eta) * sum_k w_k (1 - g_k)  +  (V eta / sqrt(|D|)) * sqrt(sum_k 1 / (a_k - g_k^2))

with ``I = U'(n1 + n2) H^2 G^4``, ``V = sqrt(6 C / (delta lambda))`` and
``a_k = (2 lambda + Lambda_k) / (2 lambda)``. The first term is the dropout
error floor, the second the generalization-gap term.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..bounds import BoundConstants
from ..lora_core import DomainError


class InfeasibleError(RuntimeError):
    """No allocation satisfies the round constraints."""


class SolverError(RuntimeError):
    """An iterative solver stopped without converging."""

    def __init__(self, message: str, last_iterate=None):
        super().__init__(message)
        self.last_iterate = last_iterate


@dataclass(frozen=True)
class ProblemConstants:
    dropout_coeff_I: float
    gap_coeff_V: float
    curvature_a: tuple  # a_k per device
    eta: float
    shard_weights: tuple  # |D_k| / |D|
    dataset_size: float

    def __post_init__(self):
        object.__setattr__(self, "curvature_a", tuple(float(v) for v in self.curvature_a))
        object.__setattr__(self, "shard_weights", tuple(float(v) for v in self.shard_weights))
        if len(self.curvature_a) != len(self.shard_weights):
            raise DomainError("one curvature term per device is required")
        if self.dropout_coeff_I < 0 or self.gap_coeff_V < 0:
            raise DomainError("objective coefficients must be nonnegative")
        if not self.eta > 0 or not self.dataset_size > 0:
            raise DomainError("eta and dataset size must be positive")
        if min(self.curvature_a) < 1.0 - 1e-12:
            raise DomainError("curvature terms a_k must be >= 1")

    @classmethod
    def from_bounds(cls, c: BoundConstants) -> "ProblemConstants":
        lam = c.reg_lambda
        return cls(
            dropout_coeff_I=c.dropout_coefficient,
            gap_coeff_V=float(np.sqrt(6.0 * c.loss_range_C / (c.confidence_delta * lam))),
            curvature_a=tuple((2.0 * lam + h) / (2.0 * lam) for h in c.hessian_min_per_device),
            eta=c.lipschitz_eta,
            shard_weights=tuple(c.shard_weights),
            dataset_size=float(c.dataset_size),
        )

    @property
    def n_devices(self) -> int:
        return len(self.curvature_a)

    @property
    def a(self) -> np.ndarray:
        return np.asarray(self.curvature_a)

    @property
    def w(self) -> np.ndarray:
        return np.asarray(self.shard_weights)

    @property
    def linear_slopes(self) -> np.ndarray:
        """``alpha_k = I w_k / eta``: objective decrease per unit of kept fraction."""
        return self.dropout_coeff_I * self.w / self.eta

    @property
    def gap_scale(self) -> float:
        """``beta = V eta / sqrt(|D|)``."""
        return self.gap_coeff_V * self.eta / np.sqrt(self.dataset_size)

    def to_dict(self) -> dict:
        return {
            "dropout_coeff_I": self.dropout_coeff_I,
            "gap_coeff_V": self.gap_coeff_V,
            "curvature_a": list(self.curvature_a),
            "eta": self.eta,
            "shard_weights": list(self.shard_weights),
            "dataset_size": self.dataset_size,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ProblemConstants":
        return cls(**doc)


def random_constants(n_devices: int, seed: int = 0, shard_sizes=None) -> ProblemConstants:
    """Constants that put the unconstrained optimum in the interior of (0, 1]."""
    rng = np.random.default_rng(seed)
    if shard_sizes is None:
        shard_sizes = rng.integers(50, 201, size=n_devices)
    sizes = np.asarray(shard_sizes, dtype=float)
    return ProblemConstants(
        dropout_coeff_I=float(rng.uniform(0.5, 1.5)),
        gap_coeff_V=float(rng.uniform(0.6, 1.2) * np.sqrt(sizes.sum()) / np.sqrt(n_devices)),
        curvature_a=tuple(rng.uniform(1.1, 2.0, size=n_devices)),
        eta=1.0,
        shard_weights=tuple(sizes / sizes.sum()),
        dataset_size=float(sizes.sum()),
    )


def _kept(pc: ProblemConstants, gamma_tilde) -> np.ndarray:
    g = np.asarray(gamma_tilde, dtype=float)
    if g.shape != (pc.n_devices,):
        raise DomainError(f"expected {pc.n_devices} kept fractions, got shape {g.shape}")
    return g


def gap_term(pc: ProblemConstants, gamma_tilde) -> float:
    """Bare ``sqrt(sum_k 1 / (a_k - g_k^2))`` (without the ``beta`` factor)."""
    g = _kept(pc, gamma_tilde)
    d = pc.a - g**2
    if np.any(d <= 0):
        raise DomainError("kept fraction outside the objective's domain (g_k^2 >= a_k)")
    return float(np.sqrt(np.sum(1.0 / d)))


def objective_p2(pc: ProblemConstants, gamma_tilde) -> float:
    g = _kept(pc, gamma_tilde)
    first = float(np.dot(pc.linear_slopes, 1.0 - g))
    return first + pc.gap_scale * gap_term(pc, g)


def objective_p2_grad(pc: ProblemConstants, gamma_tilde) -> np.ndarray:
    g = _kept(pc, gamma_tilde)
    d = pc.a - g**2
    if np.any(d <= 0):
        raise DomainError("kept fraction outside the objective's domain")
    s = np.sqrt(np.sum(1.0 / d))
    return -pc.linear_slopes + pc.gap_scale * g / (d**2 * s)


def gap_term_hessian(pc: ProblemConstants, gamma_tilde) -> np.ndarray:
    """Analytic Hessian of :func:`gap_term` for any number of devices."""
    g = _kept(pc, gamma_tilde)
    d = pc.a - g**2
    S = np.sum(1.0 / d)
    u = g / d**2  # half the derivative of S
    hess = -np.outer(u, u) / S**1.5
    hess[np.diag_indices_from(hess)] += (1.0 / d**2 + 4.0 * g**2 / d**3) / np.sqrt(S)
    return hess


def appendix_hessian_2x2(a1: float, a2: float, g1: float, g2: float) -> np.ndarray:
    """Two-device Hessian entries written out term by term (kept fractions ``g1, g2``)."""
    d1, d2 = a1 - g1**2, a2 - g2**2
    S = 1.0 / d1 + 1.0 / d2
    o11 = 4 * g1**2 / (d1**3 * np.sqrt(S)) - g1**2 / (d1**4 * S**1.5) + 1.0 / (d1**2 * np.sqrt(S))
    o22 = 4 * g2**2 / (d2**3 * np.sqrt(S)) - g2**2 / (d2**4 * S**1.5) + 1.0 / (d2**2 * np.sqrt(S))
    o12 = -g1 * g2 / (d1**2 * d2**2 * S**1.5)
    return np.array([[o11, o12], [o12, o22]])


@dataclass
class AllocationSolution:
    objective: float
    gamma: np.ndarray  # dropout rates (K,)
    m_hat: np.ndarray  # parameters per (device, subcarrier), real-valued
    z: np.ndarray  # binary assignment (K, S)
    feasible: bool = True
    metadata: dict = field(default_factory=dict)

    @property
    def gamma_tilde(self) -> np.ndarray:
        return 1.0 - self.gamma

    def to_dict(self) -> dict:
        return {
            "objective": self.objective if self.feasible else None,
            "feasible": self.feasible,
            "gamma": np.asarray(self.gamma).tolist(),
            "m_hat": np.asarray(self.m_hat).tolist(),
            "z": np.asarray(self.z).astype(int).tolist(),
            "metadata": _jsonable(self.metadata),
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def infeasible(cls, n_devices: int, n_subcarriers: int, **metadata) -> "AllocationSolution":
        return cls(float("inf"), np.full(n_devices, np.nan), np.zeros((n_devices, n_subcarriers)),
                   np.zeros((n_devices, n_subcarriers)), False, dict(metadata))

    def table(self) -> str:
        """Plain-text summary, one row per device."""
        lines = [f"objective: {self.objective:.6g}" if self.feasible else "objective: infeasible"]
        lines.append(f"{'device':>6}  {'gamma':>8}  {'subcarriers':<16}  {'params':>12}")
        for k in range(len(self.gamma)):
            subs = ",".join(str(s) for s in np.flatnonzero(np.asarray(self.z)[k] > 0.5)) or "-"
            lines.append(f"{k:>6}  {self.gamma[k]:>8.4f}  {subs:<16}  {np.sum(self.m_hat[k]):>12.1f}")
        for key in ("method", "nodes_explored", "assignments_evaluated", "outer_iterations", "optimal"):
            if key in self.metadata:
                lines.append(f"{key}: {self.metadata[key]}")
        return "\n".join(lines)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return obj
