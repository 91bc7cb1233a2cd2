"""Closed-form stability, generalization, gradient-error and convergence bounds.

Every evaluator is a pure function of a :class:`BoundConstants` record and the
per-device dropout rates. The recurring quantity is the entry-drop probability
of the product ``B_hat A_hat``, ``p(gamma) = 2 gamma - gamma^2``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .lora_core import DomainError


def drop_probability(gamma):
    """``2 gamma - gamma^2``: chance an entry of ``B_hat A_hat`` is zeroed."""
    gamma = np.asarray(gamma, dtype=float)
    return 2.0 * gamma - gamma**2


@dataclass(frozen=True)
class BoundConstants:
    lipschitz_eta: float = 1.0
    grad_bound_H: float = 1.0
    weight_bound_G: float = 1.0
    pl_mu: float = 0.0
    optimality_gap_rho: float = 0.0
    reg_lambda: float = 1.0
    hessian_min_per_device: tuple = (0.0,)
    loss_range_C: float = 1.0
    confidence_delta: float = 0.5
    n1: int = 1
    n2: int = 1
    n_adapted: int = 1  # U'
    shard_sizes: tuple = (1,)

    def __post_init__(self):
        object.__setattr__(self, "hessian_min_per_device", tuple(float(v) for v in self.hessian_min_per_device))
        object.__setattr__(self, "shard_sizes", tuple(int(v) for v in self.shard_sizes))
        if len(self.hessian_min_per_device) != len(self.shard_sizes):
            raise DomainError("one Hessian minimum per device is required")
        for name in ("lipschitz_eta", "grad_bound_H", "weight_bound_G", "reg_lambda", "loss_range_C"):
            if not getattr(self, name) > 0:
                raise DomainError(f"{name} must be positive")
        if self.pl_mu < 0 or self.optimality_gap_rho < 0:
            raise DomainError("PL constant and optimality gap must be nonnegative")
        if not 0 < self.confidence_delta < 1:
            raise DomainError("confidence delta must lie in (0, 1)")
        if any(s <= 0 for s in self.shard_sizes):
            raise DomainError("shard sizes must be positive")
        if self.reg_lambda < -0.5 * min(self.hessian_min_per_device):
            raise DomainError("regularization too weak for the Hessian floor")

    @property
    def n_devices(self) -> int:
        return len(self.shard_sizes)

    @property
    def dataset_size(self) -> int:
        return sum(self.shard_sizes)

    @property
    def shard_weights(self) -> np.ndarray:
        sizes = np.asarray(self.shard_sizes, dtype=float)
        return sizes / sizes.sum()

    @property
    def dropout_coefficient(self) -> float:
        """``U'(n1 + n2) H^2 G^4``, the slope shared by the gradient-error bounds."""
        return self.n_adapted * (self.n1 + self.n2) * self.grad_bound_H**2 * self.weight_bound_G**4

    def with_devices(self, shard_sizes: Sequence[int], hessian_min: Sequence[float] | float = 0.0) -> "BoundConstants":
        if np.isscalar(hessian_min):
            hessian_min = [float(hessian_min)] * len(shard_sizes)
        return replace(self, shard_sizes=tuple(shard_sizes), hessian_min_per_device=tuple(hessian_min))


def _gammas(c: BoundConstants, gammas) -> np.ndarray:
    g = np.atleast_1d(np.asarray(gammas, dtype=float))
    if g.size != c.n_devices:
        raise DomainError(f"{g.size} dropout rates for {c.n_devices} devices")
    if np.any(g < 0) or np.any(g >= 1):
        raise DomainError("dropout rates must lie in [0, 1)")
    return g


def _stability_denominators(c: BoundConstants, g: np.ndarray) -> np.ndarray:
    return np.asarray(c.hessian_min_per_device) + 2.0 * c.reg_lambda * drop_probability(g)


def phs_bound_device(c: BoundConstants, k: int, gamma: float) -> float:
    """Pointwise hypothesis stability bound on device ``k``.

    ``2 eta^2 / ((Lambda_k + 2 lambda (2 gamma - gamma^2)) |D_k|)``; returns
    ``inf`` when the denominator vanishes (no Hessian floor and no dropout),
    where the bound genuinely diverges.
    """
    if not 0 <= gamma < 1:
        raise DomainError("dropout rate must lie in [0, 1)")
    denom = (c.hessian_min_per_device[k] + 2.0 * c.reg_lambda * drop_probability(gamma)) * c.shard_sizes[k]
    if denom <= 0:
        return float("inf")
    return float(2.0 * c.lipschitz_eta**2 / denom)


def phs_bound_server(c: BoundConstants, gammas) -> float:
    g = _gammas(c, gammas)
    denom = _stability_denominators(c, g)
    if np.any(denom <= 0):
        return float("inf")
    return float(np.sum(2.0 * c.lipschitz_eta**2 / (denom * c.dataset_size)))


def generalization_gap(c: BoundConstants, gammas) -> float:
    """Width of the high-probability gap between generalization and empirical risk."""
    g = _gammas(c, gammas)
    denom = _stability_denominators(c, g)
    if np.any(denom <= 0):
        raise DomainError("stability denominator must be positive for every device")
    inner = c.loss_range_C**2 + np.sum(24.0 * c.loss_range_C * c.lipschitz_eta**2 / denom)
    return float(np.sqrt(inner / (2.0 * c.dataset_size * c.confidence_delta)))


def _weighted_rate(c: BoundConstants, g: np.ndarray, shard_sizes=None) -> float:
    if shard_sizes is None:
        w = c.shard_weights
    else:
        sizes = np.asarray(shard_sizes, dtype=float)
        w = sizes / sizes.sum()
    return float(np.dot(w, g))


def gradient_error_bound(c: BoundConstants, gammas, shard_sizes=None, per_layer: bool = False) -> float:
    """``2 (n1 + n2) U' H^2 G^4 sum_k w_k gamma_k``; ``per_layer`` drops the ``U'`` factor."""
    g = _gammas(c, gammas)
    coeff = c.dropout_coefficient / (c.n_adapted if per_layer else 1)
    return 2.0 * coeff * _weighted_rate(c, g, shard_sizes)


def loss_descent_bound(c: BoundConstants, gammas, shard_sizes=None) -> float:
    """Expected one-round loss change with step ``1/eta``: ``-mu rho / eta + dropout term / eta``."""
    g = _gammas(c, gammas)
    dropout_term = c.dropout_coefficient * _weighted_rate(c, g, shard_sizes)
    return -c.pl_mu * c.optimality_gap_rho / c.lipschitz_eta + dropout_term / c.lipschitz_eta


def convergence_bound(c: BoundConstants, gamma_schedule, T: int | None = None, loss_init_gap: float = 1.0) -> float:
    """Bound on the average squared gradient norm over ``T`` rounds.

    ``gamma_schedule`` is a ``(T, K)`` array of per-round rates.
    """
    sched = np.atleast_2d(np.asarray(gamma_schedule, dtype=float))
    if T is None:
        T = sched.shape[0]
    if T < 1:
        raise DomainError("need at least one round")
    if sched.shape[0] != T:
        raise DomainError(f"schedule has {sched.shape[0]} rounds, expected {T}")
    floor = sum(2.0 * c.dropout_coefficient * _weighted_rate(c, _gammas(c, row)) for row in sched)
    return 2.0 * c.lipschitz_eta / T * loss_init_gap + floor / T


def regularized_loss(base_loss: float, delta_theta, theta0=None, reg_lambda: float = 1.0, gamma: float = 0.0) -> float:
    """``base_loss + lambda (2 gamma - gamma^2) ||delta_theta||^2``.

    The penalty is the closed-form expectation of ``||d * delta_theta||^2``
    over ``d ~ Bern(2 gamma - gamma^2)``. ``theta0`` only checks shapes.
    """
    delta = np.asarray(delta_theta, dtype=float)
    if theta0 is not None and np.shape(theta0) != delta.shape:
        raise DomainError("delta and base parameters differ in shape")
    if not 0 <= gamma < 1:
        raise DomainError("dropout rate must lie in [0, 1)")
    return float(base_loss + reg_lambda * drop_probability(gamma) * np.sum(delta**2))


# ---------------------------------------------------------------------------
# constants from a training trace


@dataclass
class TraceEntry:
    weights: list  # arrays: adapter factors (or any parameter blocks)
    gradients: list  # matching gradient arrays


@dataclass
class TrainingTrace:
    entries: list = field(default_factory=list)

    def append(self, weights, gradients) -> None:
        self.entries.append(TraceEntry([np.array(w, dtype=float) for w in weights],
                                       [np.array(g, dtype=float) for g in gradients]))


def _flat(blocks) -> np.ndarray:
    return np.concatenate([np.ravel(b) for b in blocks]) if blocks else np.zeros(0)


def estimate_constants(trace: TrainingTrace, template: BoundConstants | None = None,
                       hessian_min: Sequence[float] | float | None = None) -> BoundConstants:
    """Fill ``H``, ``G`` and ``eta`` from observed gradients and weights.

    * ``H`` is the largest whole-model gradient F-norm.
    * ``G`` is the largest F-norm of any single weight block (``A`` or ``B``).
    * ``eta`` is the largest ``||g2 - g1|| / ||w2 - w1||`` over consecutive
      entries; pairs with identical weights are skipped, and the template value
      is kept when no pair qualifies.

    Everything else, including the Hessian floor, comes from ``template``
    (the Hessian floor is not measurable for non-convex toy nets).
    """
    if not trace.entries:
        raise DomainError("cannot estimate constants from an empty trace")
    c = template or BoundConstants()
    grad_H = max(np.linalg.norm(_flat(e.gradients)) for e in trace.entries)
    weight_G = max(max(np.linalg.norm(w) for w in e.weights) for e in trace.entries)
    eta = None
    for prev, cur in zip(trace.entries, trace.entries[1:]):
        dw = np.linalg.norm(_flat(cur.weights) - _flat(prev.weights))
        if dw == 0:
            continue
        ratio = np.linalg.norm(_flat(cur.gradients) - _flat(prev.gradients)) / dw
        eta = ratio if eta is None else max(eta, ratio)
    out = replace(
        c,
        grad_bound_H=float(grad_H) if grad_H > 0 else c.grad_bound_H,
        weight_bound_G=float(weight_G) if weight_G > 0 else c.weight_bound_G,
        lipschitz_eta=float(eta) if eta else c.lipschitz_eta,
    )
    if hessian_min is not None:
        out = out.with_devices(out.shard_sizes, hessian_min)
    return out


def bound_sweep(c: BoundConstants, grid: Sequence[float]) -> list[dict]:
    """Every bound at a common rate applied to all devices, one row per grid point."""
    rows = []
    for gamma in grid:
        g = np.full(c.n_devices, float(gamma))
        rows.append({
            "gamma": float(gamma),
            "drop_probability": float(drop_probability(gamma)),
            "phs_server": phs_bound_server(c, g),
            "generalization_gap": generalization_gap(c, g) if np.all(_stability_denominators(c, g) > 0) else float("inf"),
            "gradient_error": gradient_error_bound(c, g),
            "loss_descent": loss_descent_bound(c, g),
        })
    return rows
