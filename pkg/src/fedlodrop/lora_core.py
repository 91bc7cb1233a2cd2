"""Dense linear algebra for LoRA-adapted linear layers.

A layer computes ``h = (W0 + B @ A) @ f`` where ``W0`` (n1 x n2) is frozen and
only the low-rank pair ``B`` (n1 x r), ``A`` (r x n2) is trained. Dropout acts on
the columns of ``A`` and the rows of ``B``.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np


class ShapeError(ValueError):
    """Raised when array dimensions do not chain."""


class DomainError(ValueError):
    """Raised when a scalar argument falls outside its documented domain."""


class MaskMode(str, Enum):
    BERNOULLI = "bernoulli"
    GAUSSIAN = "gaussian"


@dataclass(frozen=True)
class LoraAdapter:
    base_weight: np.ndarray
    b_mat: np.ndarray
    a_mat: np.ndarray

    def __post_init__(self):
        n1, n2 = self.base_weight.shape
        if self.b_mat.ndim != 2 or self.a_mat.ndim != 2:
            raise ShapeError("adapter factors must be matrices")
        if self.b_mat.shape[0] != n1 or self.a_mat.shape[1] != n2:
            raise ShapeError(
                f"factors {self.b_mat.shape} @ {self.a_mat.shape} do not match base {self.base_weight.shape}"
            )
        if self.b_mat.shape[1] != self.a_mat.shape[0]:
            raise ShapeError("inner rank of B and A differ")
        if self.rank > min(n1, n2):
            raise ShapeError(f"rank {self.rank} exceeds min(n1, n2) = {min(n1, n2)}")

    @property
    def rank(self) -> int:
        return self.a_mat.shape[0]

    @property
    def n1(self) -> int:
        return self.base_weight.shape[0]

    @property
    def n2(self) -> int:
        return self.base_weight.shape[1]

    @property
    def delta(self) -> np.ndarray:
        return self.b_mat @ self.a_mat

    @property
    def n_params(self) -> int:
        """Trainable parameter count ``(n1 + n2) r``."""
        return (self.n1 + self.n2) * self.rank

    def with_factors(self, b_mat: np.ndarray, a_mat: np.ndarray) -> "LoraAdapter":
        return LoraAdapter(self.base_weight, b_mat, a_mat)


@dataclass(frozen=True)
class DropoutMask:
    mask_a: np.ndarray  # length n2, scales the columns of A
    mask_b: np.ndarray  # length n1, scales the rows of B
    rate: float
    mode: MaskMode = MaskMode.BERNOULLI

    @classmethod
    def ones(cls, n1: int, n2: int) -> "DropoutMask":
        return cls(np.ones(n2), np.ones(n1), 0.0, MaskMode.BERNOULLI)

    @property
    def kept_a(self) -> np.ndarray:
        return np.flatnonzero(self.mask_a)

    @property
    def kept_b(self) -> np.ndarray:
        return np.flatnonzero(self.mask_b)


@dataclass(frozen=True)
class AdapterGradient:
    grad_a: np.ndarray
    grad_b: np.ndarray

    @classmethod
    def zeros_like(cls, adapter: LoraAdapter) -> "AdapterGradient":
        return cls(np.zeros_like(adapter.a_mat), np.zeros_like(adapter.b_mat))

    def __add__(self, other: "AdapterGradient") -> "AdapterGradient":
        return AdapterGradient(self.grad_a + other.grad_a, self.grad_b + other.grad_b)

    def scale(self, factor: float) -> "AdapterGradient":
        return AdapterGradient(factor * self.grad_a, factor * self.grad_b)

    def sq_norm(self) -> float:
        return float(np.sum(self.grad_a**2) + np.sum(self.grad_b**2))


def init_adapter(base_weight: np.ndarray, rank: int, rng: np.random.Generator, scale: float = 0.5) -> LoraAdapter:
    """Standard LoRA start: ``B = 0`` and ``A ~ U(-scale, scale)`` so the initial delta is zero."""
    n1, n2 = base_weight.shape
    a_mat = rng.uniform(-scale, scale, size=(rank, n2))
    return LoraAdapter(np.array(base_weight, dtype=float), np.zeros((n1, rank)), a_mat)


def _check_input(adapter: LoraAdapter, x: np.ndarray) -> None:
    if x.shape[-1] != adapter.n2:
        raise ShapeError(f"input has trailing dim {x.shape[-1]}, layer expects {adapter.n2}")


def _check_mask(adapter: LoraAdapter, mask: DropoutMask) -> None:
    if mask.mask_a.shape != (adapter.n2,) or mask.mask_b.shape != (adapter.n1,):
        raise ShapeError(
            f"mask dims ({mask.mask_b.size}, {mask.mask_a.size}) != adapter dims ({adapter.n1}, {adapter.n2})"
        )


def apply_mask(adapter: LoraAdapter, mask: DropoutMask) -> LoraAdapter:
    """Return the sub-adapter ``(B_hat, A_hat)`` with ``A_hat = A diag(m_A)``, ``B_hat = diag(m_B) B``."""
    _check_mask(adapter, mask)
    return adapter.with_factors(mask.mask_b[:, None] * adapter.b_mat, adapter.a_mat * mask.mask_a[None, :])


def lora_forward(adapter: LoraAdapter, x: np.ndarray) -> np.ndarray:
    """Layer output for a vector of length n2, or a batch of shape (n, n2)."""
    x = np.asarray(x, dtype=float)
    _check_input(adapter, x)
    # x @ W.T handles both the vector and the batched case
    return x @ adapter.base_weight.T + (x @ adapter.a_mat.T) @ adapter.b_mat.T


def masked_forward(adapter: LoraAdapter, mask: DropoutMask, x: np.ndarray) -> np.ndarray:
    return lora_forward(apply_mask(adapter, mask), x)


def lora_backward(
    adapter: LoraAdapter,
    x: np.ndarray,
    upstream_grad: np.ndarray,
    mask: DropoutMask | None = None,
) -> AdapterGradient:
    """Gradients of a scalar loss w.r.t. ``B`` and ``A`` given ``dL/dh``.

    For a single sample ``grad_b = g (A f)^T`` and ``grad_a = B^T g f^T``.
    With a batch (rows of ``x`` and ``upstream_grad``) the per-sample
    gradients are summed; callers divide by the batch size.

    Under a mask the gradient is taken through the masked forward pass, so the
    rows of ``grad_b`` and columns of ``grad_a`` that were dropped come out
    exactly zero (multiplied by a zero mask entry).
    """
    x = np.asarray(x, dtype=float)
    g = np.asarray(upstream_grad, dtype=float)
    _check_input(adapter, x)
    if g.shape[-1] != adapter.n1 or g.shape[:-1] != x.shape[:-1]:
        raise ShapeError(f"upstream grad shape {g.shape} incompatible with input {x.shape}")
    x2 = np.atleast_2d(x)
    g2 = np.atleast_2d(g)
    if mask is None:
        b_used, a_used = adapter.b_mat, adapter.a_mat
    else:
        _check_mask(adapter, mask)
        sub = apply_mask(adapter, mask)
        b_used, a_used = sub.b_mat, sub.a_mat
    grad_b = g2.T @ (x2 @ a_used.T)
    grad_a = (g2 @ b_used).T @ x2
    if mask is not None:
        # chain rule through B_hat = diag(m_B) B and A_hat = A diag(m_A)
        grad_b = mask.mask_b[:, None] * grad_b
        grad_a = grad_a * mask.mask_a[None, :]
    return AdapterGradient(grad_a, grad_b)


def sgd_update(adapter: LoraAdapter, grad: AdapterGradient, lr: float) -> LoraAdapter:
    """One gradient step on ``B`` and ``A`` with a shared learning rate; ``W0`` is untouched."""
    if not lr > 0:
        raise DomainError(f"learning rate must be positive, got {lr}")
    if grad.grad_a.shape != adapter.a_mat.shape or grad.grad_b.shape != adapter.b_mat.shape:
        raise ShapeError("gradient shapes do not match adapter")
    return adapter.with_factors(adapter.b_mat - lr * grad.grad_b, adapter.a_mat - lr * grad.grad_a)


def gaussian_sigma(rate: float) -> float:
    """Variance-matched std for multiplicative Gaussian noise, ``sigma^2 = rate / (1 - rate)``."""
    return float(np.sqrt(rate / (1.0 - rate)))


def sample_mask(
    rate: float,
    dims: tuple[int, int],
    mode: MaskMode | str = MaskMode.BERNOULLI,
    seed=None,
) -> DropoutMask:
    """Draw the output-side (length n1) and input-side (length n2) masks.

    ``seed`` is anything ``np.random.default_rng`` accepts, including a
    ``SeedSequence``; the result is a pure function of its arguments.
    """
    if not 0.0 <= rate < 1.0:
        raise DomainError(f"dropout rate must lie in [0, 1), got {rate}")
    mode = MaskMode(mode)
    n1, n2 = dims
    rng = np.random.default_rng(seed)
    if mode is MaskMode.BERNOULLI:
        keep = 1.0 - rate
        mask_b = (rng.random(n1) < keep).astype(float)
        mask_a = (rng.random(n2) < keep).astype(float)
    else:
        sigma = gaussian_sigma(rate)
        mask_b = rng.normal(1.0, sigma, size=n1)
        mask_a = rng.normal(1.0, sigma, size=n2)
    return DropoutMask(mask_a, mask_b, float(rate), mode)


def sub_adapter_size(mask: DropoutMask, rank: int) -> int:
    """Number of parameters in the sub-adapter: ``r * (kept cols of A + kept rows of B)``."""
    if mask.mode is not MaskMode.BERNOULLI:
        raise DomainError("gaussian masks carry no sparsity; the payload is the full adapter")
    return int(rank * (np.count_nonzero(mask.mask_a) + np.count_nonzero(mask.mask_b)))


def derive_seed(global_seed: int, *keys: int) -> np.random.SeedSequence:
    """Deterministic per-(round, device, layer) stream the server can regenerate."""
    return np.random.SeedSequence([int(global_seed), *[int(k) for k in keys]])
