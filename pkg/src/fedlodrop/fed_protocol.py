"""The federated round engine.

One round: the server draws per-device dropout masks and dispatches the
sub-adapters, each device computes the sample-mean gradient of its masked
adapters on its shard, uploads only the surviving rows/columns, and the server
zero-pads the uploads back to full size and takes a shard-size-weighted step.

Devices return gradients and the server applies the learning rate, so the
global step is ``B_t = B_{t-1} - lr * sum_k w_k dB_k`` verbatim. With more
than one local epoch a device instead returns its weight change divided by
``lr`` (a pseudo-gradient); ``RoundReport.aggregation`` records which path ran.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .lora_core import (
    AdapterGradient,
    DomainError,
    DropoutMask,
    LoraAdapter,
    MaskMode,
    apply_mask,
    derive_seed,
    sample_mask,
    sgd_update,
    sub_adapter_size,
)
from .toy_model import Partition, SyntheticDataset, ToyNetwork, accuracy, backward_all, forward_loss


class ProtocolError(RuntimeError):
    """Raised when a round's reports are incomplete or inconsistent."""


@dataclass(frozen=True)
class ServerState:
    adapters: tuple
    round: int = 0
    global_seed: int = 0
    mask_mode: MaskMode = MaskMode.BERNOULLI

    def __post_init__(self):
        object.__setattr__(self, "adapters", tuple(self.adapters))
        object.__setattr__(self, "mask_mode", MaskMode(self.mask_mode))

    @classmethod
    def from_network(cls, net: ToyNetwork, global_seed: int = 0, mask_mode=MaskMode.BERNOULLI) -> "ServerState":
        return cls(tuple(net.adapters), 0, global_seed, mask_mode)

    def model(self, net: ToyNetwork) -> ToyNetwork:
        return net.with_adapters(self.adapters)


@dataclass(frozen=True)
class Dispatch:
    """What the server sends device ``device`` at the start of a round."""

    device: int
    rate: float
    adapters: tuple  # masked sub-adapters, one per adapted layer
    masks: tuple

    @property
    def payload(self) -> int:
        """Parameters carried by the sub-adapters (the same count goes up and down)."""
        return sum(_payload_size(m, a.rank) for m, a in zip(self.masks, self.adapters))


@dataclass(frozen=True)
class ClientReport:
    device: int
    grads: tuple  # AdapterGradient per adapted layer, zeros at dropped positions
    shard_size: int
    loss_before: float
    loss_after: float


@dataclass
class RoundReport:
    round: int
    rates: list
    transmitted: list  # uploaded parameter count per device
    train_loss: float
    eval_loss: float | None = None
    eval_accuracy: float | None = None
    gradient_error: float | None = None
    aggregation: str = "gradient"
    client_loss_before: list = field(default_factory=list)
    client_loss_after: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def _payload_size(mask: DropoutMask, rank: int) -> int:
    if mask.mode is MaskMode.BERNOULLI:
        return sub_adapter_size(mask, rank)
    return rank * (mask.mask_a.size + mask.mask_b.size)


def _check_rates(rates: Sequence[float]) -> np.ndarray:
    rates = np.asarray(rates, dtype=float)
    if np.any(rates < 0) or np.any(rates >= 1):
        raise DomainError(f"dropout rates must lie in [0, 1), got {rates.tolist()}")
    return rates


def device_masks(server: ServerState, device: int, rate: float) -> tuple:
    """Masks for ``device`` in the current round, regenerable from the server seed alone."""
    return tuple(
        sample_mask(rate, (a.n1, a.n2), server.mask_mode, derive_seed(server.global_seed, server.round, device, u))
        for u, a in enumerate(server.adapters)
    )


def generate_sub_adapters(server: ServerState, rates: Sequence[float]) -> list[Dispatch]:
    rates = _check_rates(rates)
    out = []
    for k, rate in enumerate(rates):
        masks = device_masks(server, k, float(rate))
        subs = tuple(apply_mask(a, m) for a, m in zip(server.adapters, masks))
        out.append(Dispatch(k, float(rate), subs, masks))
    return out


def client_local_tuning(
    net: ToyNetwork,
    shard: SyntheticDataset,
    dispatch: Dispatch,
    lr: float,
    epochs: int = 1,
) -> ClientReport:
    """Local work on one device.

    With ``epochs == 1`` the report holds the exact sample-mean gradient of the
    loss at the received sub-adapters. With more epochs the device runs
    full-batch steps and reports ``(start - end) / lr``.
    """
    if len(shard) == 0:
        raise DomainError(f"device {dispatch.device} has an empty shard")
    batch = (shard.features, shard.labels)
    local = net.with_adapters(dispatch.adapters)
    loss_before, _ = forward_loss(local, batch, dispatch.masks)
    if epochs == 1:
        grads = backward_all(local, batch, dispatch.masks)
        stepped = [sgd_update(a, g, lr) for a, g in zip(local.adapters, grads)] if lr > 0 else local.adapters
    else:
        stepped = list(local.adapters)
        for _ in range(epochs):
            g_epoch = backward_all(net.with_adapters(stepped), batch, dispatch.masks)
            stepped = [sgd_update(a, g, lr) for a, g in zip(stepped, g_epoch)]
        grads = [
            AdapterGradient((a0.a_mat - a1.a_mat) / lr, (a0.b_mat - a1.b_mat) / lr)
            for a0, a1 in zip(local.adapters, stepped)
        ]
    loss_after, _ = forward_loss(net.with_adapters(stepped), batch, dispatch.masks)
    return ClientReport(dispatch.device, tuple(grads), len(shard), loss_before, loss_after)


def compact_payload(grad: AdapterGradient, mask: DropoutMask) -> tuple[np.ndarray, np.ndarray]:
    """The rows of ``grad_b`` and columns of ``grad_a`` a device actually uploads."""
    if mask.mode is not MaskMode.BERNOULLI:
        return grad.grad_b.copy(), grad.grad_a.copy()
    return grad.grad_b[mask.kept_b], grad.grad_a[:, mask.kept_a]


def zero_pad(payload: tuple[np.ndarray, np.ndarray], mask: DropoutMask, n1: int, n2: int) -> AdapterGradient:
    """Reinsert zeros at the dropped rows/columns of an uploaded payload."""
    pb, pa = payload
    if mask.mode is not MaskMode.BERNOULLI:
        return AdapterGradient(pa.copy(), pb.copy())
    rank = pb.shape[1] if pb.ndim == 2 and pb.size else pa.shape[0]
    grad_b = np.zeros((n1, rank))
    grad_a = np.zeros((rank, n2))
    grad_b[mask.kept_b] = pb
    grad_a[:, mask.kept_a] = pa
    return AdapterGradient(grad_a, grad_b)


def zero_pad_and_aggregate(
    server: ServerState,
    reports: Sequence[ClientReport],
    lr: float,
    dispatches: Sequence[Dispatch] | None = None,
) -> ServerState:
    """Weighted global step from a complete set of device reports.

    When ``dispatches`` is given each report goes through the compact
    upload/zero-pad path with the masks the server issued; otherwise the dense
    gradients are used as they are. Sums run in device-id order so the result
    does not depend on report arrival order.
    """
    n_devices = len(dispatches) if dispatches is not None else len(reports)
    by_device = {r.device: r for r in reports}
    missing = sorted(set(range(n_devices)) - set(by_device))
    if missing or len(by_device) != len(reports):
        raise ProtocolError(f"incomplete or duplicated reports; missing devices {missing}")
    sizes = np.array([by_device[k].shard_size for k in range(n_devices)], dtype=float)
    if np.any(sizes <= 0):
        raise ProtocolError("shard sizes must be positive")
    weights = sizes / sizes.sum()
    new_adapters = []
    for u, adapter in enumerate(server.adapters):
        total = AdapterGradient.zeros_like(adapter)
        for k in range(n_devices):
            g = by_device[k].grads[u]
            if dispatches is not None:
                mask = dispatches[k].masks[u]
                g = zero_pad(compact_payload(g, mask), mask, adapter.n1, adapter.n2)
            total = total + g.scale(weights[k])
        new_adapters.append(sgd_update(adapter, total, lr))
    return replace(server, adapters=tuple(new_adapters), round=server.round + 1)


def run_round(
    server: ServerState,
    partition: Partition,
    net: ToyNetwork,
    dataset: SyntheticDataset,
    rates: Sequence[float],
    lr: float,
    epochs: int = 1,
    test_set: SyntheticDataset | None = None,
    error_samples: int = 0,
) -> tuple[ServerState, RoundReport]:
    rates = _check_rates(rates)
    if len(rates) != len(partition):
        raise DomainError(f"{len(rates)} rates for {len(partition)} devices")
    grad_error = None
    if error_samples:
        grad_error = measure_gradient_error(server, partition, net, dataset, rates, error_samples)
    dispatches = generate_sub_adapters(server, rates)
    reports = [
        client_local_tuning(net, dataset.subset(partition.shards[d.device]), d, lr, epochs) for d in dispatches
    ]
    new_server = zero_pad_and_aggregate(server, reports, lr, dispatches)
    model = new_server.model(net)
    train_loss, _ = forward_loss(model, (dataset.features, dataset.labels))
    eval_loss = eval_acc = None
    if test_set is not None:
        eval_loss, _ = forward_loss(model, (test_set.features, test_set.labels))
        eval_acc = accuracy(model, test_set)
    report = RoundReport(
        round=new_server.round,
        rates=rates.tolist(),
        transmitted=[d.payload for d in dispatches],
        train_loss=train_loss,
        eval_loss=eval_loss,
        eval_accuracy=eval_acc,
        gradient_error=grad_error,
        aggregation="gradient" if epochs == 1 else "weight_delta",
        client_loss_before=[r.loss_before for r in reports],
        client_loss_after=[r.loss_after for r in reports],
    )
    return new_server, report


@dataclass
class GradientErrorEstimate:
    mean_sq_error: float  # Monte-Carlo E ||J||_F^2 summed over adapted layers
    grad_bound: float  # largest gradient-matrix F-norm seen (per matrix)
    weight_bound: float  # largest adapter-factor F-norm
    n_samples: int


def estimate_gradient_error(
    server: ServerState,
    partition: Partition,
    net: ToyNetwork,
    dataset: SyntheticDataset,
    rates: Sequence[float],
    n_mask_samples: int,
    seed: int = 12345,
) -> GradientErrorEstimate:
    """Monte-Carlo estimate of the aggregated dropout error ``J = G - G_hat``.

    Per adapted layer ``G = B dA + dB A`` uses unmasked device gradients and
    ``G_hat = B dA_hat + dB_hat A`` the masked ones, both weighted by shard size.
    """
    if n_mask_samples < 1:
        raise DomainError("need at least one mask sample")
    rates = _check_rates(rates)
    weights = partition.weights
    model = server.model(net)
    shards = [(dataset.features[s], dataset.labels[s]) for s in partition.shards]
    full = [backward_all(model, shard) for shard in shards]
    grad_bound = max(max(np.linalg.norm(g.grad_a), np.linalg.norm(g.grad_b)) for gs in full for g in gs)
    weight_bound = max(max(np.linalg.norm(a.a_mat), np.linalg.norm(a.b_mat)) for a in server.adapters)
    if np.all(rates == 0):
        return GradientErrorEstimate(0.0, float(grad_bound), float(weight_bound), n_mask_samples)
    ideal = [sum((full[k][u].scale(weights[k]) for k in range(len(shards))), AdapterGradient.zeros_like(a))
             for u, a in enumerate(server.adapters)]
    total = 0.0
    for draw in range(n_mask_samples):
        masked_sum = [AdapterGradient.zeros_like(a) for a in server.adapters]
        for k, shard in enumerate(shards):
            masks = tuple(
                sample_mask(rates[k], (a.n1, a.n2), server.mask_mode, derive_seed(seed, draw, k, u))
                for u, a in enumerate(server.adapters)
            )
            sub = model.with_adapters([apply_mask(a, m) for a, m in zip(server.adapters, masks)])
            gk = backward_all(sub, shard, masks)
            for u in range(len(masked_sum)):
                masked_sum[u] = masked_sum[u] + gk[u].scale(weights[k])
            grad_bound = max(grad_bound, *(max(np.linalg.norm(g.grad_a), np.linalg.norm(g.grad_b)) for g in gk))
        for u, a in enumerate(server.adapters):
            j = a.b_mat @ (ideal[u].grad_a - masked_sum[u].grad_a) + (ideal[u].grad_b - masked_sum[u].grad_b) @ a.a_mat
            total += float(np.sum(j**2))
    return GradientErrorEstimate(total / n_mask_samples, float(grad_bound), float(weight_bound), n_mask_samples)


def measure_gradient_error(
    server: ServerState,
    partition: Partition,
    net: ToyNetwork,
    dataset: SyntheticDataset,
    rates: Sequence[float],
    n_mask_samples: int,
    seed: int = 12345,
) -> float:
    return estimate_gradient_error(server, partition, net, dataset, rates, n_mask_samples, seed).mean_sq_error


def centralized_trajectory(net: ToyNetwork, dataset: SyntheticDataset, lr: float, rounds: int) -> list[float]:
    """Plain full-batch LoRA gradient descent; the loss after each step."""
    losses = []
    batch = (dataset.features, dataset.labels)
    model = net
    for _ in range(rounds):
        grads = backward_all(model, batch)
        model = model.with_adapters([sgd_update(a, g, lr) for a, g in zip(model.adapters, grads)])
        losses.append(forward_loss(model, batch)[0])
    return losses
