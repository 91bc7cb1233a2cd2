"""A small multi-layer network with LoRA-adapted linear layers, plus synthetic data.

Layers are bias-free linear maps; the activation is applied between layers but
not after the last one, whose outputs are logits (cross-entropy) or predictions
(squared error).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .lora_core import (
    AdapterGradient,
    DomainError,
    DropoutMask,
    LoraAdapter,
    ShapeError,
    apply_mask,
    init_adapter,
    lora_backward,
)

Layer = Union[LoraAdapter, np.ndarray]


class Activation(str, Enum):
    TANH = "tanh"
    RELU = "relu"
    IDENTITY = "identity"


class LossKind(str, Enum):
    SOFTMAX_CROSS_ENTROPY = "softmax_cross_entropy"
    MEAN_SQUARED_ERROR = "mean_squared_error"


def _act(kind: Activation, z: np.ndarray) -> np.ndarray:
    if kind is Activation.TANH:
        return np.tanh(z)
    if kind is Activation.RELU:
        return np.maximum(z, 0.0)
    return z


def _act_grad(kind: Activation, z: np.ndarray) -> np.ndarray:
    if kind is Activation.TANH:
        return 1.0 - np.tanh(z) ** 2
    if kind is Activation.RELU:
        return (z > 0).astype(float)
    return np.ones_like(z)


@dataclass(frozen=True)
class ToyNetwork:
    layers: tuple
    activation: Activation = Activation.TANH
    loss_kind: LossKind = LossKind.SOFTMAX_CROSS_ENTROPY

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "activation", Activation(self.activation))
        object.__setattr__(self, "loss_kind", LossKind(self.loss_kind))
        if not self.layers:
            raise ShapeError("network needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if _out_dim(prev) != _in_dim(nxt):
                raise ShapeError(f"layer dims do not chain: {_out_dim(prev)} -> {_in_dim(nxt)}")

    @property
    def adapted_indices(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if isinstance(layer, LoraAdapter)]

    @property
    def adapters(self) -> list[LoraAdapter]:
        return [self.layers[i] for i in self.adapted_indices]

    @property
    def input_dim(self) -> int:
        return _in_dim(self.layers[0])

    @property
    def output_dim(self) -> int:
        return _out_dim(self.layers[-1])

    @property
    def n_adapter_params(self) -> int:
        return sum(a.n_params for a in self.adapters)

    def with_adapters(self, adapters: Sequence[LoraAdapter]) -> "ToyNetwork":
        idx = self.adapted_indices
        if len(adapters) != len(idx):
            raise ShapeError(f"expected {len(idx)} adapters, got {len(adapters)}")
        layers = list(self.layers)
        for i, adapter in zip(idx, adapters):
            layers[i] = adapter
        return ToyNetwork(tuple(layers), self.activation, self.loss_kind)

    def masked(self, masks: Sequence[DropoutMask | None] | None) -> "ToyNetwork":
        if masks is None:
            return self
        return self.with_adapters(
            [a if m is None else apply_mask(a, m) for a, m in zip(self.adapters, _align(self, masks))]
        )


def _in_dim(layer: Layer) -> int:
    return layer.n2 if isinstance(layer, LoraAdapter) else layer.shape[1]


def _out_dim(layer: Layer) -> int:
    return layer.n1 if isinstance(layer, LoraAdapter) else layer.shape[0]


def _weight(layer: Layer) -> np.ndarray:
    if isinstance(layer, LoraAdapter):
        return layer.base_weight + layer.delta
    return layer


def _align(net: ToyNetwork, masks) -> list:
    masks = list(masks)
    if len(masks) != len(net.adapted_indices):
        raise ShapeError(f"{len(masks)} masks for {len(net.adapted_indices)} adapted layers")
    return masks


def build_network(
    dims: Sequence[int],
    rank: int,
    adapted: Sequence[int] | None = None,
    seed: int = 0,
    activation: Activation | str = Activation.TANH,
    loss_kind: LossKind | str = LossKind.SOFTMAX_CROSS_ENTROPY,
    init_scale: float = 0.5,
) -> ToyNetwork:
    """Random frozen base weights with adapters on the layers listed in ``adapted`` (default: all).

    ``dims`` lists layer widths from input to output, so ``len(dims) - 1`` layers are built.
    """
    rng = np.random.default_rng(seed)
    n_layers = len(dims) - 1
    if n_layers < 1:
        raise DomainError("need at least an input and an output width")
    adapted = set(range(n_layers) if adapted is None else adapted)
    layers: list[Layer] = []
    for u in range(n_layers):
        n2, n1 = dims[u], dims[u + 1]
        base = rng.normal(0.0, 1.0 / np.sqrt(n2), size=(n1, n2))
        layers.append(init_adapter(base, rank, rng, init_scale) if u in adapted else base)
    return ToyNetwork(tuple(layers), Activation(activation), LossKind(loss_kind))


# ---------------------------------------------------------------------------
# data


@dataclass(frozen=True)
class SyntheticDataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    generator_seed: int | None = None

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "SyntheticDataset":
        idx = np.asarray(idx, dtype=int)
        return SyntheticDataset(self.features[idx], self.labels[idx], self.n_classes, self.generator_seed)

    @property
    def samples(self) -> list[tuple[np.ndarray, int]]:
        return list(zip(self.features, self.labels.tolist()))

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"x{j}" for j in range(self.features.shape[1])] + ["label"])
            for row, label in zip(self.features, self.labels):
                writer.writerow([repr(float(v)) for v in row] + [int(label)])

    @classmethod
    def from_csv(cls, path: str | Path, n_classes: int | None = None) -> "SyntheticDataset":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        body = rows[1:]
        features = np.array([[float(v) for v in r[:-1]] for r in body])
        labels = np.array([int(r[-1]) for r in body])
        if n_classes is None:
            n_classes = int(labels.max()) + 1
        return cls(features, labels, n_classes)


def generate_synthetic(
    n_samples: int,
    dim: int,
    n_classes: int,
    seed: int,
    separation: float = 3.0,
    noise: float = 1.0,
    label_noise: float = 0.0,
    means: np.ndarray | None = None,
) -> SyntheticDataset:
    """Balanced Gaussian class clusters.

    Class ``c`` is centred at ``means[c]`` (drawn as ``separation`` times a
    random unit vector when not given). ``label_noise`` flips that fraction of
    labels uniformly at random, which gives small shards something to overfit.
    """
    if n_classes < 2 or n_samples < n_classes or dim < 1:
        raise DomainError("need n_samples >= n_classes >= 2 and dim >= 1")
    rng = np.random.default_rng(seed)
    if means is None:
        directions = rng.normal(size=(n_classes, dim))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        means = separation * directions
    labels = np.arange(n_samples) % n_classes
    rng.shuffle(labels)
    features = means[labels] + noise * rng.normal(size=(n_samples, dim))
    if label_noise > 0:
        flip = rng.random(n_samples) < label_noise
        labels = labels.copy()
        labels[flip] = rng.integers(0, n_classes, size=int(flip.sum()))
    return SyntheticDataset(features, labels, n_classes, seed)


@dataclass(frozen=True)
class Partition:
    shards: tuple

    def __post_init__(self):
        object.__setattr__(self, "shards", tuple(np.asarray(s, dtype=int) for s in self.shards))

    @property
    def sizes(self) -> np.ndarray:
        return np.array([len(s) for s in self.shards])

    @property
    def weights(self) -> np.ndarray:
        sizes = self.sizes
        return sizes / sizes.sum()

    def __len__(self) -> int:
        return len(self.shards)


def partition_non_iid(dataset: SyntheticDataset, n_devices: int, concentration: float, seed: int) -> Partition:
    """Split indices by per-class Dirichlet(concentration) proportions over devices.

    Small ``concentration`` skews each device towards few labels; very large
    values recover an IID split. Empty shards are topped up with one sample
    taken from the largest shard so every device holds data.
    """
    n = len(dataset)
    if n_devices < 1 or n == 0:
        raise DomainError("need at least one device and one sample")
    if n_devices > n:
        raise DomainError(f"{n_devices} devices cannot share {n} samples")
    if not concentration > 0:
        raise DomainError("Dirichlet concentration must be positive")
    rng = np.random.default_rng(seed)
    buckets: list[list[int]] = [[] for _ in range(n_devices)]
    for c in range(dataset.n_classes):
        idx = np.flatnonzero(dataset.labels == c)
        rng.shuffle(idx)
        props = rng.dirichlet(np.full(n_devices, concentration))
        cuts = (np.cumsum(props)[:-1] * len(idx)).astype(int)
        for k, part in enumerate(np.split(idx, cuts)):
            buckets[k].extend(part.tolist())
    for k in range(n_devices):
        if not buckets[k]:
            donor = max(range(n_devices), key=lambda j: len(buckets[j]))
            buckets[k].append(buckets[donor].pop())
    return Partition(tuple(np.sort(np.array(b, dtype=int)) for b in buckets))


def label_entropy(labels: np.ndarray, n_classes: int) -> float:
    counts = np.bincount(labels, minlength=n_classes).astype(float)
    p = counts / counts.sum()
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


# ---------------------------------------------------------------------------
# forward / backward


@dataclass
class ForwardCache:
    inputs: list  # input to each layer, shape (n, n_in)
    pre: list  # pre-activation output of each layer, shape (n, n_out)
    output: np.ndarray


def _targets(net: ToyNetwork, labels: np.ndarray, out_dim: int) -> np.ndarray:
    labels = np.asarray(labels)
    if net.loss_kind is LossKind.MEAN_SQUARED_ERROR and labels.ndim == 2:
        return labels.astype(float)
    onehot = np.zeros((len(labels), out_dim))
    onehot[np.arange(len(labels)), labels.astype(int)] = 1.0
    return onehot


def _check_batch(net: ToyNetwork, batch) -> tuple[np.ndarray, np.ndarray]:
    x, y = batch
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if len(x) == 0:
        raise DomainError("empty batch")
    if x.shape[1] != net.input_dim:
        raise ShapeError(f"features have dim {x.shape[1]}, network expects {net.input_dim}")
    return x, np.asarray(y)


def forward_loss(net: ToyNetwork, batch, masks=None) -> tuple[float, ForwardCache]:
    """Mean loss over the batch and the activations needed by :func:`backward_all`."""
    x, y = _check_batch(net, batch)
    run = net.masked(masks)
    inputs, pre = [], []
    h = x
    last = len(run.layers) - 1
    for u, layer in enumerate(run.layers):
        inputs.append(h)
        z = h @ _weight(layer).T
        pre.append(z)
        h = z if u == last else _act(run.activation, z)
    out = h
    t = _targets(net, y, out.shape[1])
    if net.loss_kind is LossKind.SOFTMAX_CROSS_ENTROPY:
        shifted = out - out.max(axis=1, keepdims=True)
        log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        loss = float(-(t * log_probs).sum(axis=1).mean())
    else:
        loss = float(((out - t) ** 2).mean(axis=1).mean())
    return loss, ForwardCache(inputs, pre, out)


def _output_grad(net: ToyNetwork, out: np.ndarray, y: np.ndarray) -> np.ndarray:
    """dL/d(output) for the *summed* per-sample losses."""
    t = _targets(net, y, out.shape[1])
    if net.loss_kind is LossKind.SOFTMAX_CROSS_ENTROPY:
        shifted = out - out.max(axis=1, keepdims=True)
        p = np.exp(shifted)
        p /= p.sum(axis=1, keepdims=True)
        return p - t
    return 2.0 * (out - t) / out.shape[1]


def backward_all(net: ToyNetwork, batch, masks=None) -> list[AdapterGradient]:
    """Sample-mean gradients for every adapted layer, taken through the masked forward pass."""
    x, y = _check_batch(net, batch)
    mask_list = [None] * len(net.adapted_indices) if masks is None else _align(net, masks)
    mask_of = dict(zip(net.adapted_indices, mask_list))
    _, cache = forward_loss(net, (x, y), masks)
    run = net.masked(masks)
    n = len(x)
    delta = _output_grad(net, cache.output, y)
    grads: dict[int, AdapterGradient] = {}
    last = len(run.layers) - 1
    for u in range(last, -1, -1):
        if u != last:
            delta = delta * _act_grad(run.activation, cache.pre[u])
        layer = net.layers[u]
        if isinstance(layer, LoraAdapter):
            g = lora_backward(layer, cache.inputs[u], delta, mask_of[u])
            grads[u] = g.scale(1.0 / n)
        if u > 0:
            delta = delta @ _weight(run.layers[u])
    return [grads[u] for u in net.adapted_indices]


def accuracy(net: ToyNetwork, dataset: SyntheticDataset) -> float:
    _, cache = forward_loss(net, (dataset.features, dataset.labels))
    return float((cache.output.argmax(axis=1) == dataset.labels).mean())
