"""Experiment configuration: one TOML (or JSON) document with nested tables.

Example::

    seeds = [0, 1, 2]

    [model]
    dims = [10, 32, 4]
    rank = 4

    [data]
    n_train = 80
    n_devices = 4

    [training]
    lr = 0.5
    rounds = 50

    [dropout]
    mode = "fixed"          # fixed | optimized | sweep
    gamma = 0.3             # scalar or one per device
    grid = [0.0, 0.3, 0.6]  # sweep mode

    [network]
    n_subcarriers = 6
    deadline_scale = 0.4

    [bounds]
    mode = "fixed"          # or "measure"
    reg_lambda = 1.0

    [optimizer]
    method = "bnb"
"""

from __future__ import annotations

import json
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    """The configuration document is malformed or inconsistent."""


@dataclass
class ModelSpec:
    dims: list = field(default_factory=lambda: [10, 32, 4])
    rank: int = 4
    adapted: list | None = None  # layer indices; all layers when absent
    activation: str = "tanh"
    loss: str = "softmax_cross_entropy"
    init_scale: float = 0.5


@dataclass
class DataSpec:
    n_train: int = 80
    n_test: int = 2000
    n_classes: int | None = None  # defaults to the output width
    n_devices: int = 4
    concentration: float = 1.0
    separation: float = 3.0
    noise: float = 1.0
    label_noise: float = 0.2


@dataclass
class TrainingSpec:
    lr: float = 0.5
    rounds: int = 200
    local_epochs: int = 1
    eval_every: int = 10  # the final round is always evaluated
    error_samples: int = 0  # Monte-Carlo mask draws for the gradient error, 0 = off
    loss_threshold: float | None = None  # report the first round reaching it


@dataclass
class NetworkSpec:
    n_subcarriers: int = 6
    seed: int = 0  # device profiles; channels are redrawn per round
    deadline_scale: float = 0.4
    round_deadline: float | None = None
    options: dict = field(default_factory=dict)  # extra generator keywords


@dataclass
class BoundsSpec:
    mode: str = "fixed"  # fixed | measure
    warmup_steps: int = 5  # centralized steps traced in measure mode
    lipschitz_eta: float = 1.0
    grad_bound_H: float = 1.0
    weight_bound_G: float = 1.0
    pl_mu: float = 0.0
    optimality_gap_rho: float = 0.0
    reg_lambda: float = 1.0
    hessian_min: float | list = 0.5
    loss_range_C: float = 1.0
    confidence_delta: float = 0.1


@dataclass
class OptimizerSpec:
    method: str = "bnb"  # bnb | psca | oracle | subcarrier_fixed | no_dropout
    tol: float = 1e-9
    node_budget: int = 100_000
    tau: float | None = None
    fallback: str = "none"  # none | previous
    compare: list = field(default_factory=lambda: ["bnb", "psca", "subcarrier_fixed", "no_dropout"])


@dataclass
class DropoutSpec:
    mode: str = "fixed"  # fixed | optimized | sweep
    gamma: float | list = 0.0
    grid: list = field(default_factory=lambda: [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6])
    mask_mode: str = "bernoulli"


_SECTIONS = {
    "model": ModelSpec,
    "data": DataSpec,
    "training": TrainingSpec,
    "network": NetworkSpec,
    "bounds": BoundsSpec,
    "optimizer": OptimizerSpec,
    "dropout": DropoutSpec,
}


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    seeds: list = field(default_factory=lambda: [0])
    workers: int = 1
    model: ModelSpec = field(default_factory=ModelSpec)
    data: DataSpec = field(default_factory=DataSpec)
    training: TrainingSpec = field(default_factory=TrainingSpec)
    network: NetworkSpec = field(default_factory=NetworkSpec)
    bounds: BoundsSpec = field(default_factory=BoundsSpec)
    optimizer: OptimizerSpec = field(default_factory=OptimizerSpec)
    dropout: DropoutSpec = field(default_factory=DropoutSpec)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if any(not isinstance(s, int) or s < 0 for s in self.seeds):
            raise ConfigError("seeds must be nonnegative integers")
        if self.dropout.mode not in ("fixed", "optimized", "sweep"):
            raise ConfigError(f"unknown dropout mode {self.dropout.mode!r}")
        rates = self.dropout.gamma if isinstance(self.dropout.gamma, list) else [self.dropout.gamma]
        if self.dropout.mode == "sweep":
            rates = list(self.dropout.grid)
            if not rates:
                raise ConfigError("sweep mode needs a non-empty grid")
        if any(not 0.0 <= float(g) < 1.0 for g in rates):
            raise ConfigError("dropout rates must lie in [0, 1)")
        if isinstance(self.dropout.gamma, list) and len(self.dropout.gamma) != self.data.n_devices:
            raise ConfigError(f"{len(self.dropout.gamma)} rates for {self.data.n_devices} devices")
        if self.training.rounds < 1:
            raise ConfigError("at least one round is required")
        if self.training.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if self.bounds.mode not in ("fixed", "measure"):
            raise ConfigError(f"unknown bounds mode {self.bounds.mode!r}")
        if self.optimizer.fallback not in ("none", "previous"):
            raise ConfigError(f"unknown fallback {self.optimizer.fallback!r}")
        if len(self.model.dims) < 2:
            raise ConfigError("model needs an input and an output width")

    @property
    def n_classes(self) -> int:
        return self.data.n_classes or self.model.dims[-1]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        doc = dict(doc)
        kwargs = {}
        for name, spec in _SECTIONS.items():
            section = doc.pop(name, {}) or {}
            known = {f.name for f in fields(spec)}
            unknown = set(section) - known
            if unknown:
                raise ConfigError(f"unknown keys in [{name}]: {sorted(unknown)}")
            kwargs[name] = spec(**section)
        known = {f.name for f in fields(cls)} - set(_SECTIONS)
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
        kwargs.update(doc)
        return cls(**kwargs)

    def replace(self, **sections) -> "ExperimentConfig":
        """Copy with some sections (or top-level keys) overridden by dicts of fields."""
        doc = self.to_dict()
        for key, value in sections.items():
            if isinstance(value, dict) and key in _SECTIONS:
                doc[key] = {**doc[key], **value}
            else:
                doc[key] = value
        return ExperimentConfig.from_dict(doc)


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    text = path.read_text()
    try:
        doc = json.loads(text) if path.suffix == ".json" else tomllib.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return ExperimentConfig.from_dict(doc)
