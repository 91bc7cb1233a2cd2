"""Single-cell OFDM edge system: per-subcarrier rates, step latencies, step energies
and the per-round feasibility constraints.

Constraint labels used in reports:

* ``C1`` latency: downlink + compute + uplink <= deadline
* ``C2`` energy: uplink + compute + circuit <= budget
* ``C3`` each subcarrier assigned to exactly one device, binary
* ``C4`` parameters carried >= ``(1 - gamma) M``
* ``C5`` ``0 <= gamma < 1``
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .lora_core import DomainError

INFEASIBLE = float("inf")


@dataclass(frozen=True)
class DeviceProfile:
    cpu_freq: float  # cycles/s
    cycles_per_sample: float
    compute_coeff: float  # J s^2 / cycle^3
    circuit_energy: float  # J
    energy_budget: float  # J
    shard_size: int

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not value > 0:
                raise DomainError(f"device {name} must be positive, got {value}")

    @property
    def compute_latency(self) -> float:
        return self.cycles_per_sample * self.shard_size / self.cpu_freq

    @property
    def compute_energy(self) -> float:
        return self.compute_coeff * self.compute_latency * self.cpu_freq**3


@dataclass(frozen=True)
class NetworkInstance:
    """One round's system snapshot.

    ``uplink_rate`` holds the per-(device, subcarrier) uplink rates the round
    runs at; the transmit power that sustains each rate follows from
    :func:`uplink_power_for_rate`. ``full_payload`` is ``M = U'(n1 + n2) r``.
    """

    subcarrier_bandwidth: float
    noise_power: float
    bits_per_param: float
    channel_gain_dl: np.ndarray  # (K, S) |h|^2
    channel_gain_ul: np.ndarray
    tx_power_dl: np.ndarray  # (K, S) W
    uplink_rate: np.ndarray  # (K, S) bits/s
    round_deadline: float
    devices: tuple
    full_payload: float

    def __post_init__(self):
        for name in ("channel_gain_dl", "channel_gain_ul", "tx_power_dl", "uplink_rate"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        object.__setattr__(self, "devices", tuple(self.devices))
        shape = (self.n_devices, self.n_subcarriers)
        if self.n_devices < 1 or self.n_subcarriers < 1:
            raise DomainError("need at least one device and one subcarrier")
        for name in ("channel_gain_dl", "channel_gain_ul", "tx_power_dl", "uplink_rate"):
            arr = getattr(self, name)
            if arr.shape != shape:
                raise DomainError(f"{name} has shape {arr.shape}, expected {shape}")
        if np.any(self.channel_gain_dl <= 0) or np.any(self.channel_gain_ul <= 0):
            raise DomainError("channel gains must be positive")
        if np.any(self.tx_power_dl < 0) or np.any(self.uplink_rate < 0):
            raise DomainError("powers and rates must be nonnegative")
        if not self.round_deadline >= 0:
            raise DomainError("round deadline must be nonnegative")

    @property
    def n_devices(self) -> int:
        return len(self.devices)

    @property
    def n_subcarriers(self) -> int:
        return self.channel_gain_dl.shape[1]

    @property
    def shard_sizes(self) -> np.ndarray:
        return np.array([d.shard_size for d in self.devices])

    @property
    def downlink_rates(self) -> np.ndarray:
        return self.subcarrier_bandwidth * np.log2(1.0 + self.channel_gain_dl * self.tx_power_dl / self.noise_power)

    @property
    def uplink_power(self) -> np.ndarray:
        return (2.0 ** (self.uplink_rate / self.subcarrier_bandwidth) - 1.0) * self.noise_power / self.channel_gain_ul

    @property
    def uplink_energy_per_param(self) -> np.ndarray:
        """Joules to push one parameter up subcarrier ``s``: ``P_ul Q / R_ul``."""
        with np.errstate(divide="ignore", invalid="ignore"):
            e = self.uplink_power * self.bits_per_param / self.uplink_rate
        return np.where(self.uplink_rate > 0, e, INFEASIBLE)

    def with_deadline(self, deadline: float) -> "NetworkInstance":
        return replace(self, round_deadline=float(deadline))

    # -- serialization -------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "subcarrier_bandwidth": self.subcarrier_bandwidth,
            "noise_power": self.noise_power,
            "bits_per_param": self.bits_per_param,
            "channel_gain_dl": self.channel_gain_dl.tolist(),
            "channel_gain_ul": self.channel_gain_ul.tolist(),
            "tx_power_dl": self.tx_power_dl.tolist(),
            "uplink_rate": self.uplink_rate.tolist(),
            "round_deadline": self.round_deadline,
            "full_payload": self.full_payload,
            "devices": [asdict(d) for d in self.devices],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "NetworkInstance":
        if "channel_gain_dl" not in doc:
            return random_instance(**doc["generate"]) if "generate" in doc else random_instance(**doc)
        return cls(
            subcarrier_bandwidth=float(doc["subcarrier_bandwidth"]),
            noise_power=float(doc["noise_power"]),
            bits_per_param=float(doc["bits_per_param"]),
            channel_gain_dl=np.array(doc["channel_gain_dl"], dtype=float),
            channel_gain_ul=np.array(doc["channel_gain_ul"], dtype=float),
            tx_power_dl=np.array(doc["tx_power_dl"], dtype=float),
            uplink_rate=np.array(doc["uplink_rate"], dtype=float),
            round_deadline=float(doc["round_deadline"]),
            devices=tuple(DeviceProfile(**d) for d in doc["devices"]),
            full_payload=float(doc["full_payload"]),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def random_instance(
    n_devices: int,
    n_subcarriers: int,
    seed: int = 0,
    full_payload: float = 2.0e4,
    subcarrier_bandwidth: float = 1.0e5,
    noise_power: float = 1.0e-9,
    bits_per_param: float = 32.0,
    path_loss: float = 1.0e-3,
    tx_power_dl: float = 0.1,
    tx_power_ul: float = 0.05,
    round_deadline: float | None = None,
    deadline_scale: float = 0.4,
    shard_size_range: tuple = (50, 200),
    cpu_freq_range: tuple = (0.5e9, 2.0e9),
    cycles_per_sample: float = 1.0e6,
    compute_coeff: float = 1.0e-28,
    circuit_energy: float = 1.0e-3,
    energy_budget_range: tuple = (0.05, 0.3),
    shard_sizes=None,
    devices=None,
) -> NetworkInstance:
    """Rayleigh-faded instance; ``|h|^2 ~ path_loss * Exp(1)`` independently per link.

    ``devices`` reuses fixed device profiles (only the channels are drawn);
    otherwise profiles are drawn, with shard sizes from ``shard_sizes`` when
    given. Without an explicit ``round_deadline`` the deadline is the slowest
    device's compute time plus ``deadline_scale`` times the time to push the
    full payload over one median-quality subcarrier each way, so every device
    has some slack and the latency constraint binds for small scales.
    """
    rng = np.random.default_rng(seed)
    K, S = n_devices, n_subcarriers
    gain_dl = path_loss * rng.exponential(1.0, size=(K, S))
    gain_ul = path_loss * rng.exponential(1.0, size=(K, S))
    if devices is None:
        devices = []
        for k in range(K):
            size = rng.integers(shard_size_range[0], shard_size_range[1] + 1)
            devices.append(DeviceProfile(
                cpu_freq=float(rng.uniform(*cpu_freq_range)),
                cycles_per_sample=cycles_per_sample,
                compute_coeff=compute_coeff,
                circuit_energy=circuit_energy,
                energy_budget=float(rng.uniform(*energy_budget_range)),
                shard_size=int(size if shard_sizes is None else shard_sizes[k]),
            ))
    elif len(devices) != K:
        raise DomainError(f"{len(devices)} device profiles for {K} devices")
    p_dl = np.full((K, S), tx_power_dl)
    r_ul = subcarrier_bandwidth * np.log2(1.0 + gain_ul * tx_power_ul / noise_power)
    if round_deadline is None:
        r_dl = subcarrier_bandwidth * np.log2(1.0 + gain_dl * p_dl / noise_power)
        comm = full_payload * bits_per_param * (1.0 / np.median(r_dl) + 1.0 / np.median(r_ul))
        round_deadline = max(d.compute_latency for d in devices) + deadline_scale * comm
    return NetworkInstance(
        subcarrier_bandwidth=subcarrier_bandwidth,
        noise_power=noise_power,
        bits_per_param=bits_per_param,
        channel_gain_dl=gain_dl,
        channel_gain_ul=gain_ul,
        tx_power_dl=p_dl,
        uplink_rate=r_ul,
        round_deadline=float(round_deadline),
        devices=tuple(devices),
        full_payload=full_payload,
    )


@dataclass
class RoundAllocation:
    assignment: np.ndarray  # z (K, S) in {0, 1}
    params_per_subcarrier: np.ndarray  # M_hat (K, S) >= 0
    dropout_rates: np.ndarray  # gamma (K,)
    uplink_rates: np.ndarray | None = None  # defaults to the instance's

    def __post_init__(self):
        self.assignment = np.asarray(self.assignment, dtype=float)
        self.params_per_subcarrier = np.asarray(self.params_per_subcarrier, dtype=float)
        self.dropout_rates = np.asarray(self.dropout_rates, dtype=float)
        if self.uplink_rates is not None:
            self.uplink_rates = np.asarray(self.uplink_rates, dtype=float)


def downlink_rate(instance: NetworkInstance, k: int, s: int) -> float:
    snr = instance.channel_gain_dl[k, s] * instance.tx_power_dl[k, s] / instance.noise_power
    return float(instance.subcarrier_bandwidth * np.log2(1.0 + snr))


def uplink_rate(instance: NetworkInstance, k: int, s: int, power: float) -> float:
    snr = instance.channel_gain_ul[k, s] * power / instance.noise_power
    return float(instance.subcarrier_bandwidth * np.log2(1.0 + snr))


def uplink_power_for_rate(instance: NetworkInstance, k: int, s: int, rate: float) -> float:
    if rate < 0:
        raise DomainError("rate must be nonnegative")
    return float((2.0 ** (rate / instance.subcarrier_bandwidth) - 1.0) * instance.noise_power
                 / instance.channel_gain_ul[k, s])


def _ul_rates(instance: NetworkInstance, alloc: RoundAllocation) -> np.ndarray:
    return instance.uplink_rate if alloc.uplink_rates is None else alloc.uplink_rates


def _slowest(loads_bits: np.ndarray, rates: np.ndarray, assigned: np.ndarray) -> float:
    worst = 0.0
    for bits, rate, z in zip(loads_bits, rates, assigned):
        if z == 0 or bits == 0:
            continue
        if rate <= 0:
            return INFEASIBLE
        worst = max(worst, bits / rate)
    return worst


def step_latencies(instance: NetworkInstance, alloc: RoundAllocation, k: int) -> tuple[float, float, float]:
    """``(T_dl, T_cmp, T_ul)`` for device ``k``; a loaded subcarrier with zero rate yields ``inf``."""
    bits = alloc.params_per_subcarrier[k] * instance.bits_per_param
    z = alloc.assignment[k]
    t_dl = _slowest(bits, instance.downlink_rates[k], z)
    t_ul = _slowest(bits, _ul_rates(instance, alloc)[k], z)
    return t_dl, instance.devices[k].compute_latency, t_ul


def step_energies(instance: NetworkInstance, alloc: RoundAllocation, k: int) -> tuple[float, float, float]:
    """``(E_ul, E_cmp, E_circuit)`` for device ``k``."""
    rates = _ul_rates(instance, alloc)[k]
    e_ul = 0.0
    for s in range(instance.n_subcarriers):
        load = alloc.params_per_subcarrier[k, s]
        if alloc.assignment[k, s] == 0 or load == 0:
            continue
        if rates[s] <= 0:
            return INFEASIBLE, instance.devices[k].compute_energy, instance.devices[k].circuit_energy
        power = uplink_power_for_rate(instance, k, s, rates[s])
        e_ul += alloc.assignment[k, s] * power * load * instance.bits_per_param / rates[s]
    dev = instance.devices[k]
    return e_ul, dev.compute_energy, dev.circuit_energy


@dataclass
class FeasibilityReport:
    violations: list = field(default_factory=list)  # per device: list of constraint labels
    latency: list = field(default_factory=list)
    energy: list = field(default_factory=list)

    @property
    def feasible(self) -> bool:
        return not any(self.violations)


def check_constraints(instance: NetworkInstance, alloc: RoundAllocation, rtol: float = 1e-9) -> FeasibilityReport:
    """Evaluate C1-C5 per device. Infeasibility is reported, never raised.

    A C3 violation on subcarrier ``s`` is charged to every device holding a
    share of it (or to all devices when nobody holds it).
    """
    K, S = instance.n_devices, instance.n_subcarriers
    z = alloc.assignment
    report = FeasibilityReport([[] for _ in range(K)])
    bad_sub = [s for s in range(S) if not (np.all(np.isin(z[:, s], (0.0, 1.0))) and z[:, s].sum() == 1)]
    for k in range(K):
        t_dl, t_cmp, t_ul = step_latencies(instance, alloc, k)
        latency = t_dl + t_cmp + t_ul
        e_ul, e_cmp, e_cir = step_energies(instance, alloc, k)
        energy = e_ul + e_cmp + e_cir
        report.latency.append(latency)
        report.energy.append(energy)
        v = report.violations[k]
        if latency > instance.round_deadline * (1 + rtol):
            v.append("C1")
        if energy > instance.devices[k].energy_budget * (1 + rtol):
            v.append("C2")
        if any(z[k, s] != 0 or z[:, s].sum() == 0 for s in bad_sub):
            v.append("C3")
        gamma = alloc.dropout_rates[k]
        carried = float(np.sum(z[k] * alloc.params_per_subcarrier[k]))
        if carried < (1.0 - gamma) * instance.full_payload * (1 - rtol):
            v.append("C4")
        if not 0.0 <= gamma < 1.0:
            v.append("C5")
    return report
