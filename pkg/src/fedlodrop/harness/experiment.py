"""Experiment orchestration: build the toy task, run rounds, solve allocations, record everything."""

from __future__ import annotations

import csv
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .. import allocator
from ..allocator import InfeasibleError, ProblemConstants, lower_to_protocol
from ..bounds import (
    BoundConstants,
    TrainingTrace,
    convergence_bound,
    estimate_constants,
    generalization_gap,
    gradient_error_bound,
    loss_descent_bound,
    phs_bound_server,
)
from ..fed_protocol import RoundReport, ServerState, run_round
from ..lora_core import MaskMode, sgd_update
from ..network_model import NetworkInstance, check_constraints, random_instance
from ..toy_model import (
    Partition,
    SyntheticDataset,
    ToyNetwork,
    backward_all,
    build_network,
    generate_synthetic,
    partition_non_iid,
)
from .config import ExperimentConfig

SCHEMA_VERSION = 1

ROUND_COLUMNS = ["run", "seed", "gamma_setting", "round", "train_loss", "eval_loss", "eval_accuracy",
                 "gradient_error", "transmitted_total", "mean_rate", "rates", "aggregation"]
BOUND_COLUMNS = ["run", "seed", "gamma_setting", "round", "phs_server", "generalization_gap",
                 "gradient_error_bound", "loss_descent", "convergence_bound", "measured_gradient_error"]


@dataclass
class Task:
    net: ToyNetwork
    train: SyntheticDataset
    test: SyntheticDataset
    partition: Partition


def build_task(config: ExperimentConfig, seed: int) -> Task:
    """Network, train/test data sharing class means, and the non-IID split for one seed."""
    m, d = config.model, config.data
    dim, n_classes = m.dims[0], config.n_classes
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0]))
    directions = rng.normal(size=(n_classes, dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    means = d.separation * directions
    train = generate_synthetic(d.n_train, dim, n_classes, seed, noise=d.noise, label_noise=d.label_noise, means=means)
    test = generate_synthetic(d.n_test, dim, n_classes, seed + 1_000_003, noise=d.noise, means=means)
    partition = partition_non_iid(train, d.n_devices, d.concentration, seed)
    net = build_network(m.dims, m.rank, m.adapted, seed, m.activation, m.loss, m.init_scale)
    return Task(net, train, test, partition)


def full_payload(net: ToyNetwork) -> int:
    """``M``: adapter parameters over all adapted layers, ``sum (n1 + n2) r``."""
    return int(sum((a.n1 + a.n2) * a.rank for a in net.adapters))


def bound_constants(config: ExperimentConfig, task: Task) -> BoundConstants:
    """Configured constants, with ``H``, ``G``, ``eta`` traced from a short centralized run in measure mode.

    ``n1 + n2`` is taken from the widest adapted layer.
    """
    b = config.bounds
    widest = max(task.net.adapters, key=lambda a: a.n1 + a.n2)
    sizes = tuple(int(s) for s in task.partition.sizes)
    hess = b.hessian_min if isinstance(b.hessian_min, list) else [b.hessian_min] * len(sizes)
    c = BoundConstants(
        lipschitz_eta=b.lipschitz_eta, grad_bound_H=b.grad_bound_H, weight_bound_G=b.weight_bound_G,
        pl_mu=b.pl_mu, optimality_gap_rho=b.optimality_gap_rho, reg_lambda=b.reg_lambda,
        hessian_min_per_device=tuple(hess), loss_range_C=b.loss_range_C, confidence_delta=b.confidence_delta,
        n1=widest.n1, n2=widest.n2, n_adapted=len(task.net.adapters), shard_sizes=sizes,
    )
    if b.mode == "measure":
        c = estimate_constants(warmup_trace(task, config.training.lr, b.warmup_steps), template=c)
    return c


def warmup_trace(task: Task, lr: float, steps: int) -> TrainingTrace:
    trace = TrainingTrace()
    batch = (task.train.features, task.train.labels)
    model = task.net
    for _ in range(max(steps, 1) + 1):
        grads = backward_all(model, batch)
        weights = [w for a in model.adapters for w in (a.a_mat, a.b_mat)]
        trace.append(weights, [g for gr in grads for g in (gr.grad_a, gr.grad_b)])
        model = model.with_adapters([sgd_update(a, g, lr) for a, g in zip(model.adapters, grads)])
    return trace


def base_instance(config: ExperimentConfig, task: Task) -> NetworkInstance:
    n = config.network
    return random_instance(
        config.data.n_devices, n.n_subcarriers, seed=n.seed, full_payload=float(full_payload(task.net)),
        round_deadline=n.round_deadline, deadline_scale=n.deadline_scale,
        shard_sizes=task.partition.sizes, **n.options,
    )


def round_instance(config: ExperimentConfig, base: NetworkInstance, seed: int, round_: int) -> NetworkInstance:
    """Fresh channels for one round, seeded by (seed, network seed, round); devices and deadline kept."""
    n = config.network
    channel_seed = int(np.random.SeedSequence([seed, n.seed, round_]).generate_state(1)[0])
    return random_instance(
        base.n_devices, base.n_subcarriers, seed=channel_seed, full_payload=base.full_payload,
        round_deadline=base.round_deadline, devices=base.devices, **n.options,
    )


def solver_options(config: ExperimentConfig, method: str) -> dict:
    o = config.optimizer
    if method == "bnb":
        return {"node_budget": o.node_budget, "tol": o.tol}
    if method == "psca":
        return {"penalty_tau": o.tau}
    return {}


@dataclass
class RunResult:
    seed: int
    gamma_setting: str  # "optimized" or the fixed rate(s)
    rounds: list = field(default_factory=list)  # RoundReport
    allocations: list = field(default_factory=list)  # dict per round (optimized mode)
    bounds: list = field(default_factory=list)  # dict per round
    wall_clock: float = 0.0

    @property
    def final(self) -> RoundReport:
        return self.rounds[-1]

    def rounds_to(self, threshold: float | None) -> int | None:
        """First round whose train loss is at or below ``threshold`` (None if never)."""
        if threshold is None:
            return None
        for r in self.rounds:
            if r.train_loss <= threshold:
                return r.round
        return None

    def summary(self, threshold: float | None = None) -> dict:
        f = self.final
        objectives = [a["objective"] for a in self.allocations if a["objective"] is not None]
        return {
            "seed": self.seed,
            "gamma_setting": self.gamma_setting,
            "rounds": len(self.rounds),
            "final_train_loss": f.train_loss,
            "final_eval_loss": f.eval_loss,
            "final_eval_accuracy": f.eval_accuracy,
            "rounds_to_threshold": self.rounds_to(threshold),
            "total_transmitted": int(sum(sum(r.transmitted) for r in self.rounds)),
            "mean_objective": float(np.mean(objectives)) if objectives else None,
        }


@dataclass
class ExperimentResult:
    config: dict
    runs: list = field(default_factory=list)  # RunResult
    wall_clock: dict = field(default_factory=dict)  # kept out of the result files

    def summary(self) -> dict:
        threshold = self.config["training"]["loss_threshold"]
        runs = [r.summary(threshold) for r in self.runs]
        by_setting: dict = {}
        for row in runs:
            by_setting.setdefault(row["gamma_setting"], []).append(row)
        aggregate = {}
        for setting, rows in by_setting.items():
            accs = [r["final_eval_accuracy"] for r in rows if r["final_eval_accuracy"] is not None]
            reach = [r["rounds_to_threshold"] for r in rows]
            aggregate[setting] = {
                "n_runs": len(rows),
                "mean_final_eval_accuracy": float(np.mean(accs)) if accs else None,
                "mean_final_train_loss": float(np.mean([r["final_train_loss"] for r in rows])),
                "mean_rounds_to_threshold": (float(np.mean([self._cap(v) for v in reach]))
                                             if threshold is not None else None),
            }
        return {
            "schema_version": SCHEMA_VERSION,
            "name": self.config["name"],
            "mode": self.config["dropout"]["mode"],
            "runs": runs,
            "aggregate": aggregate,
            "config": self.config,
        }

    def _cap(self, reached: int | None) -> int:
        """Runs that never reach the threshold count as ``rounds + 1``."""
        return self.config["training"]["rounds"] + 1 if reached is None else reached


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _gamma_label(rates) -> str:
    rates = list(np.atleast_1d(rates))
    if len(set(rates)) == 1:
        return repr(float(rates[0]))
    return ";".join(repr(float(r)) for r in rates)


def _bounds_row(c: BoundConstants, rates: np.ndarray, schedule: list, report: RoundReport) -> dict:
    gap = (generalization_gap(c, rates)
           if np.all(np.asarray(c.hessian_min_per_device) + 2 * c.reg_lambda * (2 * rates - rates**2) > 0)
           else float("inf"))
    return {
        "round": report.round,
        "phs_server": phs_bound_server(c, rates),
        "generalization_gap": gap,
        "gradient_error_bound": gradient_error_bound(c, rates),
        "loss_descent": loss_descent_bound(c, rates),
        "convergence_bound": convergence_bound(c, np.array(schedule)),
        "measured_gradient_error": report.gradient_error,
    }


def run_single(config: ExperimentConfig, seed: int, rates: list | None) -> RunResult:
    """One training run. ``rates=None`` solves the allocation problem every round."""
    start = time.perf_counter()
    task = build_task(config, seed)
    c = bound_constants(config, task)
    K = config.data.n_devices
    server = ServerState.from_network(task.net, global_seed=seed, mask_mode=MaskMode(config.dropout.mask_mode))
    optimized = rates is None
    run = RunResult(seed, "optimized" if optimized else _gamma_label(rates))
    if optimized:
        pc = ProblemConstants.from_bounds(c)
        base = base_instance(config, task)
        method = config.optimizer.method
    schedule = []
    previous = None
    tr = config.training
    for t in range(1, tr.rounds + 1):
        if optimized:
            inst = round_instance(config, base, seed, t)
            sol = allocator.solve(method, pc, inst, **solver_options(config, method))
            if sol.feasible:
                lowered = lower_to_protocol(sol, inst)
                round_rates = np.minimum(lowered.gamma, np.nextafter(1.0, 0.0))
                feas = check_constraints(inst, lowered.allocation())
                run.allocations.append({
                    "round": t, "method": method, "objective": sol.objective, "feasible": lowered.feasible,
                    "gamma": round_rates.tolist(), "gamma_relaxed": np.asarray(sol.gamma).tolist(),
                    "m_hat": lowered.m_hat.astype(int).tolist(), "z": lowered.z.astype(int).tolist(),
                    "latency": feas.latency, "energy": feas.energy, "deadline": inst.round_deadline,
                    "violations": feas.violations, "gamma_raised": lowered.gamma_raised,
                })
                previous = round_rates
            elif config.optimizer.fallback == "previous" and previous is not None:
                round_rates = previous
                run.allocations.append({"round": t, "method": method, "objective": None, "feasible": False,
                                        "gamma": previous.tolist(), "fallback": "previous"})
            else:
                err = InfeasibleError(f"seed {seed} round {t}: no feasible allocation ({method})")
                err.report = {"seed": seed, "round": t, "method": method, "metadata": sol.to_dict()["metadata"]}
                raise err
        else:
            round_rates = np.asarray(rates, dtype=float)
        schedule.append(round_rates)
        evaluate = t == tr.rounds or (tr.eval_every > 0 and t % tr.eval_every == 0)
        server, report = run_round(server, task.partition, task.net, task.train, round_rates, tr.lr,
                                   tr.local_epochs, task.test if evaluate else None, tr.error_samples)
        run.rounds.append(report)
        run.bounds.append(_bounds_row(c, round_rates, schedule, report))
    run.wall_clock = time.perf_counter() - start
    return run


def _run_spec(args) -> RunResult:
    doc, seed, rates = args
    return run_single(ExperimentConfig.from_dict(doc), seed, rates)


def run_plan(config: ExperimentConfig) -> list[tuple[int, list | None]]:
    K = config.data.n_devices
    d = config.dropout
    if d.mode == "optimized":
        return [(s, None) for s in config.seeds]
    if d.mode == "fixed":
        rates = d.gamma if isinstance(d.gamma, list) else [d.gamma] * K
        return [(s, [float(g) for g in rates]) for s in config.seeds]
    return [(s, [float(g)] * K) for g in d.grid for s in config.seeds]


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    """Every run the config asks for, in a fixed order; ``workers > 1`` runs them in processes."""
    start = time.perf_counter()
    plan = run_plan(config)
    doc = config.to_dict()
    if config.workers > 1 and len(plan) > 1:
        with ProcessPoolExecutor(config.workers) as pool:
            runs = list(pool.map(_run_spec, [(doc, s, r) for s, r in plan]))
    else:
        runs = [run_single(config, s, r) for s, r in plan]
    return ExperimentResult(doc, runs, {"total": time.perf_counter() - start,
                                        "per_run": [r.wall_clock for r in runs]})


# ---------------------------------------------------------------------------
# output


def write_csv(path: Path, columns: list, rows: list) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row.get(c)) for c in columns])


def round_rows(result: ExperimentResult) -> list[dict]:
    rows = []
    for i, run in enumerate(result.runs):
        for r in run.rounds:
            rows.append({
                "run": i, "seed": run.seed, "gamma_setting": run.gamma_setting, "round": r.round,
                "train_loss": r.train_loss, "eval_loss": r.eval_loss, "eval_accuracy": r.eval_accuracy,
                "gradient_error": r.gradient_error, "transmitted_total": int(sum(r.transmitted)),
                "mean_rate": float(np.mean(r.rates)), "rates": ";".join(repr(float(g)) for g in r.rates),
                "aggregation": r.aggregation,
            })
    return rows


def bound_rows(result: ExperimentResult) -> list[dict]:
    return [{"run": i, "seed": run.seed, "gamma_setting": run.gamma_setting, **b}
            for i, run in enumerate(result.runs) for b in run.bounds]


def emit_results(result: ExperimentResult, out_dir: str | Path, plots: bool = True) -> list[Path]:
    """Write rounds.csv, allocations.json, bounds.csv, summary.json (and PNG figures); return the paths."""
    if not result.runs or any(not r.rounds for r in result.runs):
        raise ValueError("cannot emit an empty result: every run needs at least one round")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    path = out / "rounds.csv"
    write_csv(path, ROUND_COLUMNS, round_rows(result))
    written.append(path)
    path = out / "bounds.csv"
    write_csv(path, BOUND_COLUMNS, bound_rows(result))
    written.append(path)
    path = out / "allocations.json"
    allocs = {"schema_version": SCHEMA_VERSION,
              "runs": [{"run": i, "seed": r.seed, "gamma_setting": r.gamma_setting, "rounds": r.allocations}
                       for i, r in enumerate(result.runs)]}
    path.write_text(json.dumps(_plain(allocs), indent=1, sort_keys=True) + "\n")
    written.append(path)
    path = out / "summary.json"
    path.write_text(json.dumps(_plain(result.summary()), indent=2, sort_keys=True) + "\n")
    written.append(path)
    if plots:
        from .plots import experiment_figures

        written.extend(experiment_figures(result, out))
    return written


def load_summary(path: str | Path) -> dict:
    return json.loads(Path(path).read_text())


def _plain(obj):
    """JSON-safe copy: numpy scalars/arrays unwrapped, non-finite floats as strings."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.generic):
        return _plain(obj.item())
    if isinstance(obj, float) and not np.isfinite(obj):
        return repr(obj)
    return obj


# ---------------------------------------------------------------------------
# scheme comparison


@dataclass
class ComparisonRow:
    method: str
    feasible: bool
    mean_objective: float | None
    final_eval_accuracy: float | None
    rounds_feasible: int
    max_latency_ratio: float | None  # worst device latency / deadline over all rounds
    note: str = ""


@dataclass
class ComparisonTable:
    rows: list

    def to_csv(self, path: str | Path) -> None:
        cols = list(ComparisonRow.__dataclass_fields__)
        write_csv(Path(path), cols, [asdict(r) for r in self.rows])

    def text(self) -> str:
        head = f"{'method':<18}{'feasible':>9}{'objective':>14}{'accuracy':>10}{'latency/T0':>12}"
        lines = [head]
        for r in self.rows:
            obj = "-" if r.mean_objective is None else f"{r.mean_objective:.6g}"
            acc = "-" if r.final_eval_accuracy is None else f"{r.final_eval_accuracy:.4f}"
            lat = "-" if r.max_latency_ratio is None else f"{r.max_latency_ratio:.4f}"
            lines.append(f"{r.method:<18}{str(r.feasible):>9}{obj:>14}{acc:>10}{lat:>12}")
        return "\n".join(lines)


def compare_methods(config: ExperimentConfig, methods: list | None = None) -> ComparisonTable:
    """Run the optimized mode once per allocation scheme on identical seeds and channels."""
    methods = list(methods or config.optimizer.compare)
    if len(methods) < 2:
        raise ValueError("comparison needs at least two methods")
    rows = []
    for method in methods:
        cfg = config.replace(dropout={"mode": "optimized"}, optimizer={"method": method, "fallback": "none"})
        try:
            result = run_experiment(cfg)
        except InfeasibleError as exc:
            rows.append(ComparisonRow(method, False, None, None, 0, None, str(exc)))
            continue
        allocs = [a for r in result.runs for a in r.allocations if a["objective"] is not None]
        accs = [r.final.eval_accuracy for r in result.runs]
        ratio = max(max(a["latency"]) / a["deadline"] for a in allocs)
        rows.append(ComparisonRow(method, True, float(np.mean([a["objective"] for a in allocs])),
                                  float(np.mean(accs)), sum(a["feasible"] for a in allocs), float(ratio)))
    return ComparisonTable(rows)
