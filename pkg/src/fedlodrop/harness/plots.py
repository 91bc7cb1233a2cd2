"""PNG figures written next to the CSV/JSON results (Agg backend, no display needed)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata keeps repeated runs byte-identical
_PNG_META = {"Software": None}


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def experiment_figures(result, out: Path) -> list[Path]:
    paths = []
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(10, 4))
    for run in result.runs:
        label = f"seed {run.seed}, gamma {run.gamma_setting}"
        ax_loss.plot([r.round for r in run.rounds], [r.train_loss for r in run.rounds], label=label, lw=1)
        ev = [(r.round, r.eval_accuracy) for r in run.rounds if r.eval_accuracy is not None]
        if ev:
            ax_acc.plot(*zip(*ev), marker=".", label=label, lw=1)
    ax_loss.set(xlabel="round", ylabel="train loss", yscale="log")
    ax_acc.set(xlabel="round", ylabel="eval accuracy")
    if len(result.runs) <= 8:
        ax_loss.legend(fontsize=7)
    paths.append(_save(fig, out / "training.png"))

    if any(run.allocations for run in result.runs):
        fig, ax = plt.subplots(figsize=(6, 4))
        run = result.runs[0]
        rounds = [a["round"] for a in run.allocations]
        rates = np.array([a["gamma"] for a in run.allocations])
        for k in range(rates.shape[1]):
            ax.plot(rounds, rates[:, k], label=f"device {k}", lw=1)
        ax.set(xlabel="round", ylabel="dropout rate", title=f"allocated rates (seed {run.seed})")
        ax.legend(fontsize=7)
        paths.append(_save(fig, out / "rates.png"))

    if result.config["dropout"]["mode"] == "sweep":
        agg = result.summary()["aggregate"]
        settings = sorted(agg, key=float)
        fig, ax = plt.subplots(figsize=(6, 4))
        ax.plot([float(s) for s in settings], [agg[s]["mean_final_eval_accuracy"] for s in settings], marker="o")
        ax.set(xlabel="dropout rate", ylabel="mean final eval accuracy")
        paths.append(_save(fig, out / "sweep.png"))

    fig, ax = plt.subplots(figsize=(6, 4))
    run = result.runs[0]
    rounds = [b["round"] for b in run.bounds]
    for key in ("generalization_gap", "gradient_error_bound", "convergence_bound"):
        ax.plot(rounds, [b[key] for b in run.bounds], label=key, lw=1)
    ax.set(xlabel="round", ylabel="bound value", yscale="log", title=f"bounds (seed {run.seed})")
    ax.legend(fontsize=7)
    paths.append(_save(fig, out / "bounds.png"))
    return paths


def bound_sweep_figure(rows: list[dict], path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    grid = [r["gamma"] for r in rows]
    for key in ("phs_server", "generalization_gap", "gradient_error"):
        vals = np.array([r[key] for r in rows], dtype=float)
        ax.plot(grid, np.where(np.isfinite(vals), vals, np.nan), label=key, marker=".")
    ax.set(xlabel="dropout rate", ylabel="bound value", yscale="log")
    ax.legend(fontsize=7)
    return _save(fig, path)


def comparison_figure(table, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    rows = [r for r in table.rows if r.mean_objective is not None]
    ax.bar([r.method for r in rows], [r.mean_objective for r in rows])
    ax.set(ylabel="mean objective")
    return _save(fig, path)
