"""``fedlodrop`` command line: run, solve, bounds, compare.

Exit codes: 0 success, 2 infeasible allocation, 1 any other error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .allocator import InfeasibleError, ProblemConstants, random_constants, solve
from .bounds import bound_sweep
from .harness.config import ConfigError, load_config
from .harness.experiment import (
    bound_constants,
    build_task,
    compare_methods,
    emit_results,
    run_experiment,
    write_csv,
)
from .network_model import NetworkInstance

EXIT_OK, EXIT_ERROR, EXIT_INFEASIBLE = 0, 1, 2


def parse_grid(text: str) -> list[float]:
    """``start:stop:step`` (stop inclusive) or a comma-separated list."""
    if ":" in text:
        parts = [float(p) for p in text.split(":")]
        if len(parts) != 3 or parts[2] <= 0:
            raise argparse.ArgumentTypeError("grid must be start:stop:step with a positive step")
        start, stop, step = parts
        n = int(np.floor((stop - start) / step + 1e-9)) + 1
        return [round(start + i * step, 12) for i in range(n)]
    return [float(p) for p in text.split(",") if p.strip()]


def _cmd_run(args) -> int:
    config = load_config(args.config)
    result = run_experiment(config)
    paths = emit_results(result, args.out, plots=not args.no_plots)
    for p in paths:
        print(p)
    return EXIT_OK


def load_problem(path: str | Path) -> tuple[ProblemConstants, NetworkInstance]:
    """A document ``{"instance": ..., "constants": ...}``.

    ``instance`` is a full instance or ``{"generate": {...}}`` generator
    keywords; ``constants`` is a full record or ``{"random": seed}`` (random
    constants when absent).
    """
    doc = json.loads(Path(path).read_text())
    inst_doc = doc.get("instance", doc)
    instance = NetworkInstance.from_dict(inst_doc)
    cdoc = doc.get("constants")
    if cdoc is None or "random" in (cdoc or {}):
        seed = 0 if cdoc is None else int(cdoc["random"])
        constants = random_constants(instance.n_devices, seed, instance.shard_sizes)
    else:
        constants = ProblemConstants.from_dict(cdoc)
    return constants, instance


def _cmd_solve(args) -> int:
    constants, instance = load_problem(args.instance)
    options = {}
    if args.method == "bnb":
        options = {"node_budget": args.node_budget}
        if args.tol is not None:
            options["tol"] = args.tol
    elif args.method == "psca":
        options = {"penalty_tau": args.tau}
        if args.tol is not None:
            options["tol"] = args.tol
    sol = solve(args.method, constants, instance, **options)
    print(sol.table())
    if args.out:
        sol.save(args.out)
    return EXIT_OK if sol.feasible else EXIT_INFEASIBLE


def _cmd_bounds(args) -> int:
    config = load_config(args.config)
    task = build_task(config, config.seeds[0])
    c = bound_constants(config, task)
    rows = bound_sweep(c, args.gamma_grid)
    cols = list(rows[0])
    out = sys.stdout
    print(",".join(cols), file=out)
    for r in rows:
        print(",".join(repr(float(r[k])) for k in cols), file=out)
    if args.out:
        target = Path(args.out)
        target.mkdir(parents=True, exist_ok=True)
        write_csv(target / "bound_sweep.csv", cols, rows)
        if not args.no_plots:
            from .harness.plots import bound_sweep_figure

            bound_sweep_figure(rows, target / "bound_sweep.png")
    return EXIT_OK


def _cmd_compare(args) -> int:
    config = load_config(args.config)
    table = compare_methods(config, args.methods)
    print(table.text())
    if args.out:
        target = Path(args.out)
        target.mkdir(parents=True, exist_ok=True)
        table.to_csv(target / "comparison.csv")
        if not args.no_plots:
            from .harness.plots import comparison_figure

            comparison_figure(table, target / "comparison.png")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedlodrop", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run an experiment and write its result files")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-plots", action="store_true", help="skip the PNG figures")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("solve", help="solve one allocation problem")
    p.add_argument("--instance", required=True, help="JSON with an instance and (optionally) constants")
    p.add_argument("--method", default="bnb", choices=["bnb", "psca", "oracle", "subcarrier_fixed", "no_dropout"])
    p.add_argument("--tol", type=float, default=None)
    p.add_argument("--node-budget", type=int, default=100_000)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--out", help="write the solution JSON here")
    p.set_defaults(func=_cmd_solve)

    p = sub.add_parser("bounds", help="evaluate the closed-form bounds over a dropout grid")
    p.add_argument("--config", required=True)
    p.add_argument("--gamma-grid", type=parse_grid, default=parse_grid("0:0.6:0.05"))
    p.add_argument("--out", help="directory for bound_sweep.csv and its figure")
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=_cmd_bounds)

    p = sub.add_parser("compare", help="compare allocation schemes on identical seeds and channels")
    p.add_argument("--config", required=True)
    p.add_argument("--methods", nargs="+", default=None)
    p.add_argument("--out", help="directory for comparison.csv and its figure")
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=_cmd_compare)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        report = getattr(exc, "report", None)
        if report:
            print(json.dumps(report, indent=2, default=str), file=sys.stderr)
        return EXIT_INFEASIBLE
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
