"""Command-line entry point.

Subcommands: ``run`` (one experiment from a config file), ``grid`` (the
environment/policy sweep), ``attack`` (vulnerability evaluation of a stored
run), ``report`` (joined plot-data CSV across runs). Flags override config
fields; the config file is the source of truth.

Exit codes: 0 success, 1 config error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import replace
from pathlib import Path

from . import harness, privacy as priv
from .federation import ASYNC, SEMISYNC, SYNC
from .harness import EXIT_CONFIG_ERROR, EXIT_OK, EXIT_RUNTIME_ERROR, ExperimentConfig


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedsim")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute a single experiment config")
    p_run.add_argument("--config", required=True, help="path to a config JSON file")
    p_run.add_argument("--run-id", default=None)
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--rounds", type=int, default=None)
    p_run.add_argument("--policy", choices=[SYNC, SEMISYNC, ASYNC], default=None)
    p_run.add_argument("--encrypted", action="store_true", help="force encrypted aggregation on")
    p_run.add_argument("--out", default=None, help="override the output directory")

    p_grid = sub.add_parser("grid", help="run the environment/policy grid")
    p_grid.add_argument("--config", required=True, help="base config JSON file")
    p_grid.add_argument("--out", required=True, help="grid output directory")

    p_attack = sub.add_parser("attack", help="vulnerability evaluation of a stored run")
    p_attack.add_argument("--run-dir", required=True)
    p_attack.add_argument("--out", default=None, help="output CSV (default: <run-dir>/attack.csv)")

    p_report = sub.add_parser("report", help="emit joined plot data for stored runs")
    p_report.add_argument("--runs", nargs="+", required=True, help="run directories")
    p_report.add_argument("--out", required=True, help="output CSV path")
    return parser


def _load_config(args) -> ExperimentConfig:
    config = ExperimentConfig.load(args.config)
    if getattr(args, "run_id", None):
        config = replace(config, run_id=args.run_id)
    if getattr(args, "seed", None) is not None:
        config = replace(config, seed=args.seed)
    if getattr(args, "rounds", None) is not None:
        config = replace(config, policy=replace(config.policy, rounds=args.rounds))
    if getattr(args, "policy", None):
        policy = config.policy
        extra = {}
        if args.policy == SEMISYNC and policy.lambda_epochs is None:
            extra["lambda_epochs"] = 4
        if args.policy == ASYNC and policy.update_budget is None:
            extra["update_budget"] = policy.rounds * config.partition.sites
        config = replace(config, policy=replace(policy, kind=args.policy, **extra))
    if getattr(args, "encrypted", False):
        config = replace(config, encryption=replace(config.encryption, enabled=True))
    if getattr(args, "out", None):
        config = replace(config, output_dir=args.out)
    return config


def _cmd_run(args) -> int:
    config = _load_config(args)
    result = harness.run_experiment(config)
    final = result.records[-1]
    metric = "mae" if final.test_mae is not None else "accuracy"
    value = final.test_mae if final.test_mae is not None else final.test_accuracy
    print(f"{config.run_id}: {len(result.records) - 1} rounds, final {metric}={value:.4f}")
    print(f"artifacts: {result.run_dir}")
    return EXIT_OK


def _cmd_grid(args) -> int:
    config = ExperimentConfig.load(args.config)
    results, failures = harness.run_grid(config, Path(args.out))
    print(f"grid: {len(results)} runs completed, {len(failures)} failed")
    for run_id, err in failures:
        print(f"  FAILED {run_id}: {err}", file=sys.stderr)
    return EXIT_OK if not failures else EXIT_RUNTIME_ERROR


def _cmd_attack(args) -> int:
    run_dir = Path(args.run_dir)
    config = ExperimentConfig.load(run_dir / "config.json")
    model = harness.load_model_file(run_dir / "model.bin", config.model.layout)
    _, test, _, profiles = harness.build_environment(config)
    pools = priv.split_holdout_pools(test, [p.id for p in profiles], config.seed)
    final_round = config.policy.rounds if config.policy.kind != ASYNC else config.policy.update_budget
    report = priv.vulnerability(model, config.model, profiles, pools, final_round, config.seed)
    out = Path(args.out) if args.out else run_dir / "attack.csv"
    harness.write_vulnerability_csv([report], out)
    print(f"vulnerability over {report.n_pairs} attacker/target pairs: "
          f"{report.mean_vulnerability:.4f} -> {out}")
    return EXIT_OK


def _cmd_report(args) -> int:
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            ["run_id", "environment", "policy", "encrypted"] + harness.METRICS_COLUMNS[1:]
        )
        for run in args.runs:
            run_dir = Path(run)
            config = ExperimentConfig.load(run_dir / "config.json")
            env = (
                f"centralized-{int(config.centralized_fraction * 100)}"
                if config.centralized_fraction is not None
                else f"{config.partition.amount_mode}/{config.partition.distribution_mode}"
            )
            with open(run_dir / "metrics.csv", newline="") as mfh:
                for row in list(csv.DictReader(mfh)):
                    writer.writerow(
                        [config.run_id, env, config.policy.kind, config.encryption.enabled]
                        + [row[c] for c in harness.METRICS_COLUMNS[1:]]
                    )
    print(f"report written to {out}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "run": _cmd_run,
        "grid": _cmd_grid,
        "attack": _cmd_attack,
        "report": _cmd_report,
    }
    try:
        return handlers[args.command](args)
    except (ValueError, KeyError, TypeError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    except Exception as exc:  # noqa: BLE001
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
