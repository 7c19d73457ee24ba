#!/usr/bin/env python3
"""Run the full environment/policy comparison grid.

19 runs: {Uniform, Skewed} x {IID, Non-IID} x {sync, semisync(2), semisync(4),
async} plus centralized baselines trained on 20%, 50%, and 100% of the data.
Emits per-round metrics per run plus a joined grid.csv for plotting.
"""
import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from fedsim.datasim import PartitionPlan
from fedsim.federation import PolicyConfig
from fedsim.harness import DataConfig, ExperimentConfig, run_grid
from fedsim.params import ModelSpec, SgdConfig


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/grid")
    ap.add_argument("--seed", type=int, default=20260808)
    ap.add_argument("--rounds", type=int, default=40)
    args = ap.parse_args()

    base = ExperimentConfig(
        run_id="base",
        seed=args.seed,
        model=ModelSpec(kind="linear-regression", input_dim=64),
        data=DataConfig(n_train=2000, n_test=1000, noise_std=4.0),
        partition=PartitionPlan(sites=8),
        policy=PolicyConfig(kind="SyncFedAvg", rounds=args.rounds),
        sgd=SgdConfig(learning_rate=0.002, batch_size=8, epochs_per_round=4),
    )
    results, failures = run_grid(base, Path(args.out))
    print(f"{len(results)} runs -> {args.out}/grid.csv")
    width = max(len(r.config.run_id) for r in results)
    for res in results:
        print(f"  {res.config.run_id:{width}s}  final MAE {res.final_metric:.4f}")
    for run_id, err in failures:
        print(f"  FAILED {run_id}: {err}")


if __name__ == "__main__":
    main()
