"""Stage 0 -> 1 -> 2 over several seeds; prints seed-averaged accuracies per stage and budget.

    python scripts/run_trend.py --seeds 0 1 2 --out runs/trend
"""

import argparse
from fractions import Fraction
from pathlib import Path

import numpy as np

from rlbind import pipeline as pl
from rlbind.config import parse_config

HERE = Path(__file__).resolve().parent


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default=str(HERE.parent / "configs" / "trend.toml"))
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--set", action="append", default=[], help="extra section.key=value override")
    ap.add_argument("--out", help="write one run directory per seed here")
    args = ap.parse_args()

    runs = []
    for seed in args.seeds:
        cfg = parse_config(args.config, [f"run.seed={seed}", *args.set])
        model, metrics = pl.run_experiment(cfg)
        print(f"seed {seed}: {metrics.wall_clock:.1f}s")
        if args.out:
            out = Path(args.out) / f"seed{seed}"
            pl.write_run_outputs(out, cfg, metrics)
            pl.save_checkpoint(model, out / "model.rlbd")
        runs.append(metrics)

    epsilons = sorted({r.epsilon for r in runs[0].rows}, key=Fraction)
    print(f"\n{'stage':8s} {'clean':>7s} " + " ".join(f"{'eps=' + str(e):>10s}" for e in epsilons))
    for stage in ("stage0", "stage1", "stage2"):
        if not runs[0].select(stage=stage):
            continue
        clean = np.mean([m.mean("clean_acc", stage=stage) for m in runs])
        robust = [np.mean([m.mean("robust_acc", stage=stage, epsilon=e) for m in runs]) for e in epsilons]
        print(f"{stage:8s} {100 * clean:6.2f}% " + " ".join(f"{100 * r:9.2f}%" for r in robust))


if __name__ == "__main__":
    main()
