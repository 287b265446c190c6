"""Scorer x alignment grid (or any other axes) over several seeds.

    python scripts/run_grid.py --seeds 0 1 2 --out runs/grid
    python scripts/run_grid.py --axes clean_ce=true adv_ce=false,true cma=false,true
"""

import argparse
from collections import defaultdict
from pathlib import Path

import numpy as np

from rlbind import pipeline as pl
from rlbind.cli import parse_axes
from rlbind.config import parse_config

HERE = Path(__file__).resolve().parent
SCORER_GRID = ["scorer=dot,scaled_dot,cosine,norm_euclid,bilinear,mlp", "alignment=l1,l2,kl"]


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default=str(HERE.parent / "configs" / "trend.toml"))
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--axes", nargs="+", default=SCORER_GRID)
    ap.add_argument("--set", action="append", default=[])
    ap.add_argument("--out")
    args = ap.parse_args()

    axes = parse_axes(args.axes)
    cache: dict = {}
    all_cells = []
    table = defaultdict(list)
    for seed in args.seeds:
        base = parse_config(args.config, [f"run.seed={seed}", *args.set])
        cells = pl.run_ablation_grid(base, axes, cache=cache)
        all_cells += cells
        for c in cells:
            key = tuple(str(v) for v in c.overrides.values())
            if c.error:
                print(f"seed {seed} {key}: {c.error}")
                continue
            rows = c.metrics.select(stage="stage2")
            table[key].append((np.mean([r.clean_acc for r in rows]), np.mean([r.robust_acc for r in rows])))
    names = list(axes)
    print("\n" + "  ".join(f"{n:12s}" for n in names) + "   clean   robust  (seed means)")
    for key, vals in table.items():
        clean, robust = np.mean(vals, axis=0)
        print("  ".join(f"{k:12s}" for k in key) + f"  {100 * clean:6.2f}% {100 * robust:6.2f}%")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        pl.write_text_atomic(out / "metrics.csv", pl.grid_csv(all_cells))


if __name__ == "__main__":
    main()
