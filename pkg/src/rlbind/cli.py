"""Command-line front end.

    rlbind gen-data --spec data.toml --seed 0 --out runs/data
    rlbind pretrain --config exp.toml --data runs/data --out runs/s0
    rlbind stage1   --config exp.toml --data runs/data --init runs/s0/model.rlbd --out runs/s1
    rlbind stage2   --config exp.toml --data runs/data --init runs/s1/model.rlbd --out runs/s2
    rlbind eval     --ckpt runs/s2/model.rlbd --data runs/data --epsilons 2/255,4/255 --out runs/ev
    rlbind ablate   --config exp.toml --axes scorer=dot,cosine alignment=l1,l2,kl --out runs/grid
    rlbind report   runs/s0 runs/s1 runs/s2

Failures print a single ``rlbind: error: <Kind>: <message>`` line and exit 1.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import __version__, pipeline, report, synthdata
from .config import (ExperimentConfig, apply_overrides, default_config, dumps_toml, parse_config, parse_epsilon,
                     parse_override)
from .pipeline import Splits

STAGE_COMMANDS = {"pretrain": "stage0", "stage1": "stage1", "stage2": "stage2"}


class UsageError(ValueError):
    pass


def _prepare_out(path: str, force: bool) -> Path:
    out = Path(path)
    if out.exists() and (not out.is_dir() or any(out.iterdir())):
        if not force:
            raise UsageError(f"output directory {out} exists; pass --force to overwrite")
        if out.is_dir():
            shutil.rmtree(out)
        else:
            out.unlink()
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config(args) -> ExperimentConfig:
    return parse_config(getattr(args, "config", None), list(getattr(args, "set", None) or []))


def _load_data(path: str | None, cfg: ExperimentConfig) -> Splits:
    if path is None:
        return pipeline.build_data(cfg)
    train, test = synthdata.load(path)
    return Splits(train, test)


def _write_config(out: Path, cfg: ExperimentConfig) -> None:
    pipeline.write_text_atomic(out / "config.toml", dumps_toml(cfg))


def _print_rows(metrics: pipeline.RunMetrics) -> None:
    for r in metrics.rows:
        print(f"{r.stage:7s} {r.modality:8s} eps={str(r.epsilon):7s} clean={100 * r.clean_acc:6.2f}% "
              f"robust={100 * r.robust_acc:6.2f}%")


# ----------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------


def cmd_gen_data(args) -> None:
    doc = tomllib.loads(Path(args.spec).read_text()) if args.spec else {}
    if "data" in doc:
        doc = doc["data"]
    cfg = apply_overrides(default_config(), {f"data.{k}": v for k, v in doc.items()}, source="file")
    spec = cfg.data.dataset_spec()
    out = _prepare_out(args.out, args.force)
    ds = synthdata.generate(spec, args.seed)
    train, test = synthdata.split(ds, spec.train_fraction, args.seed)
    synthdata.dump(train, test, out)
    print(f"wrote {len(train)} train / {len(test)} test samples ({', '.join(ds.modality_names)}) to {out}")


def cmd_stage(args) -> None:
    stage = STAGE_COMMANDS[args.command]
    cfg = _config(args)
    splits = _load_data(args.data, cfg)
    init = pipeline.load_checkpoint(args.init) if args.init else None
    out = _prepare_out(args.out, args.force)
    model, metrics = pipeline.run_stage(stage, cfg, splits, init)
    pipeline.save_checkpoint(model, out / "model.rlbd")
    pipeline.write_run_outputs(out, cfg, metrics, {"command": args.command, "data": args.data, "init": args.init,
                                                   "tag": model.tag})
    _write_config(out, cfg)
    _print_rows(metrics)


def cmd_run(args) -> None:
    cfg = _config(args)
    splits = _load_data(args.data, cfg)
    out = _prepare_out(args.out, args.force)
    model, metrics = pipeline.run_experiment(cfg, splits)
    pipeline.save_checkpoint(model, out / "model.rlbd")
    pipeline.write_run_outputs(out, cfg, metrics, {"command": "run", "data": args.data, "tag": model.tag})
    _write_config(out, cfg)
    _print_rows(metrics)


def cmd_eval(args) -> None:
    overrides = list(args.set or [])
    if args.epsilons:
        eps = [str(parse_epsilon(e)) for e in args.epsilons.split(",") if e.strip()]
        overrides.append("eval.epsilons=" + json.dumps(eps))
    cfg = parse_config(args.config, overrides)
    splits = _load_data(args.data, cfg)
    model = pipeline.load_checkpoint(args.ckpt)
    out = _prepare_out(args.out, args.force)
    metrics = pipeline.RunMetrics(run_id=cfg.config_hash()[:8], seed=cfg.seed, config_hash=cfg.config_hash())
    metrics.rows = pipeline.evaluate(model, pipeline.eval_set(cfg, splits), pipeline.eval_attacks(cfg), "eval", cfg)
    pipeline.write_run_outputs(out, cfg, metrics, {"command": "eval", "ckpt": args.ckpt, "data": args.data,
                                                   "tag": model.tag})
    _write_config(out, cfg)
    _print_rows(metrics)


def parse_axes(items: list[str]) -> dict[str, list]:
    axes: dict[str, list] = {}
    for item in items:
        name, values = parse_override(item)
        if isinstance(values, str):
            values = [parse_override(f"v={v}")[1] for v in values.split(",") if v.strip()]
        elif not isinstance(values, list):
            values = [values]
        if not values:
            raise UsageError(f"axis {name!r} has no values")
        axes[name] = values
    return axes


def cmd_ablate(args) -> None:
    cfg = _config(args)
    axes = parse_axes(args.axes)
    pipeline.expand_grid(cfg, axes)  # reject unknown variants before touching the output directory
    splits = _load_data(args.data, cfg) if args.data else None
    out = _prepare_out(args.out, args.force)
    cells = pipeline.run_ablation_grid(cfg, axes, splits=splits)
    text = pipeline.grid_csv(cells)
    pipeline.write_text_atomic(out / "metrics.csv", text)
    manifest = {
        "library": "rlbind", "version": __version__, "config": cfg.to_dict(), "axes": axes,
        "cells": [{"overrides": c.overrides, "config_hash": c.config.config_hash(), "error": c.error}
                  for c in cells],
    }
    pipeline.write_text_atomic(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    _write_config(out, cfg)
    failed = [c for c in cells if c.error]
    print(f"{len(cells) - len(failed)}/{len(cells)} cells completed; metrics in {out / 'metrics.csv'}")
    for c in failed:
        print(f"failed cell {c.overrides}: {c.error}")


def cmd_report(args) -> None:
    cmp = report.compare(args.runs)
    if args.csv:
        pipeline.write_text_atomic(Path(args.csv), report.to_csv(cmp))
    if args.gnuplot:
        pipeline.write_text_atomic(Path(args.gnuplot), report.to_gnuplot(cmp))
    sys.stdout.write(report.to_text(cmp))


# ----------------------------------------------------------------------
# parser
# ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rlbind", description="Adversarially robust cross-modal alignment at desk scale.")
    p.add_argument("--version", action="version", version=f"rlbind {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True, data=True, out=True):
        if config:
            sp.add_argument("--config", help="TOML experiment config")
            sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")
        if data:
            sp.add_argument("--data", help="dataset directory from gen-data (default: generate from config)")
        if out:
            sp.add_argument("--out", required=True, help="output directory")
            sp.add_argument("--force", action="store_true", help="overwrite an existing output directory")

    g = sub.add_parser("gen-data", help="generate and split a synthetic dataset")
    g.add_argument("--spec", help="TOML dataset spec: a [data] table or top-level data keys")
    g.add_argument("--seed", type=int, default=0)
    common(g, config=False, data=False)
    g.set_defaults(func=cmd_gen_data)

    for name in STAGE_COMMANDS:
        s = sub.add_parser(name, help=f"run {STAGE_COMMANDS[name]} and evaluate")
        common(s)
        s.add_argument("--init", help="checkpoint to start from (default: fresh model)")
        s.set_defaults(func=cmd_stage)

    r = sub.add_parser("run", help="run every enabled stage in order")
    common(r)
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="evaluate a checkpoint under attack")
    common(e)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--epsilons", help="comma-separated budgets, e.g. 2/255,4/255")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="run a Cartesian grid of config variants")
    common(a)
    a.add_argument("--axes", nargs="+", required=True, metavar="AXIS=V1,V2", help="e.g. scorer=dot,cosine alignment=l1,l2")
    a.set_defaults(func=cmd_ablate)

    rp = sub.add_parser("report", help="merge run directories into a comparison table")
    rp.add_argument("runs", nargs="+", help="run directories; the first is the baseline")
    rp.add_argument("--csv", help="also write the merged table as CSV")
    rp.add_argument("--gnuplot", help="also write a gnuplot data file")
    rp.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except KeyboardInterrupt:
        print("rlbind: error: Interrupted", file=sys.stderr)
        return 130
    except Exception as exc:  # noqa: BLE001 - every failure becomes one line
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"rlbind: error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0
