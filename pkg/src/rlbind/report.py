"""Merge metrics.csv files from several run directories into one comparison table.

The first run is the baseline; every later run gets clean/robust deltas
against it.  Rows are joined on (stage, modality, scorer, alignment, lora,
lambda, epsilon); rows that share a key inside one run (different seeds of a
grid) are averaged.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

from .pipeline import CSV_HEADER

KEY_COLUMNS = ["stage", "modality", "scorer", "alignment", "lora", "lambda", "epsilon"]
METRICS = ["clean_acc", "robust_acc"]


class ReportError(ValueError):
    pass


@dataclass
class RunTable:
    label: str
    values: dict[tuple, dict[str, float]]  # key -> metric -> value in [0, 1]


@dataclass
class Comparison:
    runs: list[RunTable]
    keys: list[tuple] = field(default_factory=list)

    @property
    def has_deltas(self) -> bool:
        return len(self.runs) > 1

    def value(self, run: int, key: tuple, metric: str) -> float | None:
        return self.runs[run].values.get(key, {}).get(metric)

    def delta(self, run: int, key: tuple, metric: str) -> float | None:
        base, cur = self.value(0, key, metric), self.value(run, key, metric)
        if base is None or cur is None:
            return None
        return cur - base


def read_metrics(path: str | Path) -> list[dict[str, str]]:
    path = Path(path)
    if path.is_dir():
        path = path / "metrics.csv"
    if not path.exists():
        raise ReportError(f"{path}: no metrics.csv")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CSV_HEADER:
            raise ReportError(f"{path}: schema mismatch; expected header {','.join(CSV_HEADER)}, got {header}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(CSV_HEADER):
                raise ReportError(f"{path}:{lineno}: expected {len(CSV_HEADER)} fields, got {len(row)}")
            rows.append(dict(zip(CSV_HEADER, row)))
    return rows


def _table(label: str, rows: list[dict[str, str]]) -> RunTable:
    sums: dict[tuple, dict[str, Fraction]] = {}
    counts: dict[tuple, int] = {}
    for r in rows:
        key = tuple(r[k] for k in KEY_COLUMNS)
        acc = sums.setdefault(key, {m: Fraction(0) for m in METRICS})
        for m in METRICS:
            acc[m] += Fraction(r[m])
        counts[key] = counts.get(key, 0) + 1
    return RunTable(label, {k: {m: float(v / counts[k]) for m, v in acc.items()} for k, acc in sums.items()})


def _labels(dirs: list[Path]) -> list[str]:
    labels, seen = [], {}
    for d in dirs:
        name = d.name or str(d)
        seen[name] = seen.get(name, 0) + 1
        labels.append(name if seen[name] == 1 else f"{name}#{seen[name]}")
    return labels


def compare(run_dirs: list[str | Path]) -> Comparison:
    if not run_dirs:
        raise ReportError("report needs at least one run directory")
    dirs = [Path(d) for d in run_dirs]
    runs = [_table(label, read_metrics(d)) for label, d in zip(_labels(dirs), dirs)]
    keys: list[tuple] = []
    for run in runs:
        keys += [k for k in run.values if k not in keys]
    return Comparison(runs, keys)


def _fmt(v: float | None) -> str:
    return "" if v is None else f"{v:.6f}"


def to_csv(cmp: Comparison) -> str:
    header = list(KEY_COLUMNS)
    for i, run in enumerate(cmp.runs):
        header += [f"{run.label}:{m}" for m in METRICS]
        if i > 0:
            header += [f"{run.label}:{m}_delta" for m in METRICS]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for key in cmp.keys:
        row = list(key)
        for i in range(len(cmp.runs)):
            row += [_fmt(cmp.value(i, key, m)) for m in METRICS]
            if i > 0:
                row += [_fmt(cmp.delta(i, key, m)) for m in METRICS]
        w.writerow(row)
    return buf.getvalue()


def _pct(v: float | None) -> str:
    return "-" if v is None else f"{100 * v:.2f}"


def _arrow(d: float | None) -> str:
    if d is None:
        return "-"
    pts = round(100 * d, 2)
    if pts > 0:
        return f"↑{pts:.2f}"
    if pts < 0:
        return f"↓{-pts:.2f}"
    return "0.00"


def to_text(cmp: Comparison) -> str:
    """Aligned table with percentages and arrow deltas."""
    header = ["stage", "modality", "scorer", "alignment", "lora", "lambda", "eps"]
    for i, run in enumerate(cmp.runs):
        header += [f"{run.label} clean", f"{run.label} robust"]
        if i > 0:
            header += ["Δclean", "Δrobust"]
    body = []
    for key in cmp.keys:
        row = list(key)
        for i in range(len(cmp.runs)):
            row += [_pct(cmp.value(i, key, m)) for m in METRICS]
            if i > 0:
                row += [_arrow(cmp.delta(i, key, m)) for m in METRICS]
        body.append(row)
    widths = [max(len(str(r[c])) for r in [header] + body) for c in range(len(header))]
    lines = ["  ".join(str(cell).ljust(w) for cell, w in zip(r, widths)).rstrip() for r in [header] + body]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def to_gnuplot(cmp: Comparison) -> str:
    """Whitespace-separated data file: one block per run, rows indexed by table position."""
    out = ["# index stage modality epsilon clean_acc robust_acc"]
    for run in cmp.runs:
        out.append(f"# run {run.label}")
        for i, key in enumerate(cmp.keys):
            vals = run.values.get(key)
            if vals is None:
                continue
            stage, modality, *_, eps = key
            out.append(f"{i} {stage} {modality} {eps} {vals['clean_acc']:.6f} {vals['robust_acc']:.6f}")
        out += ["", ""]
    return "\n".join(out)
