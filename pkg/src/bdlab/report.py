"""Cross-run comparison of metric CSVs (corruption statistics per arm)."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .metrics import CSV_COLUMNS, CorruptionReport, detect_corruption, read_metrics_csv, smooth3

TABLE_COLUMNS = (
    "arm",
    "seeds",
    "detected",
    "dip_depth_mean",
    "dip_depth_std",
    "trough_fidelity_mean",
    "trough_fidelity_std",
    "final_quality_mean",
    "final_quality_std",
)


@dataclass
class RunSeries:
    path: Path
    arm: str
    seed: int | None
    rows: list
    corruption: CorruptionReport = field(init=False)
    trough_fidelity: float = field(init=False)

    def analyse(self, threshold: float) -> None:
        self.corruption = detect_corruption(self.rows, threshold=threshold)
        self.trough_fidelity = float("nan")
        if self.corruption.detected:
            its = [r.iteration for r in self.rows]
            f = smooth3([r.fidelity for r in self.rows])
            self.trough_fidelity = float(f[its.index(self.corruption.trough_iteration)])

    @property
    def final_quality(self) -> float:
        return float(self.rows[-1].quality)


def _arm_of(csv_path: Path) -> tuple[str, int | None]:
    manifest = csv_path.parent / "manifest.json"
    if manifest.is_file():
        m = json.loads(manifest.read_text(encoding="utf-8"))
        arm = "bnn-on" if m.get("bnn") else "bnn-off"
        return arm, m.get("seed")
    return "unknown", None


def load_runs(paths, threshold: float = 0.05) -> list[RunSeries]:
    runs = []
    for p in paths:
        p = Path(p)
        arm, seed = _arm_of(p)
        run = RunSeries(p, arm, seed, read_metrics_csv(p))
        run.analyse(threshold)
        runs.append(run)
    return runs


def _mean_std(values) -> tuple[float, float]:
    v = np.asarray([x for x in values if not math.isnan(x)], dtype=np.float64)
    if v.size == 0:
        return float("nan"), float("nan")
    return float(v.mean()), float(v.std())


def comparison_table(runs: list[RunSeries]) -> list[dict]:
    """One row per arm; dip depth counts undetected runs as depth 0."""
    table = []
    for arm in sorted({r.arm for r in runs}):
        group = [r for r in runs if r.arm == arm]
        dm, ds = _mean_std([r.corruption.dip_depth for r in group])
        tm, ts = _mean_std([r.trough_fidelity for r in group])
        qm, qs = _mean_std([r.final_quality for r in group])
        table.append(
            {
                "arm": arm,
                "seeds": len(group),
                "detected": sum(r.corruption.detected for r in group),
                "dip_depth_mean": dm,
                "dip_depth_std": ds,
                "trough_fidelity_mean": tm,
                "trough_fidelity_std": ts,
                "final_quality_mean": qm,
                "final_quality_std": qs,
            }
        )
    return table


def write_table(path, table: list[dict]) -> Path:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TABLE_COLUMNS)
        for row in table:
            w.writerow([row[c] if isinstance(row[c], (str, int)) else repr(float(row[c])) for c in TABLE_COLUMNS])
    return path


def write_long(path, runs: list[RunSeries]) -> Path:
    """Plot-ready long format: run, arm, seed, iteration, metric, value."""
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("run", "arm", "seed", "iteration", "metric", "value"))
        for run in runs:
            seed = "" if run.seed is None else run.seed
            for row in run.rows:
                d = row.to_dict()
                for metric in CSV_COLUMNS[1:]:
                    w.writerow((str(run.path), run.arm, seed, row.iteration, metric, repr(float(d[metric]))))
    return path


def describe(run: RunSeries) -> str:
    c = run.corruption
    if not c.detected:
        return f"{run.path}: no corruption detected"
    return (
        f"{run.path}: corruption detected, peak {c.peak_iteration}, trough {c.trough_iteration}, "
        f"recovery {c.recovery_iteration}, dip depth {c.dip_depth:.4f}"
    )


def format_table(table: list[dict]) -> str:
    lines = [f"{'arm':<10} {'seeds':>5} {'detected':>8} {'dip depth':>17} {'trough fidelity':>17} {'final quality':>17}"]
    for row in table:
        lines.append(
            f"{row['arm']:<10} {row['seeds']:>5} {row['detected']:>8} "
            f"{row['dip_depth_mean']:>8.4f}+-{row['dip_depth_std']:<7.4f} "
            f"{row['trough_fidelity_mean']:>8.4f}+-{row['trough_fidelity_std']:<7.4f} "
            f"{row['final_quality_mean']:>8.4f}+-{row['final_quality_std']:<7.4f}"
        )
    return "\n".join(lines)
