"""Regret reporting: raw/summary CSVs and the median + IQR plot."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from ..errors import FormatError, NothingToReportError

RAW_COLUMNS = ["method", "variant_id", "seed", "step", "x_json", "y",
               "y_best", "regret", "wall_time_ms"]
SUMMARY_COLUMNS = ["method", "step", "regret_p25", "regret_p50", "regret_p75",
                   "n_runs"]


def write_raw_csv(records, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RAW_COLUMNS)
        for r in records:
            writer.writerow([r.method, r.variant_id, r.seed, r.step,
                             json.dumps([float(v) for v in r.x]),
                             repr(float(r.y)), repr(float(r.y_best)),
                             repr(float(r.regret)), repr(float(r.wall_time_ms))])
    return path


def read_raw_csv(path):
    from .runner import RegretRecord
    records = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != RAW_COLUMNS:
            raise FormatError(f"{path}: unexpected raw CSV header {header}")
        for row in reader:
            records.append(RegretRecord(
                method=row[0], variant_id=row[1], seed=int(row[2]),
                step=int(row[3]), x=np.asarray(json.loads(row[4]), dtype=np.float64),
                y=float(row[5]), y_best=float(row[6]), regret=float(row[7]),
                wall_time_ms=float(row[8]), reward=np.nan))
    return records


def write_trajectory_log(records, path) -> Path:
    """Per-step environment log: variant, step, point, value, reward, best."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant_id", "step", "x_json", "y", "reward",
                         "best_so_far"])
        for r in records:
            writer.writerow([r.variant_id, r.step,
                             json.dumps([float(v) for v in r.x]),
                             repr(float(r.y)), repr(float(r.reward)),
                             repr(float(r.y_best))])
    return path


def summarize(records) -> list:
    """Per (method, step) regret percentiles across runs, linear interpolation."""
    if not records:
        raise NothingToReportError("no records to summarize")
    groups: dict = {}
    for r in records:
        groups.setdefault((r.method, r.step), []).append(float(r.regret))
    rows = []
    for (method, step) in sorted(groups):
        values = np.asarray(groups[(method, step)])
        p25, p50, p75 = np.percentile(values, [25, 50, 75])
        rows.append({"method": method, "step": step, "regret_p25": p25,
                     "regret_p50": p50, "regret_p75": p75,
                     "n_runs": len(values)})
    return rows


def write_summary_csv(rows, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SUMMARY_COLUMNS)
        for row in rows:
            writer.writerow([row["method"], row["step"], repr(row["regret_p25"]),
                             repr(row["regret_p50"]), repr(row["regret_p75"]),
                             row["n_runs"]])
    return path


def plot_summary_svg(rows, path) -> Path:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = Path(path)
    methods = sorted({row["method"] for row in rows})
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for method in methods:
        series = sorted((r for r in rows if r["method"] == method),
                        key=lambda r: r["step"])
        steps = [r["step"] for r in series]
        ax.plot(steps, [r["regret_p50"] for r in series], label=method)
        ax.fill_between(steps, [r["regret_p25"] for r in series],
                        [r["regret_p75"] for r in series], alpha=0.2)
    ax.set_xlabel("objective evaluations")
    ax.set_ylabel("regret (median, IQR band)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path


def emit_report(records, out_dir, make_plot: bool = True) -> dict:
    """Write raw records, the percentile summary, and optionally the plot."""
    if not records:
        raise NothingToReportError("no records to report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"raw": write_raw_csv(records, out_dir / "records_raw.csv")}
    rows = summarize(records)
    paths["summary"] = write_summary_csv(rows, out_dir / "summary.csv")
    if make_plot:
        paths["plot"] = plot_summary_svg(rows, out_dir / "regret.svg")
    return paths
