"""CSV reporting and figures for training runs."""

from __future__ import annotations

import csv
from dataclasses import fields
from pathlib import Path

from .training import MetricsRow, RunMetrics

CSV_HEADER = ("lns_iteration", "m", "neighborhood", "env_steps", "eval_metric",
              "sampling_time_s", "updating_time_s", "cumulative_wall_s")
_INT_FIELDS = {"lns_iteration", "m", "env_steps"}


def _fmt(name: str, value) -> str:
    if name in _INT_FIELDS:
        return str(int(value))
    if name == "neighborhood":
        return str(value)
    return f"{float(value):.6g}"


def emit_csv(metrics: RunMetrics, path) -> None:
    """Write one row per LNS iteration under the fixed header."""
    path = Path(path)
    try:
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CSV_HEADER)
            for row in metrics.rows:
                writer.writerow([_fmt(name, getattr(row, name)) for name in CSV_HEADER])
    except OSError as err:
        raise OSError(f"cannot write metrics CSV to {path}: {err}") from err


def parse_csv(path) -> RunMetrics:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if tuple(header or ()) != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        rows = []
        for rec in reader:
            vals = dict(zip(CSV_HEADER, rec))
            kwargs = {}
            for f in fields(MetricsRow):
                raw = vals[f.name]
                kwargs[f.name] = int(raw) if f.name in _INT_FIELDS else \
                    raw if f.name == "neighborhood" else float(raw)
            rows.append(MetricsRow(**kwargs))
    out = RunMetrics(rows=rows)
    if rows:
        out.env_steps = rows[-1].env_steps
        out.eval_history = [r.eval_metric for r in rows]
    return out


def plot_run(metrics: RunMetrics, out_path, title: str | None = None) -> None:
    """Learning curve (metric vs env steps) beside a per-iteration time breakdown."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = metrics.rows
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    ax1.plot([r.env_steps for r in rows], [r.eval_metric for r in rows], marker="o")
    ax1.set_xlabel("environment steps")
    ax1.set_ylabel("evaluation metric")
    ax1.set_title("learning curve")
    it = [r.lns_iteration for r in rows]
    samp = [r.sampling_time_s for r in rows]
    upd = [r.updating_time_s for r in rows]
    ax2.bar(it, samp, label="sampling")
    ax2.bar(it, upd, bottom=samp, label="updating")
    ax2.set_xlabel("LNS iteration")
    ax2.set_ylabel("seconds")
    ax2.set_title("time breakdown")
    ax2.legend()
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)
