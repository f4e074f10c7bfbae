"""CSV emission and static plot rendering.

Metric CSVs are append-only with the columns (epoch, split, head, metric,
value) behind a schema-version comment line. The report renderer is a pure
function of its input CSVs: re-running it produces identical tables.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402 - backend must be set first

METRICS_SCHEMA = "hmtl-metrics v1"
METRICS_HEADER = ("epoch", "split", "head", "metric", "value")
SWEEP_SCHEMA = "hmtl-sweep v1"
SWEEP_HEADER = ("epsilon", "n", "correct", "accuracy")


def append_metrics_csv(path, rows: Iterable[Tuple[int, str, str, str, float]]) -> Path:
    """Append (epoch, split, head, metric, value) rows, creating the file with
    its schema comment and header on first write."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fresh = not path.exists()
    with path.open("a", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        if fresh:
            fh.write(f"# {METRICS_SCHEMA}\n")
            writer.writerow(METRICS_HEADER)
        for epoch, split, head, metric, value in rows:
            writer.writerow([epoch, split, head, metric, repr(float(value))])
    return path


def read_metrics_csv(path) -> List[Dict[str, object]]:
    """Parse a metrics CSV back into row dicts with typed epoch/value."""
    rows: List[Dict[str, object]] = []
    with Path(path).open(newline="", encoding="utf-8") as fh:
        filtered = (line for line in fh if not line.startswith("#"))
        reader = csv.DictReader(filtered)
        if tuple(reader.fieldnames or ()) != METRICS_HEADER:
            raise ValueError(f"unexpected metrics header {reader.fieldnames} in {path}")
        for row in reader:
            rows.append(
                {
                    "epoch": int(row["epoch"]),
                    "split": row["split"],
                    "head": row["head"],
                    "metric": row["metric"],
                    "value": float(row["value"]),
                }
            )
    return rows


def write_sweep_csv(path, rows) -> Path:
    """Write an epsilon sweep as (epsilon, n, correct, accuracy) rows."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        fh.write(f"# {SWEEP_SCHEMA}\n")
        writer.writerow(SWEEP_HEADER)
        for row in rows:
            writer.writerow([repr(float(row.epsilon)), row.n, row.correct, repr(row.correct / row.n)])
    return path


def read_sweep_csv(path) -> List[Dict[str, float]]:
    rows: List[Dict[str, float]] = []
    with Path(path).open(newline="", encoding="utf-8") as fh:
        filtered = (line for line in fh if not line.startswith("#"))
        reader = csv.DictReader(filtered)
        if tuple(reader.fieldnames or ()) != SWEEP_HEADER:
            raise ValueError(f"unexpected sweep header {reader.fieldnames} in {path}")
        for row in reader:
            rows.append(
                {
                    "epsilon": float(row["epsilon"]),
                    "n": int(row["n"]),
                    "correct": int(row["correct"]),
                    "accuracy": float(row["accuracy"]),
                }
            )
    return rows


def _series(rows, split: str, head: str, metric: str) -> Tuple[List[int], List[float]]:
    pairs = [(r["epoch"], r["value"]) for r in rows if r["split"] == split and r["head"] == head and r["metric"] == metric]
    pairs.sort()
    return [p[0] for p in pairs], [p[1] for p in pairs]


def plot_training_curves(metrics_rows, out_png, title: str = "") -> Optional[Path]:
    """Render loss and supervised-accuracy curves from metrics rows."""
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))

    for split, style in (("train", "-"), ("val", "--")):
        epochs, values = _series(metrics_rows, split, "total", "loss")
        if not values and split == "val":
            continue
        if values:
            axes[0].plot(epochs, values, style, label=f"{split} loss")
    axes[0].set_xlabel("epoch")
    axes[0].set_ylabel("loss")
    axes[0].legend(loc="best")

    plotted = False
    for head in ("sl", "puzzle", "rotation"):
        for split, style in (("train", "-"), ("val", "--")):
            epochs, values = _series(metrics_rows, split, head, "accuracy")
            if values:
                axes[1].plot(epochs, values, style, label=f"{split} {head} acc")
                plotted = True
    if plotted:
        axes[1].set_xlabel("epoch")
        axes[1].set_ylabel("accuracy")
        axes[1].set_ylim(0.0, 1.02)
        axes[1].legend(loc="best")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    out = Path(out_png)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def plot_epsilon_sweep(named_sweeps: Dict[str, List[Dict[str, float]]], out_png) -> Path:
    """Accuracy-vs-epsilon comparison plot for one or more sweeps."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, rows in named_sweeps.items():
        eps = [r["epsilon"] for r in rows]
        acc = [r["accuracy"] for r in rows]
        ax.plot(eps, acc, marker="o", label=name)
    ax.set_xlabel("epsilon")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0.0, 1.02)
    ax.legend(loc="best")
    fig.tight_layout()
    out = Path(out_png)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def plot_run_comparison(named_metrics: Dict[str, list], out_png, metric: str = "accuracy") -> Optional[Path]:
    """Validation-metric curves of several runs on one axis."""
    fig, ax = plt.subplots(figsize=(6, 4))
    plotted = False
    for name, rows in named_metrics.items():
        epochs, values = _series(rows, "val", "sl", metric)
        if values:
            ax.plot(epochs, values, label=name)
            plotted = True
    if not plotted:
        plt.close(fig)
        return None
    ax.set_xlabel("epoch")
    ax.set_ylabel(f"val {metric}")
    ax.legend(loc="best")
    fig.tight_layout()
    out = Path(out_png)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def summarize_run(metrics_rows) -> Dict[str, float]:
    """Final and best validation values per metric from one metrics CSV."""
    summary: Dict[str, float] = {}
    heads = {(r["head"], r["metric"]) for r in metrics_rows if r["split"] == "val"}
    for head, metric in sorted(heads):
        epochs, values = _series(metrics_rows, "val", head, metric)
        if not values:
            continue
        key = f"{head}_{metric}" if head != "sl" else metric
        summary[f"final_{key}"] = values[-1]
        better = max if metric in ("accuracy", "macro_f1") else min
        summary[f"best_{key}"] = better(values)
    return summary


def write_summary_table(summaries: Dict[str, Dict[str, float]], out_csv) -> Path:
    """One row per run, union of summary columns, deterministically ordered."""
    out = Path(out_csv)
    out.parent.mkdir(parents=True, exist_ok=True)
    columns = sorted({key for s in summaries.values() for key in s})
    with out.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["run"] + columns)
        for name in sorted(summaries):
            row = [name] + [repr(summaries[name][c]) if c in summaries[name] else "" for c in columns]
            writer.writerow(row)
    return out


def render_report(run_dirs: Sequence, out_dir) -> Dict[str, Dict[str, float]]:
    """Render figures and a summary table from run directories.

    Each run directory may contain ``seed_*/metrics.csv`` files and
    ``sweep.csv``; the report holds one training-curve figure per seed, a
    cross-run comparison figure, an epsilon sweep figure when sweeps exist,
    and ``summary.csv``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summaries: Dict[str, Dict[str, float]] = {}
    comparison: Dict[str, list] = {}
    sweeps: Dict[str, List[Dict[str, float]]] = {}

    for run_dir in run_dirs:
        run_dir = Path(run_dir)
        run_name = run_dir.name
        for metrics_file in sorted(run_dir.glob("seed_*/metrics.csv")):
            seed_name = metrics_file.parent.name
            rows = read_metrics_csv(metrics_file)
            label = f"{run_name}/{seed_name}"
            summaries[label] = summarize_run(rows)
            comparison[label] = rows
            plot_training_curves(rows, out / f"curves_{run_name}_{seed_name}.png", title=label)
        sweep_file = run_dir / "sweep.csv"
        if sweep_file.exists():
            sweeps[run_name] = read_sweep_csv(sweep_file)

    if comparison:
        plot_run_comparison(comparison, out / "comparison.png")
    if sweeps:
        plot_epsilon_sweep(sweeps, out / "epsilon_accuracy.png")
    write_summary_table(summaries, out / "summary.csv")
    return summaries
