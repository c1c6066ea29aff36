"""Render accuracy/loss curves and grid comparison figures to files.

Used by the CLI report path: whenever metrics are written, companion PNGs
land next to the delimited output. Import of pyplot is kept behind the Agg
backend so headless runs work.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from fedkit.harness import MetricsRecord


def plot_metrics(records: list[MetricsRecord], out_path: str | Path) -> Path:
    """Accuracy and loss per round (or epoch), one line per experiment."""
    out_path = Path(out_path)
    by_experiment: dict[str, list[MetricsRecord]] = {}
    for r in records:
        by_experiment.setdefault(r.experiment, []).append(r)

    fig, (ax_acc, ax_loss) = plt.subplots(1, 2, figsize=(11, 4.2))
    for name, rows in by_experiment.items():
        rows = sorted(rows, key=lambda r: r.round_index)
        xs = [r.round_index for r in rows]
        ax_acc.plot(xs, [r.accuracy * 100 for r in rows], "o-", label=name, markersize=3.5)
        ax_loss.plot(xs, [r.loss for r in rows], "o-", label=name, markersize=3.5)
    ax_acc.set_xlabel("round / epoch")
    ax_acc.set_ylabel("test accuracy (%)")
    ax_acc.grid(alpha=0.3, linestyle="--")
    ax_loss.set_xlabel("round / epoch")
    ax_loss.set_ylabel("test loss")
    ax_loss.grid(alpha=0.3, linestyle="--")
    if len(by_experiment) <= 12:
        ax_acc.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path


def plot_grid_summary(summary: dict, out_path: str | Path) -> Path:
    """Measured vs reference accuracy bars for every grid cell."""
    out_path = Path(out_path)
    labels: list[str] = []
    measured: list[float] = []
    reference: list[float] = []

    for row_name, row in summary["accuracy_table"].items():
        for col_name, cell in row.items():
            labels.append(f"{row_name}\n{col_name}")
            measured.append(cell["accuracy"] or 0.0)
            reference.append(cell["reference"])
    labels.append("single\nclient")
    measured.append(summary["single_client"]["peak_accuracy"] or 0.0)
    reference.append(summary["single_client"]["reference"])
    for name, cell in summary["hostile"].items():
        labels.append(f"hostile\n{name}")
        measured.append(cell["accuracy"] or 0.0)
        reference.append(cell["reference"])

    x = range(len(labels))
    width = 0.38
    fig, ax = plt.subplots(figsize=(max(10, len(labels) * 0.9), 4.8))
    ax.bar([i - width / 2 for i in x], measured, width, label="measured", color="steelblue")
    ax.bar([i + width / 2 for i in x], reference, width, label="reference", color="lightgray")
    ax.set_xticks(list(x))
    ax.set_xticklabels(labels, fontsize=7)
    ax.set_ylabel("accuracy (%)")
    ax.set_ylim(70, 100)
    ax.grid(axis="y", alpha=0.3, linestyle="--")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=150)
    plt.close(fig)
    return out_path
