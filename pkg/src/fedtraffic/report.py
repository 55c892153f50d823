"""Delimited summaries and figure rendering for run outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .fedsim import RoundReport


def write_metrics_csv(reports: list[RoundReport], path) -> None:
    """Per-round, per-split metric table."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("round,split,mae,mape,rmse,n_evaluated,seconds\n")
        for rep in reports:
            for split, m in rep.metrics.items():
                fh.write(
                    f"{rep.round},{split},{m.mae:.6f},{m.mape:.6f},{m.rmse:.6f},"
                    f"{m.n_evaluated},{rep.seconds:.3f}\n"
                )


def plot_training(reports: list[RoundReport], path, title: str = "") -> None:
    """RMSE against round for each evaluated split."""
    rounds = [rep.round for rep in reports]
    fig, ax = plt.subplots(figsize=(6, 4))
    for split in reports[0].metrics:
        ax.plot(rounds, [rep.metrics[split].rmse for rep in reports],
                marker="o", label=split)
    ax.set_xlabel("round")
    ax.set_ylabel("RMSE")
    ax.set_xticks(rounds)
    if title:
        ax.set_title(title)
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def write_compare_csv(rows: list[dict], path) -> None:
    """Method comparison table; one row per aggregation strategy."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("method,val_rmse,test_rmse,test_mae,test_mape\n")
        for row in rows:
            fh.write(
                f"{row['method']},{row['val_rmse']:.6f},{row['test_rmse']:.6f},"
                f"{row['test_mae']:.6f},{row['test_mape']:.6f}\n"
            )


def plot_compare(rows: list[dict], path) -> None:
    """Bar chart of final test RMSE per method."""
    fig, ax = plt.subplots(figsize=(6, 4))
    methods = [row["method"] for row in rows]
    ax.bar(methods, [row["test_rmse"] for row in rows], color="#4878cf")
    ax.set_ylabel("final test RMSE")
    ax.tick_params(axis="x", rotation=20)
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
