"""Figure rendering for the report commands.

Every report-producing stage writes its delimited artifact first and then a
PNG next to it: score distributions after filtering, per-query metric
histograms after evaluation, and kept-vs-pool bars for the ablation table.
Rendering uses the Agg backend so headless runs work.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def save_score_histogram(
    values: list[float],
    path: str | Path,
    title: str,
    xlabel: str,
    bins: int = 30,
    bounds: tuple[float, float] | None = None,
) -> None:
    """Histogram of a score distribution; optional vertical margin bounds."""
    fig, ax = plt.subplots(figsize=(7, 4))
    if values:
        ax.hist(values, bins=bins, color="#4878a8", edgecolor="white")
    if bounds is not None:
        for x, label in zip(bounds, ("L", "H")):
            ax.axvline(x, color="#b03a2e", linestyle="--", linewidth=1)
            ax.text(x, ax.get_ylim()[1] * 0.95, label, color="#b03a2e", ha="center")
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("count")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_metric_histogram(per_query: dict[str, float], path: str | Path, title: str) -> None:
    save_score_histogram(
        list(per_query.values()), path, title=title, xlabel="per-query score", bins=20
    )


def save_ablation_bars(rows, path: str | Path) -> None:
    """Bar chart over pool sizes: kept counts, and nDCG@10 when present."""
    fig, ax = plt.subplots(figsize=(7, 4))
    labels = [str(r.pool_size) for r in rows]
    ndcgs = [r.ndcg10 for r in rows]
    if any(v is not None for v in ndcgs):
        ax.bar(labels, [v or 0.0 for v in ndcgs], color="#4878a8")
        ax.set_ylabel("nDCG@10")
    else:
        ax.bar(labels, [r.kept for r in rows], color="#4878a8")
        ax.set_ylabel("queries kept")
    ax.set_xlabel("generation pool size")
    ax.set_title("filter-ratio ablation")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
