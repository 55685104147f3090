"""Figures written by the ``report`` command (PNG, Agg backend)."""

from __future__ import annotations

from collections import defaultdict
from typing import Mapping

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# Keep output byte-stable across runs.
_PNG_META = {"Software": None}


def _finish(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_PNG_META)
    plt.close(fig)


def plot_recall_curves(tables: Mapping[str, Mapping[int, float]], path, title: str = "") -> None:
    """Recall@N against N, one line per labelled run."""
    fig, ax = plt.subplots(figsize=(5.5, 4))
    for label, table in tables.items():
        ns = sorted(table)
        ax.plot(ns, [100 * table[n] for n in ns], marker="o", label=label)
    ax.set_xlabel("N - number of top database candidates")
    ax.set_ylabel("Recall@N (%)")
    ax.set_ylim(0, 100)
    ax.grid(alpha=0.3)
    if title:
        ax.set_title(title)
    ax.legend(fontsize=8)
    _finish(fig, path)


def plot_variance(rows: list[dict], path) -> None:
    """Per-dimension variance of the transformed fitting set, one line per alpha."""
    by_alpha = defaultdict(list)
    for r in rows:
        by_alpha[float(r["alpha"])].append((int(r["dim"]), float(r["variance"])))
    fig, ax = plt.subplots(figsize=(5.5, 4))
    for alpha in sorted(by_alpha):
        pts = sorted(by_alpha[alpha])
        ax.semilogy([d for d, _ in pts], [v for _, v in pts], label=f"alpha = {alpha:g}")
    ax.set_xlabel("dimension")
    ax.set_ylabel("variance")
    ax.grid(alpha=0.3, which="both")
    ax.legend(fontsize=8)
    _finish(fig, path)
