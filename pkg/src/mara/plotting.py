"""Figures written next to the CLI's delimited output.

Everything renders through the Agg backend to files; nothing opens a window.
"""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from mara.qre import attention_entropy, softmax  # noqa: E402

DPI = 120


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return path


def fine_lattice(fine_weights, coarse_grid, fine_grid) -> np.ndarray:
    """Lay the flattened fine weights back out on the page's fine lattice."""
    cr, cc = coarse_grid
    fr, fc = fine_grid
    w = np.asarray(fine_weights, dtype=float).reshape(cr, cc, fr, fc)
    return w.transpose(0, 2, 1, 3).reshape(cr * fr, cc * fc)


def plot_attention(doc, coarse_grid, fine_grid, path, title: str | None = None) -> Path:
    """Coarse and fine attention heatmaps for one scored document."""
    coarse = np.asarray(doc.coarse_attention, dtype=float).reshape(coarse_grid)
    fine = fine_lattice(doc.fine_attention, coarse_grid, fine_grid)
    fig, axes = plt.subplots(1, 2, figsize=(7.5, 3.4))
    for ax, data, name in ((axes[0], coarse, "coarse"), (axes[1], fine, "fine")):
        im = ax.imshow(data, cmap="viridis", vmin=0.0, vmax=max(float(data.max()), 1e-12))
        ax.set_title(f"{name} (H={attention_entropy(data.ravel()):.2f})")
        ax.set_xticks([])
        ax.set_yticks([])
        fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
    g_c, g_f = doc.gates_used
    fig.suptitle(title or f"{doc.doc_id}  score={doc.score:.4f}  g_c={g_c:g} g_f={g_f:g}", fontsize=10)
    return _save(fig, path)


def plot_temperature_sweep(similarities: Sequence[float], inverse_temperatures: Sequence[float], path) -> Path:
    """Attention over one region set at several temperatures, one bar group per region."""
    sims = np.asarray(similarities, dtype=float)
    n = len(inverse_temperatures)
    width = 0.8 / n
    x = np.arange(len(sims))
    fig, ax = plt.subplots(figsize=(6.5, 3.4))
    for i, inv in enumerate(inverse_temperatures):
        alpha = softmax(sims * inv)
        ax.bar(x + (i - (n - 1) / 2) * width, alpha, width,
               label=f"1/tau={inv:g} (H={attention_entropy(alpha):.2f})")
    ax.set_xlabel("region")
    ax.set_ylabel("attention weight")
    ax.set_xticks(x)
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_metric_bars(reports: Mapping[str, Mapping], path, metrics=("mrr_at_k", "recall_at_k")) -> Path:
    """Grouped bars of aggregate metrics, one group per run (e.g. per ablation)."""
    labels = list(reports)
    x = np.arange(len(labels))
    width = 0.8 / len(metrics)
    fig, ax = plt.subplots(figsize=(1.6 * len(labels) + 2.5, 3.4))
    for i, metric in enumerate(metrics):
        vals = [reports[l].get(metric) or 0.0 for l in labels]
        ax.bar(x + (i - (len(metrics) - 1) / 2) * width, vals, width, label=metric)
    ax.set_xticks(x)
    ax.set_xticklabels(labels)
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_call_stats(stats: Mapping[str, Mapping], path) -> Path:
    labels = list(stats)
    vals = [stats[l]["avg_calls"] for l in labels]
    fig, ax = plt.subplots(figsize=(1.2 * len(labels) + 2.5, 3.2))
    bars = ax.bar(labels, vals, color="tab:gray")
    for bar, v in zip(bars, vals):
        ax.annotate(f"{v:.2f}", (bar.get_x() + bar.get_width() / 2, v), ha="center", va="bottom", fontsize=8)
    ax.set_ylabel("avg. calls per query")
    return _save(fig, path)
