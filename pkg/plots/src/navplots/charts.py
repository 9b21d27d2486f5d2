"""Figure rendering: learning curves, attention heatmaps, progress curves."""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .frames import SchemaError, load_attention, load_centroids, load_stats, load_summary


def plot_learning_curves(stats_paths: Sequence, out_path,
                         labels: Optional[Sequence[str]] = None) -> Path:
    """Training loss and held-out path-weighted success vs iteration.

    Accepts several stats files and overlays them for run comparison.
    """
    if isinstance(stats_paths, (str, Path)):
        stats_paths = [stats_paths]
    if labels is None:
        labels = [Path(p).parent.name or Path(p).stem for p in stats_paths]
    if len(labels) != len(stats_paths):
        raise SchemaError("one label per stats file required")

    fig, (ax_loss, ax_spl) = plt.subplots(1, 2, figsize=(10, 4))
    for path, label in zip(stats_paths, labels):
        frame = load_stats(path)
        total = frame["loss_rl"] + frame["loss_il"] + frame["loss_critic"]
        ax_loss.plot(frame["iteration"], total, label=label, linewidth=1.0)
        ax_spl.plot(frame["iteration"], frame["val_SPL"], label=label, linewidth=1.2)
    ax_loss.set_xlabel("iteration")
    ax_loss.set_ylabel("training loss")
    ax_loss.legend(fontsize=8)
    ax_spl.set_xlabel("iteration")
    ax_spl.set_ylabel("validation SPL")
    ax_spl.set_ylim(0.0, 1.0)
    ax_spl.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return Path(out_path)


def attention_weight_matrix(dump_path, role: str = "language") -> np.ndarray:
    """Pivot one episode's dump into a [steps x positions] weight matrix."""
    frame = load_attention(dump_path)
    sub = frame[frame["token_role"] == role]
    if sub.empty:
        raise SchemaError(f"{dump_path}: no rows with token_role={role!r}")
    steps = sorted(sub["step"].unique())
    positions = sorted(sub["token_index"].unique())
    mat = np.zeros((len(steps), len(positions)))
    for _, row in sub.iterrows():
        mat[steps.index(row["step"]), positions.index(row["token_index"])] = \
            row["mean_weight"]
    return mat


def plot_attention_heatmap(dump_path, out_path, role: str = "language") -> Path:
    """Step-by-position mean attention weights for one episode."""
    mat = attention_weight_matrix(dump_path, role)
    fig, ax = plt.subplots(figsize=(6, 3.2))
    ax.imshow(mat, aspect="auto", cmap="viridis", interpolation="nearest")
    ax.set_xlabel(f"{role} token position")
    ax.set_ylabel("navigation step")
    ax.set_yticks(range(mat.shape[0]), [str(i + 1) for i in range(mat.shape[0])])
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return Path(out_path)


def plot_progress_centroid(centroid_path, out_path,
                           summary_path=None) -> Path:
    """Language-attention centroid vs step, one line per episode, with the
    mean rank correlation (read from the summary file, never recomputed)."""
    frame = load_centroids(centroid_path)
    fig, ax = plt.subplots(figsize=(6, 4))
    for episode, group in frame.groupby("episode"):
        ax.plot(group["step"], group["centroid"], alpha=0.35, linewidth=0.9)
    mean_line = frame.groupby("step")["centroid"].mean()
    ax.plot(mean_line.index, mean_line.values, color="black", linewidth=2.2,
            label="mean centroid")
    if summary_path is not None:
        summary = load_summary(summary_path)
        rho = summary["rho"].dropna()
        if len(rho):
            ax.annotate(f"mean Spearman rho = {rho.mean():.3f}",
                        xy=(0.03, 0.95), xycoords="axes fraction", fontsize=9,
                        va="top")
    ax.set_xlabel("navigation step")
    ax.set_ylabel("language attention centroid")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return Path(out_path)
