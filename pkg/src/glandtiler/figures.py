"""Report figures written alongside the delimited outputs.

Every CLI report path pairs its CSV with a rendered PNG: benchmark AUC
bars, the variance-ratio curve behind cluster-count selection, centroid
dendrograms, embedding scatters, contrastive-training loss curves, and the
cluster-vs-annotation agreement heatmap.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .maps import CLUSTER_PALETTE, diverging_color

_FIG_DPI = 120


def _save(fig, path: Path | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=_FIG_DPI)
    plt.close(fig)
    return path


def benchmark_auc_figure(rows: list[dict], path: Path | str) -> Path:
    """Mean test AUC with sd whiskers per (tiling, encoder, head) configuration."""
    groups: dict[str, list[float]] = {}
    for row in rows:
        key = f"{row['tiling_mode']}:{row['encoder_tag']}:{row['head']}"
        groups.setdefault(key, []).append(float(row["test_auc"]))
    names = sorted(groups)
    means = [float(np.nanmean(groups[n])) for n in names]
    sds = [float(np.nanstd(groups[n])) for n in names]
    fig, ax = plt.subplots(figsize=(7, 0.6 * len(names) + 1.6))
    y = np.arange(len(names))
    ax.barh(y, means, xerr=sds, color="#4878d0", height=0.6)
    ax.set_yticks(y, names)
    ax.set_xlabel("test AUC (mean over folds x repeats, sd whiskers)")
    ax.set_xlim(0.0, 1.05)
    ax.axvline(0.5, color="gray", linestyle=":", linewidth=1)
    fig.tight_layout()
    return _save(fig, path)


def variance_ratio_figure(variance_by_k: dict[int, dict], chosen_k: int, path: Path | str) -> Path:
    ks = sorted(variance_by_k)
    ch = [variance_by_k[k]["ch_index"] for k in ks]
    raw = [variance_by_k[k]["raw_ratio"] for k in ks]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.4))
    ax1.plot(ks, ch, marker="o", color="#4878d0")
    ax1.axvline(chosen_k, color="#d65f5f", linestyle="--", linewidth=1)
    ax1.set_xlabel("clusters")
    ax1.set_ylabel("variance-ratio index (normalized)")
    ax2.plot(ks, raw, marker="o", color="#6acc64")
    ax2.axvline(chosen_k, color="#d65f5f", linestyle="--", linewidth=1)
    ax2.set_xlabel("clusters")
    ax2.set_ylabel("between/within ratio (raw)")
    fig.tight_layout()
    return _save(fig, path)


def dendrogram_figure(dendrogram: dict, path: Path | str, title: str = "cluster centroids") -> Path:
    """Minimal dendrogram drawing from a merge list over k leaves."""
    merges = dendrogram["merges"]
    leaf_order = dendrogram["leaf_order"]
    k = len(leaf_order)
    xpos = {leaf - 1: float(i) for i, leaf in enumerate(leaf_order)}
    height_of = {i: 0.0 for i in range(k)}
    fig, ax = plt.subplots(figsize=(max(4.0, 0.5 * k + 1), 3.2))
    for m, (a, b, h, _) in enumerate(merges):
        xa, xb = xpos[a], xpos[b]
        ya, yb = height_of[a], height_of[b]
        ax.plot([xa, xa, xb, xb], [ya, h, h, yb], color="black", linewidth=1)
        xpos[k + m] = 0.5 * (xa + xb)
        height_of[k + m] = h
    ax.set_xticks(range(k), [str(leaf) for leaf in leaf_order])
    ax.set_xlabel("cluster")
    ax.set_ylabel("merge height")
    ax.set_title(title)
    fig.tight_layout()
    return _save(fig, path)


def embedding_scatter_figure(
    coords: np.ndarray,
    path: Path | str,
    cluster_labels: np.ndarray | None = None,
    scores: np.ndarray | None = None,
    title: str = "",
) -> Path:
    """2-D projection colored by cluster label or by signed evidence score."""
    fig, ax = plt.subplots(figsize=(5.2, 4.6))
    if cluster_labels is not None:
        colors = [
            tuple(c / 255 for c in CLUSTER_PALETTE[(int(l) - 1) % len(CLUSTER_PALETTE)])
            for l in cluster_labels
        ]
    elif scores is not None:
        colors = [tuple(c / 255 for c in diverging_color(float(s))) for s in scores]
    else:
        colors = "#4878d0"
    ax.scatter(coords[:, 0], coords[:, 1], s=10, c=colors, edgecolors="none")
    ax.set_xlabel("component 1")
    ax.set_ylabel("component 2")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    return _save(fig, path)


def training_history_figure(history: list[dict], path: Path | str) -> Path:
    epochs = [row["epoch"] for row in history]
    fig, ax = plt.subplots(figsize=(5.6, 3.4))
    if "train_loss" in history[0]:
        ax.plot(epochs, [row["train_loss"] for row in history], marker="o", label="train")
    if "val_loss" in history[0]:
        ax.plot(epochs, [row["val_loss"] for row in history], marker="s", label="validation")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)


def agreement_figure(agreement: dict, path: Path | str) -> Path:
    props = np.asarray(agreement["proportions"], dtype=np.float64)
    fig, ax = plt.subplots(figsize=(1.0 + 0.6 * props.shape[1], 0.8 + 0.4 * props.shape[0]))
    im = ax.imshow(props, vmin=0.0, vmax=1.0, cmap="viridis", aspect="auto")
    ax.set_xticks(range(len(agreement["regions"])), agreement["regions"], rotation=30, ha="right")
    ax.set_yticks(range(len(agreement["clusters"])), [str(c) for c in agreement["clusters"]])
    ax.set_xlabel("annotated region")
    ax.set_ylabel("cluster")
    fig.colorbar(im, ax=ax, label="row proportion")
    fig.tight_layout()
    return _save(fig, path)
