"""Hierarchical agglomerative clustering of gland embeddings.

The agglomeration is written out directly (Lance-Williams updates over a
condensed distance matrix) so the merge order and its lowest-index-pair
tie-break are fully specified. Cluster-count selection maximizes the
Calinski-Harabasz index by default; the raw between/within ratio is also
reported and can be selected instead.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

WARD = "ward"
LINKAGES = ("ward", "single", "complete", "average")
DEFAULT_K_RANGE = range(2, 21)
DEFAULT_KNN = 3


class KTooLarge(ValueError):
    """Requested more clusters than there are points."""


class EmptyTrainingSet(ValueError):
    """kNN classification requires at least one labeled vector."""


@dataclass
class ClusterModel:
    """Fitted agglomeration: merge list, chosen k, labels, and centroids."""

    linkage: str
    merges: list[tuple[int, int, float, int]]  # (node_a, node_b, height, new_size)
    k: int
    labels: np.ndarray  # (n,) int, values 1..k
    centroids: np.ndarray  # (k, dim)
    vectors: np.ndarray  # (n, dim) the clustered vectors
    variance_by_k: dict[int, dict[str, float]]  # per candidate k during selection


def _initial_distances(vectors: np.ndarray, linkage: str) -> np.ndarray:
    diff = vectors[:, None, :] - vectors[None, :, :]
    sq = np.sum(diff * diff, axis=2)
    if linkage == WARD:
        # merge cost for singletons: half the squared distance
        return 0.5 * sq
    return np.sqrt(sq)


def _lance_williams(
    linkage: str,
    d_ik: np.ndarray,
    d_jk: np.ndarray,
    d_ij: float,
    n_i: int,
    n_j: int,
    n_k: np.ndarray,
) -> np.ndarray:
    if linkage == "single":
        return np.minimum(d_ik, d_jk)
    if linkage == "complete":
        return np.maximum(d_ik, d_jk)
    if linkage == "average":
        return (n_i * d_ik + n_j * d_jk) / (n_i + n_j)
    # ward
    total = n_i + n_j + n_k
    return ((n_i + n_k) * d_ik + (n_j + n_k) * d_jk - n_k * d_ij) / total


def linkage_tree(vectors: np.ndarray, linkage: str = WARD) -> list[tuple[int, int, float, int]]:
    """Full merge list. Nodes 0..n-1 are leaves; merge m creates node n+m.

    Ties on the minimum merge distance resolve to the lowest (i, j) pair in
    row-major order over i < j.
    """
    if linkage not in LINKAGES:
        raise ValueError(f"linkage must be one of {LINKAGES}")
    vectors = np.asarray(vectors, dtype=np.float64)
    n = vectors.shape[0]
    if n == 0:
        return []
    dist = _initial_distances(vectors, linkage)
    np.fill_diagonal(dist, np.inf)
    sizes = {i: 1 for i in range(n)}
    node_of = list(range(n))
    merges: list[tuple[int, int, float, int]] = []
    alive = np.ones(n, dtype=bool)
    for step in range(n - 1):
        # first row-major minimum in the symmetric matrix is the lowest (i, j)
        flat = int(np.argmin(dist))
        i, j = divmod(flat, n)
        if i > j:
            i, j = j, i
        height = float(dist[i, j])
        node_i, node_j = node_of[i], node_of[j]
        new_node = n + step
        new_size = sizes[node_i] + sizes[node_j]
        merges.append((node_i, node_j, height, new_size))

        alive[j] = False
        others = np.flatnonzero(alive)
        others = others[others != i]
        if others.size:
            n_k = np.array([sizes[node_of[o]] for o in others], dtype=np.float64)
            updated = _lance_williams(
                linkage, dist[i, others], dist[j, others], height,
                sizes[node_i], sizes[node_j], n_k,
            )
            dist[i, others] = updated
            dist[others, i] = updated
        dist[j, :] = np.inf
        dist[:, j] = np.inf
        node_of[i] = new_node
        sizes[new_node] = new_size
    return merges


def cut_tree(merges: list[tuple[int, int, float, int]], n: int, k: int) -> np.ndarray:
    """Labels 1..k from the first n-k merges, numbered by first leaf occurrence."""
    if not 1 <= k <= n:
        raise KTooLarge(f"k={k} outside 1..{n}")
    parent = list(range(n + len(merges)))

    def find(a: int) -> int:
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for m, (a, b, _, _) in enumerate(merges[: n - k]):
        node = n + m
        parent[find(a)] = node
        parent[find(b)] = node
    roots = [find(i) for i in range(n)]
    labels = np.zeros(n, dtype=np.int64)
    next_label = 0
    seen: dict[int, int] = {}
    for i, r in enumerate(roots):
        if r not in seen:
            next_label += 1
            seen[r] = next_label
        labels[i] = seen[r]
    return labels


def variance_ratio(vectors: np.ndarray, labels: np.ndarray) -> tuple[float, float, float]:
    """Between-cluster and within-cluster dispersion plus the CH index.

    between = sum_k n_k ||mu_k - mu||^2, within = sum_k sum_i ||x_i - mu_k||^2,
    ch = (between / (k-1)) / (within / (n-k)). A zero within-dispersion over
    at least two clusters reports +inf.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    labels = np.asarray(labels)
    n = vectors.shape[0]
    uniq = np.unique(labels)
    k = uniq.size
    mu = vectors.mean(axis=0)
    between = 0.0
    within = 0.0
    for lab in uniq:
        rows = vectors[labels == lab]
        mu_k = rows.mean(axis=0)
        between += rows.shape[0] * float(np.sum((mu_k - mu) ** 2))
        within += float(np.sum((rows - mu_k) ** 2))
    if k < 2:
        return between, within, float("nan")
    if within == 0.0:
        return between, within, float("inf")
    return between, within, (between / (k - 1)) / (within / (n - k))


def hac_fit(
    vectors: np.ndarray,
    k: int,
    linkage: str = WARD,
    k_range: range | None = None,
) -> ClusterModel:
    """Cluster vectors and cut the dendrogram at k clusters."""
    vectors = np.asarray(vectors, dtype=np.float64)
    if not np.all(np.isfinite(vectors)):
        raise ValueError("vectors must be finite")
    n = vectors.shape[0]
    if k > n:
        raise KTooLarge(f"k={k} exceeds n={n}")
    merges = linkage_tree(vectors, linkage)
    labels = cut_tree(merges, n, k)
    centroids = np.stack([vectors[labels == lab].mean(axis=0) for lab in range(1, k + 1)])
    report = {}
    for candidate in k_range or ():
        if candidate <= n:
            cand_labels = cut_tree(merges, n, candidate)
            b, w, ch = variance_ratio(vectors, cand_labels)
            report[candidate] = {
                "between": b,
                "within": w,
                "ch_index": ch,
                "raw_ratio": float("inf") if w == 0.0 else b / w,
            }
    return ClusterModel(
        linkage=linkage,
        merges=merges,
        k=k,
        labels=labels,
        centroids=centroids,
        vectors=vectors,
        variance_by_k=report,
    )


def select_cluster_count(
    vectors: np.ndarray,
    k_range: range = DEFAULT_K_RANGE,
    linkage: str = WARD,
    criterion: str = "ch_index",
) -> tuple[int, ClusterModel]:
    """Pick the k maximizing the selection criterion; ties go to the smallest k.

    ``criterion`` is "ch_index" (default) or "raw_ratio"; the raw ratio grows
    with k, which is why the normalized index is the default.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    n = vectors.shape[0]
    ks = [k for k in k_range]
    if not ks or n <= max(ks):
        raise KTooLarge(f"need n > {max(ks) if ks else 0} points, got {n}")
    model = hac_fit(vectors, k=ks[0], linkage=linkage, k_range=range(min(ks), max(ks) + 1))
    best_k, best_value = None, -np.inf
    for k in ks:
        value = model.variance_by_k[k][criterion]
        if value > best_value:
            best_k, best_value = k, value
    chosen = hac_fit(vectors, k=best_k, linkage=linkage, k_range=range(min(ks), max(ks) + 1))
    return best_k, chosen


def centroid_dendrogram(model: ClusterModel, linkage: str = WARD) -> dict:
    """HAC over cluster centroids; leaf order is the left-to-right tree walk.

    Leaves are cluster labels 1..k.
    """
    if model.k < 2:
        raise ValueError("need at least 2 clusters for a centroid dendrogram")
    merges = linkage_tree(model.centroids, linkage)
    k = model.k
    children: dict[int, tuple[int, int]] = {}
    for m, (a, b, _, _) in enumerate(merges):
        children[k + m] = (a, b)

    def walk(node: int) -> list[int]:
        if node < k:
            return [node + 1]
        a, b = children[node]
        return walk(a) + walk(b)

    root = k + len(merges) - 1 if merges else 0
    return {
        "merges": [[a, b, h, s] for a, b, h, s in merges],
        "leaf_order": walk(root),
    }


def knn_classify(
    train_vectors: np.ndarray,
    train_labels: np.ndarray,
    query: np.ndarray,
    k: int = DEFAULT_KNN,
) -> int:
    """Majority vote among the k nearest training vectors (Euclidean).

    A tied vote falls back to the single nearest neighbor's label. Distance
    ties resolve to the lower index.
    """
    train_vectors = np.asarray(train_vectors, dtype=np.float64)
    train_labels = np.asarray(train_labels)
    if train_vectors.shape[0] == 0:
        raise EmptyTrainingSet("no training vectors")
    dist = np.linalg.norm(train_vectors - np.asarray(query, dtype=np.float64), axis=1)
    order = np.argsort(dist, kind="stable")
    nearest = order[: min(k, order.size)]
    votes: dict[int, int] = {}
    for idx in nearest:
        lab = int(train_labels[idx])
        votes[lab] = votes.get(lab, 0) + 1
    top = max(votes.values())
    winners = [lab for lab, c in votes.items() if c == top]
    if len(winners) == 1:
        return winners[0]
    return int(train_labels[nearest[0]])


def project_2d(vectors: np.ndarray) -> np.ndarray:
    """Top-2 principal-component coordinates with a deterministic sign.

    Each axis is flipped so its largest-magnitude loading is positive.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.shape[0] < 2:
        raise ValueError("need at least 2 vectors")
    centered = vectors - vectors.mean(axis=0)
    cov = centered.T @ centered / max(1, vectors.shape[0] - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1][:2]
    axes = eigvecs[:, order]
    if axes.shape[1] < 2:  # single-feature input
        axes = np.pad(axes, ((0, 0), (0, 2 - axes.shape[1])))
    for c in range(2):
        pivot = int(np.argmax(np.abs(axes[:, c])))
        if axes[pivot, c] < 0:
            axes[:, c] = -axes[:, c]
    return centered @ axes


def annotation_agreement(
    labels: np.ndarray, regions: list[str]
) -> dict:
    """Contingency of cluster labels against region annotations.

    Returns counts, row-normalized proportions, and each cluster's majority
    region (count ties break lexicographically).
    """
    labels = np.asarray(labels)
    if labels.shape[0] != len(regions):
        raise ValueError("labels and regions must align")
    cluster_values = sorted(int(v) for v in np.unique(labels))
    region_values = sorted(set(regions))
    counts = np.zeros((len(cluster_values), len(region_values)), dtype=np.int64)
    r_index = {r: i for i, r in enumerate(region_values)}
    c_index = {c: i for i, c in enumerate(cluster_values)}
    for lab, reg in zip(labels, regions):
        counts[c_index[int(lab)], r_index[reg]] += 1
    row_sums = counts.sum(axis=1, keepdims=True)
    proportions = np.where(row_sums > 0, counts / np.maximum(row_sums, 1), 0.0)
    majority = {}
    for c in cluster_values:
        row = counts[c_index[c]]
        top = row.max()
        majority[c] = next(r for r in region_values if row[r_index[r]] == top)
    return {
        "clusters": cluster_values,
        "regions": region_values,
        "counts": counts,
        "proportions": proportions,
        "majority_region": majority,
    }


# ---------------------------------------------------------------------------
# Exports: cluster assignments as CSV, dendrogram as a JSON merge list.
# ---------------------------------------------------------------------------


def write_assignments(
    path: Path | str, slide_ids: list[str], gland_ids: list[int], labels: np.ndarray
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["slide_id", "gland_id", "cluster"])
        for sid, gid, lab in zip(slide_ids, gland_ids, labels):
            writer.writerow([sid, gid, int(lab)])
    return path


def write_dendrogram(path: Path | str, dendrogram: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(dendrogram, sort_keys=True))
    return path
