"""Triplet-loss metric learning on a projection head over stored embeddings.

A two-layer head (512 -> 256 -> 128, tanh between, L2-normalized output)
is trained with batch-hard mining: per anchor, the farthest same-gland view
and the nearest other-gland row within the batch. Inputs are standardized
per feature with statistics from the training split. Gradients are written
out by hand and checked against central finite differences in the tests.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .embeddings import EmbeddingStore

DEFAULT_MARGIN = 0.75
DEFAULT_PROJECTION_DIM = 128
DEFAULT_HIDDEN_DIM = 256
DEFAULT_BATCH_SIZE = 128
# plain SGD on the unit-sphere output tolerates large steps; smaller rates
# cannot move the head within the few epochs the checkpoint schedule covers
DEFAULT_LEARN_RATE = 0.1
CHECKPOINT_EPOCHS = (1, 3, 5, 25)
CHECKPOINT_VERSION = 1


class DegenerateBatch(ValueError):
    """Batch cannot form any anchor-positive-negative triplet."""


class EmptySplit(ValueError):
    """A train/validation/test split received no glands."""


class DimMismatch(ValueError):
    """Store dimension differs from the head's input dimension."""


@dataclass
class ProjectionHead:
    """Two affine layers with tanh between; outputs are unit-normalized."""

    weights_1: np.ndarray  # (hidden, in_dim)
    bias_1: np.ndarray  # (hidden,)
    weights_2: np.ndarray  # (out_dim, hidden)
    bias_2: np.ndarray  # (out_dim,)
    feature_mean: np.ndarray  # (in_dim,)
    feature_std: np.ndarray  # (in_dim,)
    margin: float = DEFAULT_MARGIN
    seed: int = 0

    @property
    def in_dim(self) -> int:
        return self.weights_1.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights_2.shape[0]

    def parameters(self) -> dict[str, np.ndarray]:
        return {
            "weights_1": self.weights_1,
            "bias_1": self.bias_1,
            "weights_2": self.weights_2,
            "bias_2": self.bias_2,
        }

    def copy(self) -> "ProjectionHead":
        return ProjectionHead(
            weights_1=self.weights_1.copy(),
            bias_1=self.bias_1.copy(),
            weights_2=self.weights_2.copy(),
            bias_2=self.bias_2.copy(),
            feature_mean=self.feature_mean.copy(),
            feature_std=self.feature_std.copy(),
            margin=self.margin,
            seed=self.seed,
        )


def init_head(
    in_dim: int = 512,
    hidden_dim: int = DEFAULT_HIDDEN_DIM,
    out_dim: int = DEFAULT_PROJECTION_DIM,
    margin: float = DEFAULT_MARGIN,
    seed: int = 0,
) -> ProjectionHead:
    rng = np.random.default_rng(seed)
    return ProjectionHead(
        weights_1=rng.normal(0.0, 1.0 / np.sqrt(in_dim), (hidden_dim, in_dim)),
        bias_1=np.zeros(hidden_dim),
        weights_2=rng.normal(0.0, 1.0 / np.sqrt(hidden_dim), (out_dim, hidden_dim)),
        bias_2=np.zeros(out_dim),
        feature_mean=np.zeros(in_dim),
        feature_std=np.ones(in_dim),
        margin=margin,
        seed=seed,
    )


def fit_standardization(head: ProjectionHead, train_rows: np.ndarray, eps: float = 1e-8) -> None:
    """Set per-feature standardization from training-split statistics."""
    head.feature_mean = train_rows.mean(axis=0)
    head.feature_std = np.maximum(train_rows.std(axis=0), eps)


def _forward(head: ProjectionHead, x: np.ndarray) -> dict[str, np.ndarray]:
    z = (x - head.feature_mean) / head.feature_std
    h = np.tanh(z @ head.weights_1.T + head.bias_1)
    u = h @ head.weights_2.T + head.bias_2
    norms = np.linalg.norm(u, axis=1, keepdims=True)
    return {"z": z, "h": h, "u": u, "norms": norms, "p": u / norms}


def project(head: ProjectionHead, x: np.ndarray) -> np.ndarray:
    """Unit-normalized projections, one row per input row."""
    if x.shape[1] != head.in_dim:
        raise DimMismatch(f"input dim {x.shape[1]} != head dim {head.in_dim}")
    return _forward(head, np.asarray(x, dtype=np.float64))["p"]


def project_embeddings(head: ProjectionHead, store: EmbeddingStore) -> EmbeddingStore:
    """Project a whole store; the encoder tag records the refinement."""
    if store.dim != head.in_dim:
        raise DimMismatch(f"store dim {store.dim} != head dim {head.in_dim}")
    projected = project(head, store.matrix.astype(np.float64))
    return EmbeddingStore(
        slide_id=store.slide_id,
        encoder_tag=f"{store.encoder_tag}+proj{head.out_dim}",
        matrix=projected.astype(np.float32),
        gland_ids=list(store.gland_ids),
        bboxes=list(store.bboxes),
    )


def triplet_loss(d_ap: float, d_an: float, margin: float = DEFAULT_MARGIN) -> float:
    """Hinge on the distance gap: max(0, d_ap - d_an + margin)."""
    return max(0.0, d_ap - d_an + margin)


def pairwise_distances(p: np.ndarray) -> np.ndarray:
    """Euclidean distance matrix between projection rows."""
    sq = np.sum(p * p, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (p @ p.T)
    return np.sqrt(np.maximum(d2, 0.0))


def mine_batch_hard(projections: np.ndarray, gland_ids: np.ndarray) -> np.ndarray:
    """Hardest positive and hardest negative per anchor.

    Returns an (n_triplets, 3) index array of (anchor, positive, negative).
    Anchors whose gland has no other view in the batch are skipped; a batch
    where no triplet can be formed raises :class:`DegenerateBatch`.
    """
    gland_ids = np.asarray(gland_ids)
    if np.unique(gland_ids).size < 2:
        raise DegenerateBatch("batch holds a single gland id")
    dist = pairwise_distances(projections)
    n = dist.shape[0]
    same = gland_ids[:, None] == gland_ids[None, :]
    pos_mask = same & ~np.eye(n, dtype=bool)
    neg_mask = ~same
    triplets = []
    for i in range(n):
        if not pos_mask[i].any():
            continue
        pos_d = np.where(pos_mask[i], dist[i], -np.inf)
        neg_d = np.where(neg_mask[i], dist[i], np.inf)
        triplets.append((i, int(np.argmax(pos_d)), int(np.argmin(neg_d))))
    if not triplets:
        raise DegenerateBatch("no anchor has a positive view in this batch")
    return np.asarray(triplets, dtype=np.int64)


def loss_and_gradients(
    head: ProjectionHead, x: np.ndarray, triplets: np.ndarray
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean triplet loss over fixed triplets plus gradients for every parameter."""
    cache = _forward(head, np.asarray(x, dtype=np.float64))
    p = cache["p"]
    a, pos, neg = triplets[:, 0], triplets[:, 1], triplets[:, 2]
    diff_ap = p[a] - p[pos]
    diff_an = p[a] - p[neg]
    d_ap = np.linalg.norm(diff_ap, axis=1)
    d_an = np.linalg.norm(diff_an, axis=1)
    slack = d_ap - d_an + head.margin
    active = slack > 0.0
    loss = float(np.mean(np.maximum(slack, 0.0)))

    grad_p = np.zeros_like(p)
    scale = 1.0 / triplets.shape[0]
    for t in np.flatnonzero(active):
        u_ap = diff_ap[t] / d_ap[t]
        u_an = diff_an[t] / d_an[t]
        grad_p[a[t]] += scale * (u_ap - u_an)
        grad_p[pos[t]] -= scale * u_ap
        grad_p[neg[t]] += scale * u_an

    # back through L2 normalization: du = (gp - p (p . gp)) / ||u||
    dots = np.sum(p * grad_p, axis=1, keepdims=True)
    grad_u = (grad_p - p * dots) / cache["norms"]
    h = cache["h"]
    grads = {
        "weights_2": grad_u.T @ h,
        "bias_2": grad_u.sum(axis=0),
    }
    grad_h = grad_u @ head.weights_2
    grad_pre = grad_h * (1.0 - h * h)
    grads["weights_1"] = grad_pre.T @ cache["z"]
    grads["bias_1"] = grad_pre.sum(axis=0)
    return loss, grads


def batch_loss(head: ProjectionHead, x: np.ndarray, gland_ids: np.ndarray) -> float:
    """Mine batch-hard triplets and evaluate the mean loss (no gradients)."""
    p = project(head, x)
    triplets = mine_batch_hard(p, gland_ids)
    d_ap = np.linalg.norm(p[triplets[:, 0]] - p[triplets[:, 1]], axis=1)
    d_an = np.linalg.norm(p[triplets[:, 0]] - p[triplets[:, 2]], axis=1)
    return float(np.mean(np.maximum(d_ap - d_an + head.margin, 0.0)))


@dataclass
class Checkpoint:
    epoch: int
    head: ProjectionHead
    val_loss: float


@dataclass
class TrainingResult:
    head: ProjectionHead
    checkpoints: list[Checkpoint]
    history: list[dict]  # per epoch: {"epoch", "train_loss", "val_loss"}
    split: dict[str, np.ndarray]  # gland-id arrays per split name


def split_glands(
    gland_ids: np.ndarray, seed: int, fractions: tuple[float, float, float] = (0.7, 0.2, 0.1)
) -> dict[str, np.ndarray]:
    """Shuffle unique gland ids and cut 70-20-10 into train/val/test."""
    unique = np.unique(gland_ids)
    rng = np.random.default_rng(seed)
    order = rng.permutation(unique)
    n = unique.size
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    split = {
        "train": np.sort(order[:n_train]),
        "val": np.sort(order[n_train : n_train + n_val]),
        "test": np.sort(order[n_train + n_val :]),
    }
    for name, ids in split.items():
        if ids.size == 0:
            raise EmptySplit(f"{name} split received no glands")
    return split


def _gland_batches(
    gland_ids: np.ndarray, ids_in_split: np.ndarray, batch_size: int, rng: np.random.Generator
) -> list[np.ndarray]:
    """Row-index batches that keep every view of a gland together."""
    rows_by_gland = {g: np.flatnonzero(gland_ids == g) for g in ids_in_split}
    order = rng.permutation(ids_in_split)
    batches, current, count = [], [], 0
    for g in order:
        rows = rows_by_gland[g]
        if count + rows.size > batch_size and len(current) >= 2:
            batches.append(np.concatenate([rows_by_gland[x] for x in current]))
            current, count = [], 0
        current.append(g)
        count += rows.size
    if len(current) >= 2:
        batches.append(np.concatenate([rows_by_gland[x] for x in current]))
    return batches


def train_projection_head(
    matrix: np.ndarray,
    gland_ids: np.ndarray,
    epochs: int,
    seed: int = 0,
    margin: float = DEFAULT_MARGIN,
    batch_size: int = DEFAULT_BATCH_SIZE,
    learn_rate: float = DEFAULT_LEARN_RATE,
    hidden_dim: int = DEFAULT_HIDDEN_DIM,
    out_dim: int = DEFAULT_PROJECTION_DIM,
    checkpoint_epochs: tuple[int, ...] = CHECKPOINT_EPOCHS,
) -> TrainingResult:
    """SGD on mean batch-hard triplet loss with a 70-20-10 gland split.

    Rows sharing a gland id are treated as views of the same gland; every
    view travels with its gland through the split and batching. History
    row 0 records the untrained head's losses, and checkpoints are saved
    at the requested epochs (clamped to the horizon) plus the final epoch.
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    gland_ids = np.asarray(gland_ids)
    split = split_glands(gland_ids, seed=seed)
    train_rows = np.flatnonzero(np.isin(gland_ids, split["train"]))
    head = init_head(matrix.shape[1], hidden_dim, out_dim, margin=margin, seed=seed)
    fit_standardization(head, matrix[train_rows])

    rng = np.random.default_rng([seed, 1])

    def split_loss(name: str) -> float:
        eval_rng = np.random.default_rng([head.seed, 2])
        batches = _gland_batches(gland_ids, split[name], batch_size, eval_rng)
        losses = [batch_loss(head, matrix[b], gland_ids[b]) for b in batches if b.size]
        return float(np.mean(losses)) if losses else float("nan")

    history = [{"epoch": 0, "train_loss": split_loss("train"), "val_loss": split_loss("val")}]
    wanted = sorted({e for e in checkpoint_epochs if e <= epochs} | ({epochs} if epochs else set()))
    checkpoints: list[Checkpoint] = []
    for epoch in range(1, epochs + 1):
        batches = _gland_batches(gland_ids, split["train"], batch_size, rng)
        epoch_losses = []
        for rows in batches:
            x = matrix[rows]
            p = project(head, x)
            try:
                triplets = mine_batch_hard(p, gland_ids[rows])
            except DegenerateBatch:
                continue
            loss, grads = loss_and_gradients(head, x, triplets)
            epoch_losses.append(loss)
            for name, grad in grads.items():
                param = getattr(head, name)
                setattr(head, name, param - learn_rate * grad)
        val_loss = split_loss("val")
        history.append(
            {
                "epoch": epoch,
                "train_loss": float(np.mean(epoch_losses)) if epoch_losses else float("nan"),
                "val_loss": val_loss,
            }
        )
        if epoch in wanted:
            checkpoints.append(Checkpoint(epoch=epoch, head=head.copy(), val_loss=val_loss))
    return TrainingResult(head=head, checkpoints=checkpoints, history=history, split=split)


# ---------------------------------------------------------------------------
# Checkpoint file: JSON metadata line + float64 parameter blob.
# ---------------------------------------------------------------------------

_PARAM_ORDER = ("feature_mean", "feature_std", "weights_1", "bias_1", "weights_2", "bias_2")


def write_checkpoint(checkpoint: Checkpoint, path: Path | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    head = checkpoint.head
    meta = {
        "version": CHECKPOINT_VERSION,
        "epoch": checkpoint.epoch,
        "margin": head.margin,
        "seed": head.seed,
        "val_loss": checkpoint.val_loss,
        "in_dim": head.in_dim,
        "hidden_dim": head.weights_1.shape[0],
        "out_dim": head.out_dim,
    }
    with path.open("wb") as fh:
        fh.write((json.dumps(meta, sort_keys=True) + "\n").encode("utf-8"))
        for name in _PARAM_ORDER:
            fh.write(np.ascontiguousarray(getattr(head, name), dtype="<f8").tobytes())
    return path


def read_checkpoint(path: Path | str) -> Checkpoint:
    with Path(path).open("rb") as fh:
        meta = json.loads(fh.readline().decode("utf-8"))
        blob = np.frombuffer(fh.read(), dtype="<f8")
    in_dim, hidden, out_dim = meta["in_dim"], meta["hidden_dim"], meta["out_dim"]
    shapes = {
        "feature_mean": (in_dim,),
        "feature_std": (in_dim,),
        "weights_1": (hidden, in_dim),
        "bias_1": (hidden,),
        "weights_2": (out_dim, hidden),
        "bias_2": (out_dim,),
    }
    arrays, offset = {}, 0
    for name in _PARAM_ORDER:
        size = int(np.prod(shapes[name]))
        arrays[name] = blob[offset : offset + size].reshape(shapes[name]).copy()
        offset += size
    head = ProjectionHead(margin=meta["margin"], seed=meta["seed"], **arrays)
    return Checkpoint(epoch=meta["epoch"], head=head, val_loss=meta["val_loss"])
