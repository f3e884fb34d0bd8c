"""Attention-based multiple-instance learning heads and their training protocol.

Two shallow aggregators are implemented with hand-written gradients:

* gated attention -- tanh/sigmoid gated attention pooling over instances
  followed by an affine bag classifier;
* prediction-attention weighting (PAW) -- two parallel per-instance MLPs,
  one producing softmax attention (importance) and one a bounded
  contribution in (-1, 1); the bag logit is the attention-weighted sum of
  contributions, so each instance carries a signed evidence score.

Training minimizes mean binary cross-entropy with adaptive-moment updates.
The cross-validation protocol reserves 20% of case groups as a test split,
builds 5 train-validation folds over the remainder, sweeps batch size,
learn rate, and epochs, and selects hyperparameters by mean validation AUC.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path

import numpy as np

from .embeddings import EmbeddingBag

DEFAULT_HIDDEN_DIM = 128
DEFAULT_SWEEP = {
    "batch_size": (4, 8),
    "learn_rate": (1e-4, 1e-3),
    "epochs": (8, 16, 32),
}
N_TEST_SPLITS = 5
N_VAL_FOLDS = 5
N_REPEATS = 3
HEAD_KINDS = ("gated", "paw")


class AllPaddedBag(ValueError):
    """Bag contains no valid instance."""


class SingleClassTrainingSet(ValueError):
    """Training bags all share one label."""


class SingleClass(ValueError):
    """AUC needs both positive and negative labels."""


class InsufficientGroups(ValueError):
    """Too few case groups to plan the cross-validation."""


class UnstratifiableLabels(ValueError):
    """A class has too few groups to appear in every test split."""


class MissingHead(ValueError):
    """Ensemble scoring received fewer trained heads than expected."""


class MissingLabel(KeyError):
    """An instance lacks a cluster label."""


class MissingScore(KeyError):
    """An instance lacks a prediction score."""


from scipy.special import expit as _sigmoid


def _masked_softmax(scores: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Softmax over the last axis restricted to valid entries; padded get 0."""
    neg_inf = np.where(valid, scores, -np.inf)
    peak = neg_inf.max(axis=-1, keepdims=True)
    ex = np.where(valid, np.exp(neg_inf - peak), 0.0)
    return ex / ex.sum(axis=-1, keepdims=True)


def stack_bags(bags: list[EmbeddingBag]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(B, N, D) instance tensor, (B, N) validity mask, (B,) labels."""
    x = np.stack([b.instances for b in bags]).astype(np.float64)
    valid = np.stack([b.validity for b in bags])
    y = np.array([b.label for b in bags], dtype=np.float64)
    return x, valid, y


# ---------------------------------------------------------------------------
# Gated-attention head.
# ---------------------------------------------------------------------------


@dataclass
class GatedAttentionHead:
    weights_v: np.ndarray  # (hidden, in_dim)
    bias_v: np.ndarray
    weights_u: np.ndarray  # (hidden, in_dim)
    bias_u: np.ndarray
    attention_w: np.ndarray  # (hidden,)
    classifier_w: np.ndarray  # (in_dim,)
    classifier_b: np.ndarray  # ()

    kind = "gated"

    def parameters(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in (
            "weights_v", "bias_v", "weights_u", "bias_u",
            "attention_w", "classifier_w", "classifier_b",
        )}

    def forward_batch(self, x: np.ndarray, valid: np.ndarray) -> dict[str, np.ndarray]:
        if not valid.any(axis=1).all():
            raise AllPaddedBag("every bag must contain at least one valid instance")
        b, n, d = x.shape
        flat = x.reshape(b * n, d)
        t = np.tanh(flat @ self.weights_v.T + self.bias_v)
        s = _sigmoid(flat @ self.weights_u.T + self.bias_u)
        gate = t * s
        scores = (gate @ self.attention_w).reshape(b, n)
        attention = _masked_softmax(scores, valid)
        pooled = np.matmul(attention[:, None, :], x)[:, 0, :]
        logit = pooled @ self.classifier_w + self.classifier_b
        return {
            "flat": flat, "t": t, "s": s, "gate": gate, "attention": attention,
            "pooled": pooled, "logit": logit, "prob": _sigmoid(logit),
        }

    def loss_and_gradients(
        self, x: np.ndarray, valid: np.ndarray, y: np.ndarray
    ) -> tuple[float, dict[str, np.ndarray]]:
        fwd = self.forward_batch(x, valid)
        prob, attention = fwd["prob"], fwd["attention"]
        b, n, d = x.shape
        loss = _bce(prob, y)
        d_logit = (prob - y) / y.size
        grads = {
            "classifier_w": fwd["pooled"].T @ d_logit,
            "classifier_b": np.asarray(d_logit.sum()),
        }
        d_pooled = d_logit[:, None] * self.classifier_w
        d_attention = np.matmul(x, d_pooled[:, :, None])[:, :, 0]
        inner = (attention * d_attention).sum(axis=1, keepdims=True)
        d_scores = (attention * (d_attention - inner)).reshape(b * n)  # zero on padded rows
        grads["attention_w"] = d_scores @ fwd["gate"]
        d_gate = d_scores[:, None] * self.attention_w
        d_pre_v = d_gate * fwd["s"] * (1.0 - fwd["t"] ** 2)
        d_pre_u = d_gate * fwd["t"] * fwd["s"] * (1.0 - fwd["s"])
        grads["weights_v"] = d_pre_v.T @ fwd["flat"]
        grads["bias_v"] = d_pre_v.sum(axis=0)
        grads["weights_u"] = d_pre_u.T @ fwd["flat"]
        grads["bias_u"] = d_pre_u.sum(axis=0)
        return loss, grads


def init_gated_head(in_dim: int, hidden_dim: int = DEFAULT_HIDDEN_DIM, seed: int = 0) -> GatedAttentionHead:
    rng = np.random.default_rng(seed)
    scale_in = 1.0 / np.sqrt(in_dim)
    scale_h = 1.0 / np.sqrt(hidden_dim)
    return GatedAttentionHead(
        weights_v=rng.normal(0.0, scale_in, (hidden_dim, in_dim)),
        bias_v=np.zeros(hidden_dim),
        weights_u=rng.normal(0.0, scale_in, (hidden_dim, in_dim)),
        bias_u=np.zeros(hidden_dim),
        attention_w=rng.normal(0.0, scale_h, hidden_dim),
        classifier_w=rng.normal(0.0, scale_in, in_dim),
        classifier_b=np.zeros(()),
    )


# ---------------------------------------------------------------------------
# Prediction-attention-weighted head.
# ---------------------------------------------------------------------------


@dataclass
class PawMilHead:
    attn_w1: np.ndarray  # (hidden, in_dim)
    attn_b1: np.ndarray
    attn_w2: np.ndarray  # (hidden,)
    contrib_w1: np.ndarray  # (hidden, in_dim)
    contrib_b1: np.ndarray
    contrib_w2: np.ndarray  # (hidden,)
    contrib_b2: np.ndarray  # ()
    scale: np.ndarray  # ()

    kind = "paw"

    def parameters(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in (
            "attn_w1", "attn_b1", "attn_w2",
            "contrib_w1", "contrib_b1", "contrib_w2", "contrib_b2", "scale",
        )}

    def forward_batch(self, x: np.ndarray, valid: np.ndarray) -> dict[str, np.ndarray]:
        if not valid.any(axis=1).all():
            raise AllPaddedBag("every bag must contain at least one valid instance")
        b, n, d = x.shape
        flat = x.reshape(b * n, d)
        ta = np.tanh(flat @ self.attn_w1.T + self.attn_b1)
        scores = (ta @ self.attn_w2).reshape(b, n)
        attention = _masked_softmax(scores, valid)
        tc = np.tanh(flat @ self.contrib_w1.T + self.contrib_b1)
        contribution = np.tanh(tc @ self.contrib_w2 + self.contrib_b2).reshape(b, n)
        logit = (attention * contribution).sum(axis=1)
        return {
            "flat": flat, "ta": ta, "attention": attention, "tc": tc,
            "contribution": contribution, "logit": logit,
            "paw": attention * contribution,
            "prob": _sigmoid(self.scale * logit),
        }

    def loss_and_gradients(
        self, x: np.ndarray, valid: np.ndarray, y: np.ndarray
    ) -> tuple[float, dict[str, np.ndarray]]:
        fwd = self.forward_batch(x, valid)
        prob, attention, contribution = fwd["prob"], fwd["attention"], fwd["contribution"]
        b, n, d = x.shape
        loss = _bce(prob, y)
        d_pre = (prob - y) / y.size
        grads = {"scale": np.asarray(np.sum(d_pre * fwd["logit"]))}
        d_logit = d_pre * float(self.scale)
        d_attention = d_logit[:, None] * contribution
        d_contribution = d_logit[:, None] * attention
        inner = (attention * d_attention).sum(axis=1, keepdims=True)
        d_scores = (attention * (d_attention - inner)).reshape(b * n)
        grads["attn_w2"] = d_scores @ fwd["ta"]
        d_pre_a = d_scores[:, None] * self.attn_w2 * (1.0 - fwd["ta"] ** 2)
        grads["attn_w1"] = d_pre_a.T @ fwd["flat"]
        grads["attn_b1"] = d_pre_a.sum(axis=0)
        d_pre_c2 = (d_contribution * (1.0 - contribution**2)).reshape(b * n)
        grads["contrib_w2"] = d_pre_c2 @ fwd["tc"]
        grads["contrib_b2"] = np.asarray(d_pre_c2.sum())
        d_pre_c1 = d_pre_c2[:, None] * self.contrib_w2 * (1.0 - fwd["tc"] ** 2)
        grads["contrib_w1"] = d_pre_c1.T @ fwd["flat"]
        grads["contrib_b1"] = d_pre_c1.sum(axis=0)
        return loss, grads


def init_paw_head(in_dim: int, hidden_dim: int = DEFAULT_HIDDEN_DIM, seed: int = 0) -> PawMilHead:
    rng = np.random.default_rng(seed)
    scale_in = 1.0 / np.sqrt(in_dim)
    scale_h = 1.0 / np.sqrt(hidden_dim)
    return PawMilHead(
        attn_w1=rng.normal(0.0, scale_in, (hidden_dim, in_dim)),
        attn_b1=np.zeros(hidden_dim),
        attn_w2=rng.normal(0.0, scale_h, hidden_dim),
        contrib_w1=rng.normal(0.0, scale_in, (hidden_dim, in_dim)),
        contrib_b1=np.zeros(hidden_dim),
        contrib_w2=rng.normal(0.0, scale_h, hidden_dim),
        contrib_b2=np.zeros(()),
        scale=np.ones(()),
    )


_INITIALIZERS = {"gated": init_gated_head, "paw": init_paw_head}


def _bce(prob: np.ndarray, y: np.ndarray) -> float:
    p = np.clip(prob, 1e-12, 1.0 - 1e-12)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def forward_gated(head: GatedAttentionHead, bag: EmbeddingBag) -> tuple[float, np.ndarray]:
    """Bag probability and per-valid-instance attention weights."""
    fwd = head.forward_batch(bag.instances[None], bag.validity[None])
    return float(fwd["prob"][0]), fwd["attention"][0][bag.validity]


def forward_paw(head: PawMilHead, bag: EmbeddingBag) -> tuple[float, np.ndarray]:
    """Bag probability and per-valid-instance PAW evidence scores."""
    fwd = head.forward_batch(bag.instances[None], bag.validity[None])
    return float(fwd["prob"][0]), fwd["paw"][0][bag.validity]


def bag_probabilities(head, bags: list[EmbeddingBag]) -> np.ndarray:
    x, valid, _ = stack_bags(bags)
    return head.forward_batch(x, valid)["prob"]


# ---------------------------------------------------------------------------
# Training: mean BCE with adaptive-moment updates, analytic gradients.
# ---------------------------------------------------------------------------


def _flatten_parameters(head) -> tuple[np.ndarray, list[tuple[str, slice, tuple]]]:
    """Pack parameters into one flat buffer and rebind the head's arrays as
    views into it, so the optimizer can update everything with vector ops."""
    params = head.parameters()
    names = sorted(params)
    total = sum(int(np.prod(params[n].shape)) if params[n].shape else 1 for n in names)
    theta = np.empty(total, dtype=np.float64)
    layout = []
    offset = 0
    for name in names:
        shape = params[name].shape
        size = int(np.prod(shape)) if shape else 1
        sl = slice(offset, offset + size)
        theta[sl] = np.asarray(params[name], dtype=np.float64).ravel()
        setattr(head, name, theta[sl].reshape(shape))
        layout.append((name, sl, shape))
        offset += size
    return theta, layout


def train_head(
    kind: str,
    bags: list[EmbeddingBag],
    hyperparams: dict,
    seed: int = 0,
    hidden_dim: int = DEFAULT_HIDDEN_DIM,
):
    """Train one head; returns (head, per-epoch history).

    ``hyperparams`` carries batch_size, learn_rate, and epochs. The run is
    single-threaded and fully determined by the seed.
    """
    if kind not in _INITIALIZERS:
        raise ValueError(f"unknown head kind {kind!r}")
    labels = {b.label for b in bags}
    if labels != {0, 1}:
        raise SingleClassTrainingSet(f"training labels {sorted(labels)} must include both classes")
    x, valid, y = stack_bags(bags)
    keep = int(valid.any(axis=0).sum())  # drop all-padded trailing columns
    x, valid = np.ascontiguousarray(x[:, :keep]), np.ascontiguousarray(valid[:, :keep])
    head = _INITIALIZERS[kind](x.shape[2], hidden_dim=hidden_dim, seed=seed)
    batch_size = int(hyperparams["batch_size"])
    learn_rate = float(hyperparams["learn_rate"])
    epochs = int(hyperparams["epochs"])

    rng = np.random.default_rng([seed, 7])
    theta, layout = _flatten_parameters(head)
    grad_flat = np.zeros_like(theta)
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    beta_1, beta_2, eps = 0.9, 0.999, 1e-8
    step = 0
    history = []
    for epoch in range(epochs):
        order = rng.permutation(y.size)
        epoch_losses = []
        for start in range(0, y.size, batch_size):
            rows = order[start : start + batch_size]
            loss, grads = head.loss_and_gradients(x[rows], valid[rows], y[rows])
            epoch_losses.append(loss)
            for name, sl, shape in layout:
                grad_flat[sl] = grads[name].ravel() if shape else grads[name]
            step += 1
            m *= beta_1
            m += (1 - beta_1) * grad_flat
            v *= beta_2
            v += (1 - beta_2) * grad_flat * grad_flat
            denom = np.sqrt(v / (1 - beta_2**step)) + eps
            theta -= learn_rate * (m / (1 - beta_1**step)) / denom
        history.append({"epoch": epoch + 1, "train_loss": float(np.mean(epoch_losses))})
    return head, history


# ---------------------------------------------------------------------------
# Batched multi-model training. The benchmark trains thousands of small
# heads; running same-shaped models as one leading tensor axis removes the
# per-model interpreter overhead while computing the same updates as
# repeated train_head calls (each model keeps its own seeded shuffle).
# ---------------------------------------------------------------------------


def _paw_step(p, flat, valid, y, n_bags):
    r, bn, _ = flat.shape
    ta = np.tanh(np.matmul(flat, p["attn_w1"].transpose(0, 2, 1)) + p["attn_b1"][:, None, :])
    scores = np.matmul(ta, p["attn_w2"][:, :, None])[..., 0].reshape(r, n_bags, -1)
    attention = _masked_softmax(scores, valid)
    tc = np.tanh(np.matmul(flat, p["contrib_w1"].transpose(0, 2, 1)) + p["contrib_b1"][:, None, :])
    contribution = np.tanh(
        np.matmul(tc, p["contrib_w2"][:, :, None])[..., 0] + p["contrib_b2"][:, None]
    ).reshape(r, n_bags, -1)
    logit = (attention * contribution).sum(-1)
    prob = _sigmoid(p["scale"][:, None] * logit)

    d_pre = (prob - y) / y.shape[1]
    d_logit = d_pre * p["scale"][:, None]
    d_att = d_logit[..., None] * contribution
    d_con = d_logit[..., None] * attention
    inner = (attention * d_att).sum(-1, keepdims=True)
    d_scores = (attention * (d_att - inner)).reshape(r, bn)
    d_pre_a = d_scores[..., None] * p["attn_w2"][:, None, :] * (1.0 - ta**2)
    d_pre_c2 = (d_con * (1.0 - contribution**2)).reshape(r, bn)
    d_pre_c1 = d_pre_c2[..., None] * p["contrib_w2"][:, None, :] * (1.0 - tc**2)
    return {
        "attn_w1": np.matmul(d_pre_a.transpose(0, 2, 1), flat),
        "attn_b1": d_pre_a.sum(1),
        "attn_w2": np.matmul(d_scores[:, None, :], ta)[:, 0, :],
        "contrib_w1": np.matmul(d_pre_c1.transpose(0, 2, 1), flat),
        "contrib_b1": d_pre_c1.sum(1),
        "contrib_w2": np.matmul(d_pre_c2[:, None, :], tc)[:, 0, :],
        "contrib_b2": d_pre_c2.sum(-1),
        "scale": (d_pre * logit).sum(-1),
    }


def _gated_step(p, flat, valid, y, n_bags):
    r, bn, dim = flat.shape
    t = np.tanh(np.matmul(flat, p["weights_v"].transpose(0, 2, 1)) + p["bias_v"][:, None, :])
    s = _sigmoid(np.matmul(flat, p["weights_u"].transpose(0, 2, 1)) + p["bias_u"][:, None, :])
    gate = t * s
    scores = np.matmul(gate, p["attention_w"][:, :, None])[..., 0].reshape(r, n_bags, -1)
    attention = _masked_softmax(scores, valid)
    x = flat.reshape(r, n_bags, -1, dim)
    pooled = np.matmul(attention.reshape(r * n_bags, 1, -1), x.reshape(r * n_bags, -1, dim))
    pooled = pooled.reshape(r, n_bags, dim)
    logit = np.matmul(pooled, p["classifier_w"][:, :, None])[..., 0] + p["classifier_b"][:, None]
    prob = _sigmoid(logit)

    d_logit = (prob - y) / y.shape[1]
    d_pooled = d_logit[..., None] * p["classifier_w"][:, None, :]
    d_att = np.matmul(x.reshape(r * n_bags, -1, dim), d_pooled.reshape(r * n_bags, dim, 1))
    d_att = d_att.reshape(r, n_bags, -1)
    inner = (attention * d_att).sum(-1, keepdims=True)
    d_scores = (attention * (d_att - inner)).reshape(r, bn)
    d_gate = d_scores[..., None] * p["attention_w"][:, None, :]
    d_pre_v = d_gate * s * (1.0 - t**2)
    d_pre_u = d_gate * t * s * (1.0 - s)
    return {
        "weights_v": np.matmul(d_pre_v.transpose(0, 2, 1), flat),
        "bias_v": d_pre_v.sum(1),
        "weights_u": np.matmul(d_pre_u.transpose(0, 2, 1), flat),
        "bias_u": d_pre_u.sum(1),
        "attention_w": np.matmul(d_scores[:, None, :], gate)[:, 0, :],
        "classifier_w": np.matmul(d_logit[:, None, :], pooled)[:, 0, :],
        "classifier_b": d_logit.sum(-1),
    }


_ENSEMBLE_STEPS = {"paw": _paw_step, "gated": _gated_step}


def train_heads_batched(
    kind: str,
    x_all: np.ndarray,
    valid_all: np.ndarray,
    y_all: np.ndarray,
    model_rows: list[np.ndarray],
    hyperparams: dict,
    seeds: list[int],
    hidden_dim: int = DEFAULT_HIDDEN_DIM,
) -> list:
    """Train len(seeds) same-shaped heads in one tensorized loop.

    ``model_rows[r]`` indexes each model's training bags in the shared bag
    tensor; all row lists must share one length so the models advance in
    lockstep. Every model draws its own shuffle stream from its seed,
    matching what a separate train_head run with that seed would do.
    """
    n_models = len(seeds)
    if len(model_rows) != n_models:
        raise ValueError("one row list per seed required")
    n_train = {rows.size for rows in model_rows}
    if len(n_train) != 1:
        raise ValueError("model row lists must share one length")
    n_train = n_train.pop()
    for rows in model_rows:
        labs = set(y_all[rows].astype(int).tolist())
        if labs != {0, 1}:
            raise SingleClassTrainingSet(f"training labels {sorted(labs)} must include both classes")

    in_dim = x_all.shape[2]
    heads = [_INITIALIZERS[kind](in_dim, hidden_dim=hidden_dim, seed=s) for s in seeds]
    names = sorted(heads[0].parameters())
    layout, offset = [], 0
    for name in names:
        shape = heads[0].parameters()[name].shape
        size = int(np.prod(shape)) if shape else 1
        layout.append((name, slice(offset, offset + size), shape))
        offset += size
    theta = np.empty((n_models, offset), dtype=np.float64)
    for r, head in enumerate(heads):
        for name, sl, shape in layout:
            theta[r, sl] = np.asarray(getattr(head, name), dtype=np.float64).ravel()
    views = {name: theta[:, sl].reshape((n_models, *shape)) for name, sl, shape in layout}

    batch_size = int(hyperparams["batch_size"])
    learn_rate = float(hyperparams["learn_rate"])
    epochs = int(hyperparams["epochs"])
    rngs = [np.random.default_rng([s, 7]) for s in seeds]
    grad_flat = np.zeros_like(theta)
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    beta_1, beta_2, eps = 0.9, 0.999, 1e-8
    step = 0
    step_fn = _ENSEMBLE_STEPS[kind]
    for _ in range(epochs):
        perms = np.stack([rows[rng.permutation(n_train)] for rows, rng in zip(model_rows, rngs)])
        for start in range(0, n_train, batch_size):
            idx = perms[:, start : start + batch_size]  # (R, B)
            xb = x_all[idx]
            grads = step_fn(
                views,
                xb.reshape(n_models, -1, in_dim),
                valid_all[idx],
                y_all[idx],
                idx.shape[1],
            )
            for name, sl, shape in layout:
                grad_flat[:, sl] = grads[name].reshape(n_models, -1)
            step += 1
            m *= beta_1
            m += (1 - beta_1) * grad_flat
            v *= beta_2
            v += (1 - beta_2) * grad_flat * grad_flat
            denom = np.sqrt(v / (1 - beta_2**step)) + eps
            theta -= learn_rate * (m / (1 - beta_1**step)) / denom
    for r, head in enumerate(heads):
        for name, sl, shape in layout:
            setattr(head, name, theta[r, sl].reshape(shape).copy())
    return heads


# ---------------------------------------------------------------------------
# AUC (rank formulation, half credit for ties).
# ---------------------------------------------------------------------------


def auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """P(score of a positive > score of a negative) + half the tie mass."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise SingleClass("AUC requires both classes")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.size, dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # average 1-based rank
        i = j + 1
    rank_sum = float(ranks[labels == 1].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


# ---------------------------------------------------------------------------
# Grouped stratified cross-validation planning.
# ---------------------------------------------------------------------------


@dataclass
class FoldPlan:
    """One outer test split and its five train-validation folds (group lists)."""

    test_groups: list[str]
    folds: list[tuple[list[str], list[str]]]
    stratification: dict = field(default_factory=dict)


def _greedy_partition(
    groups: list[str],
    labels: dict[str, int],
    sizes: dict[str, int],
    n_buckets: int,
    rng: np.random.Generator,
) -> list[list[str]]:
    """Split groups into n_buckets, per-label counts within one of exact.

    Each label's groups get per-bucket quotas (remainders placed by a seeded
    draw); groups are then assigned largest-first to the eligible bucket with
    the fewest bags, ties to the lowest bucket index.
    """
    quotas = {}
    for label in sorted({labels[g] for g in groups}):
        members = [g for g in groups if labels[g] == label]
        base, rem = divmod(len(members), n_buckets)
        quota = np.full(n_buckets, base, dtype=int)
        quota[rng.permutation(n_buckets)[:rem]] += 1
        quotas[label] = quota
    buckets: list[list[str]] = [[] for _ in range(n_buckets)]
    loads = np.zeros(n_buckets, dtype=int)
    filled = {label: np.zeros(n_buckets, dtype=int) for label in quotas}
    for group in sorted(groups, key=lambda g: (-sizes[g], g)):
        label = labels[group]
        eligible = np.flatnonzero(filled[label] < quotas[label])
        pick = eligible[np.argmin(loads[eligible])]
        buckets[pick].append(group)
        loads[pick] += sizes[group]
        filled[label][pick] += 1
    return [sorted(b) for b in buckets]


def grouped_stratified_split(
    group_labels: dict[str, int],
    seed: int = 0,
    group_sizes: dict[str, int] | None = None,
    n_test_splits: int = N_TEST_SPLITS,
    n_val_folds: int = N_VAL_FOLDS,
) -> list[FoldPlan]:
    """Plan the five possible 20% test splits, each with five 80-20 val folds.

    Groups never span two sets within a plan, and per-label group counts in
    every bucket stay within one group of exact stratification. Validation
    folds in very small datasets may end up single-class; downstream AUC
    treats those folds as undefined.
    """
    groups = sorted(group_labels)
    if len(groups) < 10:
        raise InsufficientGroups(f"need at least 10 groups, got {len(groups)}")
    by_label = {}
    for g in groups:
        by_label.setdefault(group_labels[g], []).append(g)
    if set(by_label) != {0, 1}:
        raise UnstratifiableLabels(f"labels {sorted(by_label)} must be exactly {{0, 1}}")
    smallest = min(len(v) for v in by_label.values())
    if smallest < n_test_splits:
        raise UnstratifiableLabels(
            f"minority class has {smallest} groups; every one of the "
            f"{n_test_splits} test splits needs at least one"
        )
    sizes = group_sizes or {g: 1 for g in groups}
    rng = np.random.default_rng([seed, 11])
    test_buckets = _greedy_partition(groups, group_labels, sizes, n_test_splits, rng)
    plans = []
    for t, test in enumerate(test_buckets):
        remainder = [g for g in groups if g not in set(test)]
        val_rng = np.random.default_rng([seed, 13, t])
        val_buckets = _greedy_partition(remainder, group_labels, sizes, n_val_folds, val_rng)
        folds = []
        for val in val_buckets:
            train = [g for g in remainder if g not in set(val)]
            folds.append((train, val))
        counts = {
            "test": {lab: sum(1 for g in test if group_labels[g] == lab) for lab in (0, 1)},
            "total": {lab: len(by_label[lab]) for lab in (0, 1)},
        }
        plans.append(FoldPlan(test_groups=test, folds=folds, stratification=counts))
    return plans


# ---------------------------------------------------------------------------
# Benchmark harness: sweep, select by validation AUC, evaluate test splits.
# ---------------------------------------------------------------------------


def sweep_grid(sweep: dict | None = None) -> list[dict]:
    sweep = sweep or DEFAULT_SWEEP
    keys = list(sweep)
    return [dict(zip(keys, combo)) for combo in product(*(sweep[k] for k in keys))]


def _bags_for(bags_by_group: dict[str, list[EmbeddingBag]], groups: list[str]) -> list[EmbeddingBag]:
    out = []
    for g in groups:
        out.extend(bags_by_group[g])
    return out


def _safe_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    try:
        return auc(scores, labels)
    except SingleClass:
        return float("nan")


@dataclass
class BenchmarkArm:
    tiling_mode: str
    encoder_tag: str
    bags: list[EmbeddingBag]


def evaluate_arm(
    arm: BenchmarkArm,
    label_kind: str,
    head_kind: str,
    seed: int = 0,
    sweep: dict | None = None,
    n_repeats: int = N_REPEATS,
    hidden_dim: int = DEFAULT_HIDDEN_DIM,
    threads: int = 1,
) -> tuple[list[dict], list]:
    """Run the full protocol for one (tiling, encoder, head) configuration.

    Returns (rows, final_heads): one row per test split x repeat with the
    selected hyperparameters, plus the final trained heads in
    (test split, repeat) order for ensemble scoring. Fold x repeat models
    for one hyperparameter point train as one batched ensemble; results are
    keyed, so any thread count yields identical output.
    """
    bags_by_group: dict[str, list[EmbeddingBag]] = {}
    for bag in arm.bags:
        bags_by_group.setdefault(bag.case_id, []).append(bag)
    group_labels = {g: bs[0].label for g, bs in bags_by_group.items()}
    group_sizes = {g: len(bs) for g, bs in bags_by_group.items()}
    plans = grouped_stratified_split(group_labels, seed=seed, group_sizes=group_sizes)
    grid = sweep_grid(sweep)

    x_all, valid_all, y_all = stack_bags(arm.bags)
    keep = int(valid_all.any(axis=0).sum())
    x_all = np.ascontiguousarray(x_all[:, :keep])
    valid_all = np.ascontiguousarray(valid_all[:, :keep])
    rows_of_group: dict[str, list[int]] = {}
    for i, bag in enumerate(arm.bags):
        rows_of_group.setdefault(bag.case_id, []).append(i)

    def group_rows(groups: list[str]) -> np.ndarray:
        return np.array([i for g in groups for i in rows_of_group[g]], dtype=np.int64)

    def train_cohort(specs: list[tuple[np.ndarray, int]], hp: dict) -> list:
        """specs: (train rows, seed) per model; batches same-sized cohorts."""
        heads: list = [None] * len(specs)
        by_size: dict[int, list[int]] = {}
        for i, (rows, _) in enumerate(specs):
            by_size.setdefault(rows.size, []).append(i)
        for members in by_size.values():
            trained = train_heads_batched(
                head_kind,
                x_all,
                valid_all,
                y_all,
                [specs[i][0] for i in members],
                hp,
                [specs[i][1] for i in members],
                hidden_dim=hidden_dim,
            )
            for i, head in zip(members, trained):
                heads[i] = head
        return heads

    def eval_rows(head, rows: np.ndarray) -> float:
        labels = y_all[rows].astype(int)
        if rows.size == 0 or len(set(labels.tolist())) < 2:
            return float("nan")
        probs = head.forward_batch(x_all[rows], valid_all[rows])["prob"]
        return _safe_auc(probs, labels)

    def run_sweep_point(job):
        t, h = job
        plan, hp = plans[t], grid[h]
        specs, val_rows = [], []
        for f, (train_g, val_g) in enumerate(plan.folds):
            for r in range(n_repeats):
                model_seed = int(np.random.default_rng([seed, 17, t, h, f, r]).integers(2**31))
                specs.append((group_rows(train_g), model_seed))
                val_rows.append(group_rows(val_g))
        heads = train_cohort(specs, hp)
        vals = [eval_rows(head, rows) for head, rows in zip(heads, val_rows)]
        finite = [v for v in vals if not np.isnan(v)]
        return job, float(np.mean(finite)) if finite else float("-inf")

    jobs = [(t, h) for t in range(len(plans)) for h in range(len(grid))]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            mean_val = dict(pool.map(run_sweep_point, jobs))
    else:
        mean_val = dict(map(run_sweep_point, jobs))

    rows = []
    final_heads = []
    for t, plan in enumerate(plans):
        means = [mean_val[(t, h)] for h in range(len(grid))]
        best_idx = int(np.argmax(means))
        best_hp, best_val = grid[best_idx], means[best_idx]
        trainval_groups = sorted(set(group_labels) - set(plan.test_groups))
        trainval_rows = group_rows(trainval_groups)
        test_rows = group_rows(plan.test_groups)
        specs = [
            (trainval_rows, int(np.random.default_rng([seed, 19, t, r]).integers(2**31)))
            for r in range(n_repeats)
        ]
        heads = train_cohort(specs, best_hp)
        for r, head in enumerate(heads):
            final_heads.append(head)
            rows.append(
                {
                    "tiling_mode": arm.tiling_mode,
                    "encoder_tag": arm.encoder_tag,
                    "label": label_kind,
                    "head": head_kind,
                    "fold": t,
                    "repeat": r,
                    "batch_size": best_hp["batch_size"],
                    "learn_rate": best_hp["learn_rate"],
                    "epochs": best_hp["epochs"],
                    "val_auc": best_val,
                    "test_auc": eval_rows(head, test_rows),
                }
            )
    return rows, final_heads


def run_benchmark(
    arms: list[BenchmarkArm],
    label_kind: str,
    head_kinds: tuple[str, ...] = HEAD_KINDS,
    seed: int = 0,
    sweep: dict | None = None,
    hidden_dim: int = DEFAULT_HIDDEN_DIM,
    threads: int = 1,
) -> list[dict]:
    """AUC table across tiling modes, encoders, and head kinds."""
    rows = []
    for arm in arms:
        for head_kind in head_kinds:
            arm_rows, _ = evaluate_arm(
                arm, label_kind, head_kind, seed=seed, sweep=sweep,
                hidden_dim=hidden_dim, threads=threads,
            )
            rows.extend(arm_rows)
    return rows


BENCHMARK_COLUMNS = (
    "tiling_mode", "encoder_tag", "label", "head", "fold", "repeat",
    "batch_size", "learn_rate", "epochs", "val_auc", "test_auc",
)


def write_benchmark_csv(rows: list[dict], path: Path | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=BENCHMARK_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in BENCHMARK_COLUMNS})
    return path


# ---------------------------------------------------------------------------
# Ensemble instance scoring.
# ---------------------------------------------------------------------------


@dataclass
class EnsembleScores:
    """Per-instance PAW scores from the model ensemble, with categories.

    Category +1 means every model scored the instance above zero, -1 every
    model below zero, and 0 anything in between.
    """

    slide_ids: list[str]
    gland_ids: list[int]
    scores: np.ndarray  # (n_instances, n_models)
    categories: np.ndarray  # (n_instances,) in {-1, 0, +1}


def categorize_scores(scores: np.ndarray) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    cats = np.zeros(scores.shape[0], dtype=np.int64)
    cats[(scores > 0).all(axis=1)] = 1
    cats[(scores < 0).all(axis=1)] = -1
    return cats


# ---------------------------------------------------------------------------
# Trained-head files: JSON metadata line + float64 parameter blob.
# ---------------------------------------------------------------------------

MIL_HEAD_VERSION = 1


def write_mil_head(head, path: Path | str, metadata: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    params = head.parameters()
    if head.kind == "gated":
        in_dim, hidden = head.weights_v.shape[1], head.weights_v.shape[0]
    else:
        in_dim, hidden = head.attn_w1.shape[1], head.attn_w1.shape[0]
    meta = {
        "version": MIL_HEAD_VERSION,
        "kind": head.kind,
        "in_dim": in_dim,
        "hidden_dim": hidden,
        "metadata": metadata or {},
    }
    with path.open("wb") as fh:
        fh.write((json.dumps(meta, sort_keys=True) + "\n").encode("utf-8"))
        for name in sorted(params):
            fh.write(np.ascontiguousarray(params[name], dtype="<f8").tobytes())
    return path


def read_mil_head(path: Path | str):
    with Path(path).open("rb") as fh:
        meta = json.loads(fh.readline().decode("utf-8"))
        blob = np.frombuffer(fh.read(), dtype="<f8")
    head = _INITIALIZERS[meta["kind"]](meta["in_dim"], hidden_dim=meta["hidden_dim"], seed=0)
    offset = 0
    for name in sorted(head.parameters()):
        shape = head.parameters()[name].shape
        size = int(np.prod(shape)) if shape else 1
        setattr(head, name, blob[offset : offset + size].reshape(shape).copy())
        offset += size
    return head, meta["metadata"]


def ensemble_instance_scores(
    heads: list[PawMilHead], bags: list[EmbeddingBag], expected_heads: int = 15
) -> EnsembleScores:
    """Score every valid instance with every head in the ensemble."""
    if len(heads) < expected_heads:
        raise MissingHead(f"expected {expected_heads} heads, got {len(heads)}")
    x, valid, _ = stack_bags(bags)
    per_model = []
    for head in heads:
        if not isinstance(head, PawMilHead):
            raise MissingHead("instance scoring requires PAW heads")
        per_model.append(head.forward_batch(x, valid)["paw"])  # (B, N)
    stacked = np.stack(per_model, axis=-1)  # (B, N, M)
    slide_ids, gland_ids, rows = [], [], []
    for b, bag in enumerate(bags):
        idx = np.flatnonzero(bag.validity)
        rows.append(stacked[b, idx])
        slide_ids.extend([bag.slide_id] * idx.size)
        gland_ids.extend(bag.gland_ids)
    scores = np.concatenate(rows) if rows else np.zeros((0, len(heads)))
    return EnsembleScores(
        slide_ids=slide_ids,
        gland_ids=gland_ids,
        scores=scores,
        categories=categorize_scores(scores),
    )
