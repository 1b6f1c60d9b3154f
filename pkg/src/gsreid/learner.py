"""Linear encoder, memory bank, centroid contrastive loss and the training loop.

The encoder is ``v = normalize(W @ o + b)``. Each epoch clusters the memory
bank, builds a batch schedule, and for every batch takes one SGD step on the
batch-mean contrastive loss before writing the freshly encoded features back
into the memory with a momentum blend.
"""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import metrics as M
from .clustering import DbscanConfig, generate_pseudo_labels
from .core import OUTLIER, ZERO_NORM_EPS, ZeroNorm, normalize, normalize_rows
from .sampling import ALL, batches, block_shuffle, group_schedule, pk_schedule, random_schedule

log = logging.getLogger(__name__)

CLUSTERS_ONLY = "clusters"
CLUSTERS_PLUS_OUTLIERS = "clusters+outliers"
LOSS_MODES = (CLUSTERS_ONLY, CLUSTERS_PLUS_OUTLIERS)
SAMPLER_KINDS = ("group", "random", "block", "pk")


class NoTarget(ValueError):
    """The sample has no centroid to be pulled towards."""


@dataclass
class EncoderParams:
    W: np.ndarray
    b: np.ndarray

    @classmethod
    def init(cls, dim_in, dim_out, rng):
        W = rng.standard_normal((dim_out, dim_in)) / np.sqrt(dim_in)
        return cls(W, np.zeros(dim_out))

    def copy(self):
        return EncoderParams(self.W.copy(), self.b.copy())


@dataclass(frozen=True)
class SamplerConfig:
    kind: str = "group"
    group_size: int = 64
    shuffle_degree: int | str = 1
    pk_p: int = 16
    pk_k: int = 4


@dataclass(frozen=True)
class TrainConfig:
    tau: float = 0.05
    momentum: float = 0.2
    lr: float = 3.5e-4
    lr_decay: int = 20
    epochs: int = 50
    batch_size: int = 64
    dim_out: int = 16
    loss_mode: str = CLUSTERS_PLUS_OUTLIERS
    k: int = 30
    dbscan: DbscanConfig = field(default_factory=DbscanConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be > 0")
        if not 0 <= self.momentum <= 1:
            raise ValueError("momentum must be in [0, 1]")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}")

    def lr_at(self, epoch):
        return self.lr / 10 ** (epoch // self.lr_decay) if self.lr_decay > 0 else self.lr


# ---------------------------------------------------------------- encoder


def encode(p, o):
    return normalize(p.W @ np.asarray(o, dtype=np.float64) + p.b)


def encode_batch(p, O):
    """Encode rows of ``O``; returns unit features and pre-normalization norms."""
    Z = np.asarray(O, dtype=np.float64) @ p.W.T + p.b
    norms = np.sqrt(np.einsum("ij,ij->i", Z, Z))
    if np.any(norms < ZERO_NORM_EPS):
        raise ZeroNorm("encoder output collapsed to zero")
    return Z / norms[:, None], norms


def backprop_params(p, o, v, g_v):
    """Chain ``g_v`` back through ``v = normalize(W o + b)``.

    Returns ``(grad_W, grad_b)``.
    """
    o = np.asarray(o, dtype=np.float64)
    z = p.W @ o + p.b
    znorm = np.sqrt(np.dot(z, z))
    if znorm < ZERO_NORM_EPS:
        raise ZeroNorm("encoder output collapsed to zero")
    g_z = (g_v - np.dot(v, g_v) * v) / znorm
    return np.outer(g_z, o), g_z


def sgd_step(p, grads, lr):
    grad_W, grad_b = grads
    return EncoderParams(p.W - lr * grad_W, p.b - lr * grad_b)


# ------------------------------------------------------------ memory bank


class MemoryBank:
    """Per-sample unit features updated as ``normalize(m*row + (1-m)*v)``."""

    def __init__(self, rows, momentum=0.2):
        self.rows = normalize_rows(rows)
        self.momentum = float(momentum)

    def __len__(self):
        return self.rows.shape[0]

    def copy(self):
        return MemoryBank.__new__(MemoryBank)._set(self.rows.copy(), self.momentum)

    def _set(self, rows, momentum):
        self.rows, self.momentum = rows, momentum
        return self

    def blend(self, row, v):
        if self.momentum == 1.0:
            # exact fixed point; re-normalizing would move the row by an ulp
            return np.array(row, dtype=np.float64)
        return normalize(self.momentum * row + (1.0 - self.momentum) * np.asarray(v, dtype=np.float64))

    def update_many(self, ids, V):
        """Apply :meth:`blend` to each ``(id, v)`` pair in order."""
        ids = np.asarray(ids)
        if self.momentum == 1.0:
            return
        if len(np.unique(ids)) == len(ids):
            mixed = self.momentum * self.rows[ids] + (1.0 - self.momentum) * V
            self.rows[ids] = normalize_rows(mixed)
        else:
            for i, v in zip(ids.tolist(), V):
                self.rows[i] = self.blend(self.rows[i], v)


def memory_update(mem, sample_id, v):
    """Momentum-blend ``v`` into row ``sample_id`` (in place) and return ``mem``."""
    mem.rows[sample_id] = mem.blend(mem.rows[sample_id], v)
    return mem


# -------------------------------------------------------------- centroids


class CentroidSet:
    """Unit centroids used as prototypes in the contrastive loss.

    Rows ``0..K-1`` are cluster centroids. In ``clusters+outliers`` mode the
    following rows are one singleton centroid per outlier (its memory row).
    ``target[i]`` is the row sample ``i`` is pulled towards, or -1.
    ``valid`` is false for degenerate clusters whose mean vanished; those are
    left out of the softmax.
    """

    def __init__(self, memory_rows, labels, mode):
        if mode not in LOSS_MODES:
            raise ValueError(f"unknown loss mode {mode!r}")
        self.mode = mode
        self.num_clusters = labels.num_clusters
        n, dim = memory_rows.shape
        self.sizes = np.array([len(c) for c in labels.clusters], dtype=np.float64)
        self.sums = np.zeros((self.num_clusters, dim))
        for c, members in enumerate(labels.clusters):
            self.sums[c] = memory_rows[members].sum(axis=0)
        self.cluster_of = labels.assignment.copy()
        self.target = labels.assignment.copy()
        self.outlier_ids = labels.outliers.copy() if mode == CLUSTERS_PLUS_OUTLIERS else np.empty(0, np.int64)
        self.target[self.outlier_ids] = self.num_clusters + np.arange(len(self.outlier_ids))
        total = self.num_clusters + len(self.outlier_ids)
        self.vectors = np.zeros((total, dim))
        self.valid = np.ones(total, dtype=bool)
        self._refresh_clusters(np.arange(self.num_clusters))
        if len(self.outlier_ids):
            self.vectors[self.num_clusters:] = memory_rows[self.outlier_ids]

    def __len__(self):
        return len(self.vectors)

    def _refresh_clusters(self, cs):
        if len(cs) == 0:
            return
        means = self.sums[cs] / self.sizes[cs, None]
        norms = np.sqrt(np.einsum("ij,ij->i", means, means))
        ok = norms >= ZERO_NORM_EPS
        self.valid[cs] = ok
        self.vectors[cs] = np.where(ok[:, None], means / np.where(ok, norms, 1.0)[:, None], 0.0)

    def apply_update(self, ids, old_rows, new_rows):
        """Track memory rows ``ids`` having changed from ``old_rows`` to ``new_rows``."""
        cl = self.cluster_of[ids]
        inside = cl != OUTLIER
        if inside.any():
            np.add.at(self.sums, cl[inside], new_rows[inside] - old_rows[inside])
            self._refresh_clusters(np.unique(cl[inside]))
        if self.mode == CLUSTERS_PLUS_OUTLIERS and (~inside).any():
            self.vectors[self.target[ids[~inside]]] = new_rows[~inside]


def centroids(mem, labels, mode=CLUSTERS_PLUS_OUTLIERS):
    rows = mem.rows if isinstance(mem, MemoryBank) else np.asarray(mem, dtype=np.float64)
    return CentroidSet(rows, labels, mode)


# ------------------------------------------------------------------- loss


def _softmax_parts(v, cs, target, tau):
    if target is None or target < 0 or not cs.valid[target]:
        raise NoTarget("sample has no valid centroid in this centroid set")
    logits = cs.vectors @ v / tau
    logits = np.where(cs.valid, logits, -np.inf)
    shift = logits.max()
    e = np.exp(logits - shift)
    z = e.sum()
    return logits, shift, e / z, np.log(z)


def contrastive_loss(v, target, cs, tau=0.05):
    """``-log softmax`` of the similarity to centroid ``target``."""
    logits, shift, _, logz = _softmax_parts(np.asarray(v, dtype=np.float64), cs, target, tau)
    return float(max(0.0, shift + logz - logits[target]))


def loss_gradient_feature(v, target, cs, tau=0.05):
    """``(sum_k p_k c_k - c_target) / tau``."""
    _, _, p, _ = _softmax_parts(np.asarray(v, dtype=np.float64), cs, target, tau)
    # weight of the competitors only: 1 - p_target would cancel when p_target ~ 1
    others = p.copy()
    others[target] = 0.0
    return (others @ cs.vectors - others.sum() * cs.vectors[target]) / tau


def batch_loss_and_grads(O, V, norms, targets, cs, tau):
    """Mean loss and mean parameter gradients over samples with a target."""
    logits = V @ cs.vectors.T / tau
    logits[:, ~cs.valid] = -np.inf
    shift = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - shift)
    z = e.sum(axis=1, keepdims=True)
    P = e / z
    rows = np.arange(len(targets))
    losses = (shift[:, 0] + np.log(z[:, 0])) - logits[rows, targets]
    others = P.copy()
    others[rows, targets] = 0.0
    G_v = (others @ cs.vectors - others.sum(axis=1)[:, None] * cs.vectors[targets]) / tau
    G_z = (G_v - np.einsum("ij,ij->i", G_v, V)[:, None] * V) / norms[:, None]
    count = len(targets)
    return float(np.maximum(losses, 0.0).sum()), (G_z.T @ O / count, G_z.sum(axis=0) / count)


# ------------------------------------------------------------- train loop


@dataclass
class TrainState:
    params: EncoderParams
    memory: MemoryBank
    centroids: CentroidSet | None = None
    epoch: int = 0

    def copy(self):
        return TrainState(self.params.copy(), self.memory.copy(), copy.deepcopy(self.centroids), self.epoch)


def train_epoch(state, observations, labels, schedule, cfg, lr=None):
    """One pass over ``schedule``. Returns ``(new_state, mean_loss)``.

    ``state`` is not modified. Samples without a valid target (outliers in
    ``clusters`` mode, members of degenerate clusters) are encoded and written
    to memory but add neither loss nor gradient. ``mean_loss`` is averaged
    over the samples that had a target, or ``None`` when there were none.
    """
    state = state.copy()
    lr = cfg.lr_at(state.epoch) if lr is None else lr
    cs = centroids(state.memory, labels, cfg.loss_mode)
    total_loss, counted = 0.0, 0
    for ids in batches(schedule, cfg.batch_size):
        O = observations[ids]
        V, norms = encode_batch(state.params, O)
        targets = cs.target[ids]
        has = targets >= 0
        has[has] = cs.valid[targets[has]]
        if has.any():
            loss, grads = batch_loss_and_grads(
                O[has], V[has], norms[has], targets[has], cs, cfg.tau)
            total_loss += loss
            counted += int(has.sum())
            state.params = sgd_step(state.params, grads, lr)
        touched = np.unique(ids)
        old = state.memory.rows[touched].copy()
        state.memory.update_many(ids, V)
        cs.apply_update(touched, old, state.memory.rows[touched])
    state.centroids = cs
    state.epoch += 1
    return state, (total_loss / counted if counted else None)


def make_schedule(labels, cfg, rng):
    s = cfg.sampler
    n = len(labels)
    if s.kind == "random":
        return random_schedule(n, rng)
    if s.kind == "group":
        return group_schedule(labels, s.group_size, cfg.batch_size, rng)
    if s.kind == "block":
        base = group_schedule(labels, s.group_size, cfg.batch_size, rng)
        return block_shuffle(base, s.shuffle_degree, cfg.batch_size, rng)
    if s.kind == "pk":
        return pk_schedule(labels, s.pk_p, s.pk_k, rng)
    raise ValueError(f"unknown sampler kind {s.kind!r}")


def file_precision(F):
    """Round to float32 and back, the precision features are stored at."""
    return np.asarray(F, dtype=np.float32).astype(np.float64)


def cluster_memory(memory_rows, cfg):
    return generate_pseudo_labels(file_precision(memory_rows), cfg.k, cfg.dbscan)


def evaluate_epoch(features, labels, gt, query_mask=None, retrieval_features=None):
    """Clustering metrics for ``labels`` plus optional retrieval scores."""
    m = M.clustering_metrics(features, labels, gt)
    if query_mask is not None and retrieval_features is not None and query_mask.any():
        q, g = query_mask, ~query_mask
        try:
            mAP, cmc, _ = M.retrieval_eval(retrieval_features[q], gt.subset(q),
                                           retrieval_features[g], gt.subset(g))
        except M.NoValidQueries:
            log.warning("no valid retrieval queries")
        else:
            m.map, m.top1, m.top5, m.top10 = mAP, cmc[1], cmc[5], cmc[10]
    return m


def run_training(dataset, cfg, rng, with_metrics=True):
    """Full self-training loop. Returns ``(state, labels, [EpochMetrics])``.

    Memory starts as the encoding of every sample with the initial encoder.
    Each epoch trains on the labeling of the current memory; after the epoch
    the memory is re-clustered, which both yields that epoch's metrics row and
    the labeling for the next epoch.
    """
    obs = dataset.observations
    params = EncoderParams.init(obs.shape[1], cfg.dim_out, rng)
    memory = MemoryBank(encode_batch(params, obs)[0], cfg.momentum)
    state = TrainState(params, memory)
    labels = cluster_memory(memory.rows, cfg)
    history = []
    prev_right = None
    for epoch in range(cfg.epochs):
        if labels.num_clusters == 0:
            log.warning("epoch %d: no cluster formed, every sample is an outlier", epoch)
        if labels.num_clusters == 0 and cfg.loss_mode == CLUSTERS_ONLY:
            state = replace(state, epoch=state.epoch + 1)
            loss = None
        else:
            schedule = make_schedule(labels, cfg, rng)
            state, loss = train_epoch(state, obs, labels, schedule, cfg)
        labels = cluster_memory(state.memory.rows, cfg)
        if not with_metrics:
            continue
        stored = file_precision(state.memory.rows)
        retrieval = encode_batch(state.params, obs)[0] if dataset.query_mask.any() else None
        row = evaluate_epoch(stored, labels, dataset.gt, dataset.query_mask, retrieval)
        row.epoch = epoch
        row.mean_loss = loss
        right = M.correctness(labels, dataset.gt)
        if prev_right is not None:
            row.correction_rate, row.misleading_rate = M.correction_misleading(prev_right, right)
        prev_right = right
        history.append(row)
        log.info("epoch %d: K=%d outliers=%d nmi=%.4f loss=%s", epoch, row.num_clusters,
                 row.num_outliers, row.nmi, "n/a" if loss is None else f"{loss:.4f}")
    return state, labels, history


__all__ = [
    "ALL", "CLUSTERS_ONLY", "CLUSTERS_PLUS_OUTLIERS", "CentroidSet", "EncoderParams",
    "MemoryBank", "NoTarget", "SamplerConfig", "TrainConfig", "TrainState",
    "backprop_params", "centroids", "contrastive_loss", "encode", "encode_batch",
    "loss_gradient_feature", "memory_update", "run_training", "sgd_step", "train_epoch",
]
