"""Cluster-quality and retrieval metrics.

Purity, chaos and variances iterate over clusters only; outliers are left
out. NMI treats each outlier as its own singleton cluster.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .core import OUTLIER

_TOPK = (1, 5, 10)


class NoClusters(ValueError):
    pass


class NoValidQueries(ValueError):
    pass


@dataclass
class EpochMetrics:
    epoch: int | None = None
    num_clusters: int = 0
    num_outliers: int = 0
    nmi: float | None = None
    purity: float | None = None
    chaos: float | None = None
    intra_var: float | None = None
    inter_var: float | None = None
    correction_rate: float = 0.0
    misleading_rate: float = 0.0
    mean_loss: float | None = None
    map: float | None = None
    top1: float | None = None
    top5: float | None = None
    top10: float | None = None

    def to_dict(self):
        return asdict(self)


METRIC_COLUMNS = tuple(f.name for f in fields(EpochMetrics))


def _flat_labels(labels):
    """Outliers get fresh labels so each is a singleton cluster."""
    assignment = np.asarray(labels.assignment if hasattr(labels, "assignment") else labels)
    out = assignment.copy()
    mask = out == OUTLIER
    base = out.max(initial=-1) + 1
    out[mask] = base + np.arange(mask.sum())
    return out


def _entropy(counts, n):
    p = counts[counts > 0] / n
    return float(-np.sum(p * np.log(p)))


def nmi(labels, gt):
    """Normalized mutual information with arithmetic-mean normalization."""
    u = _flat_labels(labels)
    v = np.asarray(gt.identity if hasattr(gt, "identity") else gt)
    if len(u) != len(v):
        raise ValueError("labeling and ground truth differ in length")
    n = len(u)
    _, ui = np.unique(u, return_inverse=True)
    _, vi = np.unique(v, return_inverse=True)
    joint = np.zeros((ui.max() + 1, vi.max() + 1))
    np.add.at(joint, (ui, vi), 1.0)
    hu = _entropy(joint.sum(axis=1), n)
    hv = _entropy(joint.sum(axis=0), n)
    if hu + hv == 0.0:
        return 1.0
    r, c = np.nonzero(joint)
    pj = joint[r, c] / n
    pu = joint.sum(axis=1)[r] / n
    pv = joint.sum(axis=0)[c] / n
    mi = float(np.sum(pj * np.log(pj / (pu * pv))))
    return float(min(1.0, max(0.0, 2.0 * mi / (hu + hv))))


def _cluster_identity_counts(labels, gt):
    if labels.num_clusters == 0:
        raise NoClusters("labeling has no clusters")
    return [np.unique(gt.identity[m], return_counts=True) for m in labels.clusters]


def chaos(labels, gt):
    """Mean number of distinct identities per cluster."""
    counts = _cluster_identity_counts(labels, gt)
    return float(np.mean([len(ids) for ids, _ in counts]))


def purity(labels, gt):
    """Mean fraction of each cluster taken by its dominant identity."""
    counts = _cluster_identity_counts(labels, gt)
    return float(np.mean([c.max() / c.sum() for _, c in counts]))


def variances(F, labels):
    """Mean within-cluster spread and spread of cluster means.

    Uses plain (unnormalized) cluster means. Returns ``(intra, inter)``.
    """
    if labels.num_clusters == 0:
        raise NoClusters("labeling has no clusters")
    F = np.asarray(F, dtype=np.float64)
    means = np.stack([F[m].mean(axis=0) for m in labels.clusters])
    intra = np.mean([np.mean(np.sum((F[m] - mu) ** 2, axis=1))
                     for m, mu in zip(labels.clusters, means)])
    inter = np.mean(np.sum((means - means.mean(axis=0)) ** 2, axis=1))
    return float(intra), float(inter)


def correctness(labels, gt):
    """True where a sample's identity is the dominant identity of its cluster.

    The dominant identity of a tied cluster is the smallest identity value.
    Outliers are never correct.
    """
    right = np.zeros(len(labels), dtype=bool)
    for members in labels.clusters:
        ids, counts = np.unique(gt.identity[members], return_counts=True)
        principal = ids[np.argmax(counts)]
        right[members] = gt.identity[members] == principal
    return right


def correction_misleading(prev, curr):
    """Share of previously wrong samples now right, and of right ones now wrong."""
    prev = np.asarray(prev, dtype=bool)
    curr = np.asarray(curr, dtype=bool)
    if prev.shape != curr.shape:
        raise ValueError("correctness vectors differ in length")
    wrong_prev = ~prev
    correction = np.sum(wrong_prev & curr) / max(1, int(wrong_prev.sum()))
    misleading = np.sum(prev & ~curr) / max(1, int(prev.sum()))
    return float(correction), float(misleading)


def retrieval_eval(query_F, query_gt, gallery_F, gallery_gt, topk=_TOPK):
    """Single-query mAP and CMC under same-identity-same-camera exclusion.

    Gallery items are ranked by ``1 - <q, g>``, ties to the smaller gallery
    index. Returns ``(map, {k: cmc_at_k}, num_skipped)``.
    """
    dist = 1.0 - np.asarray(query_F, dtype=np.float64) @ np.asarray(gallery_F, dtype=np.float64).T
    order = np.argsort(dist, axis=1, kind="stable")
    aps = []
    hits = {k: 0 for k in topk}
    skipped = 0
    for qi in range(dist.shape[0]):
        ranked = order[qi]
        same_id = gallery_gt.identity[ranked] == query_gt.identity[qi]
        same_cam = gallery_gt.camera[ranked] == query_gt.camera[qi]
        matches = same_id[~(same_id & same_cam)]
        if not matches.any():
            skipped += 1
            continue
        ranks = np.flatnonzero(matches) + 1
        aps.append(np.mean(np.arange(1, len(ranks) + 1) / ranks))
        for k in topk:
            hits[k] += int(ranks[0] <= k)
    if not aps:
        raise NoValidQueries("no query has a valid positive in the gallery")
    valid = len(aps)
    return float(np.mean(aps)), {k: hits[k] / valid for k in topk}, skipped


def clustering_metrics(F, labels, gt):
    """The clustering columns of :class:`EpochMetrics` for one labeling."""
    m = EpochMetrics(num_clusters=labels.num_clusters, num_outliers=labels.num_outliers)
    m.nmi = nmi(labels, gt)
    if labels.num_clusters:
        m.purity = purity(labels, gt)
        m.chaos = chaos(labels, gt)
        m.intra_var, m.inter_var = variances(F, labels)
    return m
