"""DBSCAN over a precomputed distance matrix and pseudo-label packaging."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .affinity import jaccard_distances
from .core import OUTLIER, validate_matrix


@dataclass(frozen=True)
class DbscanConfig:
    eps: float = 0.6
    min_pts: int = 4

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError(f"eps must be > 0, got {self.eps}")
        if self.min_pts < 1:
            raise ValueError(f"min_pts must be >= 1, got {self.min_pts}")


@dataclass(frozen=True)
class PseudoLabeling:
    """Cluster assignment per sample; ``OUTLIER`` (-1) marks the outlier set."""

    assignment: np.ndarray
    clusters: list = field(repr=False)
    outliers: np.ndarray = field(repr=False)

    @classmethod
    def from_assignment(cls, assignment):
        """Build from a label array, renumbering clusters by first appearance.

        Clusters with fewer than two members are demoted to outliers.
        """
        assignment = np.asarray(assignment, dtype=np.int64)
        out = np.full(assignment.shape, OUTLIER, dtype=np.int64)
        clusters = []
        seen = {}
        for i, label in enumerate(assignment.tolist()):
            if label == OUTLIER:
                continue
            if label not in seen:
                seen[label] = []
            seen[label].append(i)
        for members in seen.values():
            if len(members) >= 2:
                out[members] = len(clusters)
                clusters.append(np.asarray(members, dtype=np.int64))
        outliers = np.flatnonzero(out == OUTLIER)
        return cls(assignment=out, clusters=clusters, outliers=outliers)

    @property
    def num_clusters(self):
        return len(self.clusters)

    @property
    def num_outliers(self):
        return len(self.outliers)

    def __len__(self):
        return len(self.assignment)


def dbscan(Dm, cfg=DbscanConfig()):
    """Density clustering on a square distance matrix.

    A point is core when at least ``min_pts`` points (itself included) lie
    within ``eps``. Seeds are taken in ascending id order and each cluster is
    expanded breadth-first before the next seed is considered, so a border
    point reachable from several clusters joins the one with the smallest
    seed id. Clusters smaller than two are demoted to outliers.
    """
    Dm = np.asarray(Dm, dtype=np.float64)
    n = Dm.shape[0]
    within = Dm <= cfg.eps
    core = within.sum(axis=1) >= cfg.min_pts
    neighbors = [np.flatnonzero(row) for row in within]

    label = np.full(n, OUTLIER, dtype=np.int64)
    next_id = 0
    for seed in range(n):
        if not core[seed] or label[seed] != OUTLIER:
            continue
        label[seed] = next_id
        queue = deque([seed])
        while queue:
            p = queue.popleft()
            for q in neighbors[p]:
                if label[q] != OUTLIER:
                    continue
                label[q] = next_id
                if core[q]:
                    queue.append(q)
        next_id += 1
    return PseudoLabeling.from_assignment(label)


def generate_pseudo_labels(memory, k=30, cfg=DbscanConfig()):
    """Cluster memory-bank features: Jaccard over k-reciprocal sets, then DBSCAN."""
    memory = validate_matrix(memory, normalized=True)
    return dbscan(jaccard_distances(memory, k), cfg)
