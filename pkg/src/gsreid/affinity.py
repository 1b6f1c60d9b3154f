"""Pairwise distances, k-reciprocal neighbor sets and the Jaccard distance.

Neighbor sets are held as dense boolean indicator matrices: row ``p`` marks
the members of the set belonging to sample ``p``. Set intersections are then
matrix products, which keeps the expansion and Jaccard steps vectorized while
staying exact (counts are small integers in float32).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import validate_matrix

_CHUNK = 1024


@dataclass(frozen=True)
class NeighborSets:
    """Ordered k-nearest lists plus one unordered set per sample.

    ``lists[p]`` holds the ``min(k, n - 1)`` nearest other samples of ``p`` in
    ascending distance. ``mask[p, q]`` is true when ``q`` belongs to the set
    of ``p``; which set that is (k-nearest, reciprocal, expanded) depends on
    the function that produced the object.
    """

    k: int
    lists: np.ndarray
    mask: np.ndarray

    @property
    def n(self):
        return self.mask.shape[0]

    def members(self, p):
        return np.flatnonzero(self.mask[p])

    def as_sets(self):
        return [frozenset(np.flatnonzero(row).tolist()) for row in self.mask]


def base_distances(F):
    """``1 - <v_i, v_j>`` on unit rows, symmetrized with an exact zero diagonal."""
    F = validate_matrix(F, normalized=True)
    sim = F @ F.T
    dist = 1.0 - 0.5 * (sim + sim.T)
    np.clip(dist, 0.0, 2.0, out=dist)
    np.fill_diagonal(dist, 0.0)
    return dist


def _membership(lists, n):
    mask = np.zeros((n, n), dtype=bool)
    if lists.shape[1]:
        rows = np.repeat(np.arange(n), lists.shape[1])
        mask[rows, lists.ravel()] = True
    return mask


def knn(Dm, k):
    """k nearest other samples per row, ascending, ties to the smaller id."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    Dm = np.asarray(Dm, dtype=np.float64)
    n = Dm.shape[0]
    width = min(k, n - 1)
    work = Dm.copy()
    # self sorts first and is dropped even when duplicates sit at distance 0
    np.fill_diagonal(work, -np.inf)
    lists = np.empty((n, width), dtype=np.int64)
    if width:
        # every candidate tied with the width-th neighbor is kept before the
        # stable sort, so ties resolve to the smaller id
        cutoff = np.partition(work, width, axis=1)[:, width]
        for p in range(n):
            cand = np.flatnonzero(work[p] <= cutoff[p])
            lists[p] = cand[np.argsort(work[p, cand], kind="stable")][1:width + 1]
    return NeighborSets(k=k, lists=lists, mask=_membership(lists, n))


def _reciprocal_mask(lists, n):
    forward = _membership(lists, n)
    return forward & forward.T


def k_reciprocal(ns):
    """R(p, k) = {q in N(p, k) : p in N(q, k)}."""
    return NeighborSets(k=ns.k, lists=ns.lists, mask=_reciprocal_mask(ns.lists, ns.n))


def expand_reciprocal(ns):
    """Grow each reciprocal set with the half-k reciprocal sets of its members.

    ``R(q, ceil(k/2))`` is merged into ``R*(p)`` when ``q`` is in ``R(p, k)``
    and at least two thirds of ``R(q, ceil(k/2))`` already lie in ``R(p, k)``.
    ``ns`` must come from :func:`k_reciprocal`.
    """
    n = ns.n
    half = math.ceil(ns.k / 2)
    recip = ns.mask
    half_recip = _reciprocal_mask(ns.lists[:, :half], n)
    half_size = half_recip.sum(axis=1)

    recip_f = recip.astype(np.float32)
    half_f = half_recip.astype(np.float32)
    expanded = recip.copy()
    for start in range(0, n, _CHUNK):
        stop = min(start + _CHUNK, n)
        overlap = recip_f[start:stop] @ half_f.T
        passes = recip[start:stop] & (3.0 * overlap >= 2.0 * half_size[None, :])
        grown = passes.astype(np.float32) @ half_f
        expanded[start:stop] |= grown > 0
    return NeighborSets(k=ns.k, lists=ns.lists, mask=expanded)


def jaccard_matrix(expanded):
    """``1 - |A_p & A_q| / |A_p | A_q|`` with ``A_p = R*(p) + {p}``."""
    n = expanded.n
    sets = expanded.mask.copy()
    np.fill_diagonal(sets, True)
    sets_f = sets.astype(np.float32)
    size = sets.sum(axis=1).astype(np.float64)
    dist = np.empty((n, n), dtype=np.float64)
    for start in range(0, n, _CHUNK):
        stop = min(start + _CHUNK, n)
        inter = (sets_f[start:stop] @ sets_f.T).astype(np.float64)
        union = size[start:stop, None] + size[None, :] - inter
        dist[start:stop] = 1.0 - inter / union
    np.fill_diagonal(dist, 0.0)
    return dist


def jaccard_distances(F, k):
    """Full chain from unit features to the Jaccard distance matrix."""
    return jaccard_matrix(expand_reciprocal(k_reciprocal(knn(base_distances(F), k))))
