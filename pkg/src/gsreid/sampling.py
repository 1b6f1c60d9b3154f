"""Batch schedulers: group sampling, random, block shuffle and PK sampling.

Every scheduler returns a :class:`Schedule` holding the flat sample order.
Batches are consecutive slices of that order (see :func:`batches`); groups are
not aligned to batch boundaries.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import OUTLIER

ALL = "all"


class EmptyInput(ValueError):
    pass


class TooFewClusters(ValueError):
    pass


@dataclass(frozen=True)
class Group:
    members: np.ndarray
    origin: int


@dataclass(frozen=True)
class Schedule:
    """Flat sampling order plus the extent and origin of each group.

    ``bounds[i]`` is the ``(start, stop)`` slice of group ``i`` in ``order``.
    ``may_repeat`` is set by samplers that draw with replacement.
    """

    order: np.ndarray
    bounds: tuple
    origins: tuple
    kind: str
    may_repeat: bool = False

    def __len__(self):
        return len(self.order)

    @property
    def groups(self):
        return [Group(self.order[a:b], o) for (a, b), o in zip(self.bounds, self.origins)]


def _from_groups(groups, kind, may_repeat=False):
    bounds, origins, pieces = [], [], []
    pos = 0
    for g in groups:
        bounds.append((pos, pos + len(g.members)))
        origins.append(g.origin)
        pieces.append(g.members)
        pos += len(g.members)
    order = np.concatenate(pieces) if pieces else np.empty(0, dtype=np.int64)
    return Schedule(order.astype(np.int64), tuple(bounds), tuple(origins), kind, may_repeat)


def _chunks(ids, size):
    return [ids[i:i + size] for i in range(0, len(ids), size)]


def group_schedule(labels, N, B, rng):
    """Pack each cluster into groups of ``N`` and outliers into groups of ``B``.

    Clusters are visited in shuffled order with their members shuffled; the
    leftover of a cluster (fewer than ``N``) becomes one short group. All
    groups are then shuffled together and concatenated.
    """
    if N < 1 or B < 1:
        raise ValueError(f"N and B must be >= 1, got N={N}, B={B}")
    if len(labels) == 0:
        raise EmptyInput("cannot schedule an empty labeling")
    groups = []
    for c in rng.permutation(labels.num_clusters):
        members = rng.permutation(labels.clusters[c])
        groups.extend(Group(chunk, int(c)) for chunk in _chunks(members, N))
    outliers = rng.permutation(labels.outliers)
    groups.extend(Group(chunk, OUTLIER) for chunk in _chunks(outliers, B))
    groups = [groups[i] for i in rng.permutation(len(groups))]
    return _from_groups(groups, "group")


def random_schedule(n, rng):
    if n < 1:
        raise EmptyInput("n must be >= 1")
    return Schedule(rng.permutation(n).astype(np.int64), ((0, n),), (OUTLIER,), "random")


def block_shuffle(base, M, B, rng):
    """Shuffle within consecutive blocks of ``M`` batches of ``base.order``.

    ``M=ALL`` (or any ``M`` covering the whole order) is a single
    ``rng.permutation`` of the base order.
    """
    order = base.order
    n = len(order)
    if M == ALL:
        span = n
    elif int(M) < 1 or B < 1:
        raise ValueError(f"M and B must be >= 1, got M={M}, B={B}")
    else:
        span = int(M) * B
    span = max(1, min(span, n))
    new_order = np.concatenate([rng.permutation(order[i:i + span]) for i in range(0, n, span)])
    return Schedule(new_order.astype(np.int64), ((0, n),), (OUTLIER,), f"block-{M}", base.may_repeat)


def pk_schedule(labels, P, K, rng):
    """Identity-balanced batches: ``P`` distinct clusters times ``K`` members.

    Produces ``ceil(n / (P*K))`` batches; members are drawn with replacement
    only when a cluster is smaller than ``K``.
    """
    if labels.num_clusters < P:
        raise TooFewClusters(f"need {P} clusters per batch, have {labels.num_clusters}")
    n = len(labels)
    groups = []
    for _ in range(math.ceil(n / (P * K))):
        for c in rng.choice(labels.num_clusters, size=P, replace=False):
            members = labels.clusters[c]
            picked = rng.choice(members, size=K, replace=len(members) < K)
            groups.append(Group(picked, int(c)))
    return _from_groups(groups, "pk", may_repeat=True)


def batches(s, B):
    """Consecutive slices of length ``B``; the final partial batch is kept."""
    if B < 1:
        raise ValueError(f"B must be >= 1, got {B}")
    order = s.order if isinstance(s, Schedule) else np.asarray(s)
    return [order[i:i + B] for i in range(0, len(order), B)]
