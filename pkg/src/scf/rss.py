"""Disjoint-set forest and the random selection strategy for positives.

Within each label class the anchors are visited in ascending sample order
(all but the last member). Each anchor draws its positive uniformly from the
class members that are *not* yet in its component, then the two components
are merged. A class of C members therefore yields C - 1 pairs that form a
spanning tree of the class.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .numkit import rng_choice


class DisjointSet:
    """Union by rank with path compression."""

    def __init__(self, size: int):
        self.parent = list(range(size))
        self.rank = [0] * size
        self.components = size

    def __len__(self):
        return len(self.parent)

    def _check(self, i):
        if not 0 <= i < len(self.parent):
            raise IndexError(f"index {i} out of range for disjoint set of size {len(self.parent)}")

    def find(self, i: int) -> int:
        self._check(i)
        root = i
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[i] != root:
            self.parent[i], i = root, self.parent[i]
        return root

    def union(self, a: int, b: int) -> bool:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        if self.rank[ra] < self.rank[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        if self.rank[ra] == self.rank[rb]:
            self.rank[ra] += 1
        self.components -= 1
        return True

    def members(self, i: int) -> list[int]:
        r = self.find(i)
        return [k for k in range(len(self.parent)) if self.find(k) == r]


def ds_find(ds: DisjointSet, i: int) -> int:
    return ds.find(i)


def ds_union(ds: DisjointSet, a: int, b: int) -> bool:
    return ds.union(a, b)


@dataclass
class PairSelection:
    pairs: list[tuple[int, int]] = field(default_factory=list)
    skipped_classes: list[int] = field(default_factory=list)

    @cached_property
    def _arrays(self) -> np.ndarray:
        return np.array(self.pairs, dtype=np.intp).reshape(-1, 2)

    @property
    def anchors(self) -> np.ndarray:
        return self._arrays[:, 0]

    @property
    def positives(self) -> np.ndarray:
        return self._arrays[:, 1]

    def __len__(self):
        return len(self.pairs)


def select_positives(labels, rng: np.random.Generator) -> PairSelection:
    """Draw one positive per anchor so every class ends up a single component.

    Parameters
    ----------
    labels : array-like of int, shape (B,)
    rng : numpy Generator
        Consumed in class order (ascending label), anchor order within a class.

    Returns
    -------
    PairSelection
        ``(anchor, positive)`` batch indices; classes with one member are
        reported in ``skipped_classes``.
    """
    labels = np.asarray(labels).ravel()
    if labels.size == 0:
        raise ValueError("empty label array")
    pairs: list[tuple[int, int]] = []
    skipped: list[int] = []
    for cls in np.unique(labels):
        members = np.flatnonzero(labels == cls).tolist()
        if len(members) < 2:
            skipped.append(int(cls))
            continue
        ds = DisjointSet(len(members))
        for local in range(len(members) - 1):
            root = ds.find(local)
            candidates = [k for k in range(len(members)) if ds.find(k) != root]
            chosen = rng_choice(rng, candidates)
            pairs.append((members[local], members[chosen]))
            ds.union(local, chosen)
    return PairSelection(pairs, skipped)
