"""Nested-loop reference values for the contrastive losses.

Plain ``math.exp``/``math.log`` with no stabilization and no vectorization;
only meant for small batches with bounded logits. Each function also returns
the number of log terms it evaluated.
"""
from __future__ import annotations

import math

import numpy as np

from .losses import FeatureBatch, LossConfig
from .rss import PairSelection


def _rows(batch: FeatureBatch, cfg: LossConfig) -> list[list[float]]:
    rows = []
    for z in batch.Z:
        z = [float(v) for v in z]
        if cfg.normalize_features:
            n = math.sqrt(sum(v * v for v in z))
            if n > 0:
                z = [v / n for v in z]
        rows.append(z)
    return rows


def _dot(a, b) -> float:
    return sum(x * y for x, y in zip(a, b))


def oracle_self_cl(batch: FeatureBatch, positive_map, cfg: LossConfig) -> tuple[float, int]:
    z = _rows(batch, cfg)
    B = len(z)
    if B < 2:
        raise ValueError("no contrast possible")
    total, terms = 0.0, 0
    for i in range(B):
        j = int(positive_map[i])
        if j == i:
            raise ValueError("positive_map maps an anchor to itself")
        den = sum(math.exp(_dot(z[i], z[k]) / cfg.tau) for k in range(B) if k != i)
        total += -math.log(math.exp(_dot(z[i], z[j]) / cfg.tau) / den)
        terms += 1
    return total, terms


def oracle_sup_cl(batch: FeatureBatch, cfg: LossConfig) -> tuple[float, int]:
    z = _rows(batch, cfg)
    y = [int(v) for v in batch.labels]
    B = len(z)
    total, terms = 0.0, 0
    for i in range(B):
        n_same = sum(1 for j in range(B) if y[j] == y[i])
        if n_same - 1 == 0:
            raise ValueError("anchor without positive")
        acc = 0.0
        for j in range(B):
            if j == i or y[j] != y[i]:
                continue
            den = sum(math.exp(_dot(z[i], z[k]) / cfg.tau) for k in range(B) if k != i)
            acc += math.log(math.exp(_dot(z[i], z[j]) / cfg.tau) / den)
            terms += 1
        total += -acc / (n_same - 1)
    return total, terms


def oracle_steg_cl(batch: FeatureBatch, pairs: PairSelection, cfg: LossConfig) -> tuple[float, int]:
    z = _rows(batch, cfg)
    y = [int(v) for v in batch.labels]
    B = len(z)
    total, terms = 0.0, 0
    for i, p in pairs.pairs:
        negs = [k for k in range(B) if k != i and y[k] != y[i]]
        if not negs:
            raise ValueError("empty negative set")
        num = math.exp(_dot(z[i], z[p]) / cfg.tau)
        den = sum(math.exp(_dot(z[i], z[k]) / cfg.tau) for k in negs)
        if cfg.include_positive_in_denominator:
            den += num
        total += -math.log(num / den)
        terms += 1
    return total, terms


def brute_force_pe(scores, labels) -> tuple[float, float, float, float]:
    """O(n^2) sweep: every midpoint of sorted unique scores plus both infinities."""
    scores = [float(s) for s in scores]
    labels = [int(v) for v in labels]
    n_cover = labels.count(0)
    n_stego = labels.count(1)
    if n_cover == 0 or n_stego == 0:
        raise ValueError("both classes required")
    u = sorted(set(scores))
    thresholds = [-math.inf] + [(a + b) / 2 for a, b in zip(u, u[1:])] + [math.inf]
    best = None
    for t in thresholds:
        fa = sum(1 for s, l in zip(scores, labels) if l == 0 and s >= t)
        md = sum(1 for s, l in zip(scores, labels) if l == 1 and s < t)
        pfa, pmd = fa / n_cover, md / n_stego
        pe = 0.5 * (pfa + pmd)
        if best is None or pe < best[0]:
            best = (pe, pfa, pmd, t)
    return best


def brute_force_silhouette(Z, labels) -> float:
    Z = np.asarray(Z, dtype=float)
    labels = list(np.asarray(labels).ravel())
    n = len(labels)
    acc = 0.0
    for i in range(n):
        same = [math.dist(Z[i], Z[j]) for j in range(n) if j != i and labels[j] == labels[i]]
        other = [math.dist(Z[i], Z[j]) for j in range(n) if labels[j] != labels[i]]
        a = sum(same) / len(same)
        b = sum(other) / len(other)
        m = max(a, b)
        acc += 0.0 if m == 0 else (b - a) / m
    return acc / n
