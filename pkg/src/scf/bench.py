"""Contrastive term counting and loss-level timing."""
from __future__ import annotations

import time
from dataclasses import astuple, dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from .estimator import random_same_class_partner
from .losses import FeatureBatch, LossConfig, self_cl, steg_cl, sup_cl
from .rss import select_positives

BENCH_VARIANTS = ("selfcl", "supcl", "stegcl")
BENCH_COLUMNS = ("variant", "batch", "dim", "repeats", "median_ns", "p10_ns", "p90_ns", "terms")
WARMUPS = 3
MIN_REPEATS = 5


def pair_count_audit(labels) -> tuple[int, int, int]:
    """``(supcl_terms, stegcl_terms, dedup_terms)`` for a labeling.

    >>> pair_count_audit([0, 0, 0, 0])
    (12, 3, 6)
    """
    labels = np.asarray(labels).ravel()
    if labels.size == 0:
        return 0, 0, 0
    c = np.unique(labels, return_counts=True)[1].astype(np.int64)
    sup = int(np.sum(c * (c - 1)))
    return sup, int(np.sum(np.maximum(c - 1, 0))), sup // 2


@dataclass
class BenchResult:
    variant: str
    batch_size: int
    feature_dim: int
    repeats: int
    median_ns: int
    p10_ns: int
    p90_ns: int
    term_count: int

    def row(self) -> tuple:
        return astuple(self)


def time_loss(variant: str, batch_size: int, feature_dim: int, repeats: int,
              rng: np.random.Generator, cfg: LossConfig | None = None) -> BenchResult:
    """Median forward+gradient time of one contrastive loss on a random balanced batch.

    Positive pairs (RSS for stegcl, a random same-class partner for selfcl)
    are drawn once before timing, so the timed section is the loss alone.
    """
    if variant not in BENCH_VARIANTS:
        raise ValueError(f"variant must be one of {BENCH_VARIANTS}, got {variant!r}")
    if repeats < MIN_REPEATS:
        raise ValueError(f"repeats must be >= {MIN_REPEATS}, got {repeats}")
    if batch_size < 4 or batch_size % 2:
        raise ValueError(f"batch_size must be even and >= 4, got {batch_size}")
    cfg = cfg or LossConfig(variant=variant)
    labels = np.tile(np.array([0, 1]), batch_size // 2)
    batch = FeatureBatch(rng.standard_normal((batch_size, feature_dim)), labels)
    if variant == "stegcl":
        pairs = select_positives(labels, rng)
        fn = lambda: steg_cl(batch, pairs, cfg)  # noqa: E731
    elif variant == "supcl":
        fn = lambda: sup_cl(batch, cfg)  # noqa: E731
    else:
        pos = random_same_class_partner(labels, rng)
        fn = lambda: self_cl(batch, pos, cfg)  # noqa: E731

    samples = np.empty(repeats, dtype=np.int64)
    with threadpool_limits(limits=1):
        for _ in range(WARMUPS):
            out = fn()
        for r in range(repeats):
            t0 = time.perf_counter_ns()
            out = fn()
            samples[r] = time.perf_counter_ns() - t0
    p10, med, p90 = np.percentile(samples, [10, 50, 90])
    return BenchResult(variant, batch_size, feature_dim, repeats, int(round(med)),
                       int(round(p10)), int(round(p90)), int(out.term_count))
