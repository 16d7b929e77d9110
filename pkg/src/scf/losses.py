"""Contrastive losses (self-supervised, supervised, steganalysis) and softmax
cross-entropy, each returning the loss value together with its exact
gradient with respect to the feature matrix.

All contrastive losses are *sums* over their log terms; ``term_count`` tells
the caller how many terms went in so it can mean-normalize.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import sparse

from .numkit import as_matrix, l2_normalize_rows, l2_normalize_rows_backward, row_log_sum_exp
from .rss import PairSelection

VARIANTS = ("none", "selfcl", "supcl", "stegcl")


@dataclass
class LossConfig:
    tau: float = 0.1
    normalize_features: bool = True
    lam: float = 1.0
    variant: str = "stegcl"
    include_positive_in_denominator: bool = False

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if not self.lam >= 0:
            raise ValueError(f"lambda must be non-negative, got {self.lam}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown loss variant {self.variant!r}; expected one of {VARIANTS}")


@dataclass
class FeatureBatch:
    Z: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.Z = as_matrix(self.Z)
        self.labels = np.asarray(self.labels).astype(np.intp).ravel()
        if self.labels.shape[0] != self.Z.shape[0]:
            raise ValueError(
                f"labels length {self.labels.shape[0]} does not match batch size {self.Z.shape[0]}"
            )
        if np.any((self.labels != 0) & (self.labels != 1)):
            raise ValueError("labels must be 0 (cover) or 1 (stego)")

    @property
    def size(self) -> int:
        return self.Z.shape[0]


@dataclass
class LossOutput:
    value: float
    grad: np.ndarray
    term_count: int


def _features(batch: FeatureBatch, cfg: LossConfig) -> np.ndarray:
    if cfg.normalize_features:
        return l2_normalize_rows(batch.Z)[0]
    return batch.Z


def _to_input_grad(batch: FeatureBatch, cfg: LossConfig, dU: np.ndarray, U: np.ndarray) -> np.ndarray:
    if cfg.normalize_features:
        return l2_normalize_rows_backward(batch.Z, dU, U=U)
    return dU


def _dense_backward(U: np.ndarray, G: np.ndarray, tau: float) -> np.ndarray:
    """Gradient w.r.t. ``U`` of ``sum(G * (U @ U.T / tau))`` for a constant ``G``."""
    return (G + G.T) @ U / tau


def _pair_backward(n: int, a: np.ndarray, p: np.ndarray, g: np.ndarray,
                   Ua: np.ndarray, Up: np.ndarray) -> np.ndarray:
    """Gradient of ``sum_t g_t * (u_a_t . u_p_t)`` w.r.t. all ``n`` rows.

    A sparse incidence product; indices may repeat.
    """
    m = a.size
    cols = np.arange(2 * m)
    M = sparse.csr_matrix((np.concatenate([g, g]), (np.concatenate([a, p]), cols)), shape=(n, 2 * m))
    return M @ np.concatenate([Up, Ua])


def _offdiag_softmax(L: np.ndarray):
    """Stable softmax over k != i for the logit matrix ``L`` (diagonal overwritten).

    Returns ``(m, P, log1p_rest)``: the row max, the softmax probabilities
    and ``log(sum_k exp(L_ik - m_i))`` computed as ``log1p`` of the sum of all
    but the max entry, so a term ``(m_i - L_ij) + log1p_rest_i`` stays accurate
    when the loss is close to zero.
    """
    B = L.shape[0]
    np.fill_diagonal(L, -np.inf)
    am = L.argmax(axis=1)
    rows = np.arange(B)
    m = L[rows, am]
    E = np.exp(L - m[:, None])
    E[rows, am] = 0.0
    rest = E.sum(axis=1)
    E[rows, am] = 1.0
    P = E / (1.0 + rest)[:, None]
    return m, P, np.log1p(rest)


def self_cl(batch: FeatureBatch, positive_map, cfg: LossConfig) -> LossOutput:
    """One positive per anchor, every other sample in the denominator."""
    B = batch.size
    if B < 2:
        raise ValueError("no contrast possible: batch needs at least 2 samples")
    pos = np.asarray(positive_map, dtype=np.intp).ravel()
    if pos.shape[0] != B:
        raise ValueError("positive_map must have one entry per anchor")
    if np.any(pos < 0) or np.any(pos >= B):
        raise ValueError("positive_map index out of range")
    rows = np.arange(B)
    if np.any(pos == rows):
        raise ValueError("positive_map maps an anchor to itself")

    U = _features(batch, cfg)
    L = U @ U.T / cfg.tau
    m, P, log1p_rest = _offdiag_softmax(L)
    value = float(np.sum((m - L[rows, pos]) + log1p_rest))

    P[rows, pos] -= 1.0
    grad = _to_input_grad(batch, cfg, _dense_backward(U, P, cfg.tau), U)
    return LossOutput(value, grad, B)


def sup_cl(batch: FeatureBatch, cfg: LossConfig) -> LossOutput:
    """Every same-class sample is a positive; per-anchor terms are averaged.

    Positive averages go through per-class sums, so no B x B label mask is
    built; the dense work is the softmax denominator.
    """
    B = batch.size
    if B < 2:
        raise ValueError("no contrast possible: batch needs at least 2 samples")
    y = batch.labels
    counts = np.bincount(y, minlength=2)
    n_pos = counts[y] - 1
    if np.any(n_pos == 0):
        raise ValueError("anchor without positive: every class needs at least 2 members")

    tau = cfg.tau
    U = _features(batch, cfg)
    L = U @ U.T / tau
    m, P, log1p_rest = _offdiag_softmax(L)

    onehot = np.zeros((B, 2))
    onehot[np.arange(B), y] = 1.0
    gap = m[:, None] - L  # >= 0 off the diagonal
    np.fill_diagonal(gap, 0.0)
    pos_gap = (gap @ onehot)[np.arange(B), y] / n_pos
    value = float(np.sum(pos_gap + log1p_rest))

    # mean positive feature per anchor: (class sum - self) / (C - 1)
    class_sum = onehot.T @ U
    pos_mean = (class_sum[y] - U) / n_pos[:, None]
    # same-class anchors share n_pos, so the positive-average term is symmetric
    dU = ((P + P.T) @ U - 2.0 * pos_mean) / tau
    grad = _to_input_grad(batch, cfg, dU, U)
    return LossOutput(value, grad, int(np.sum(n_pos)))


def steg_cl(batch: FeatureBatch, pairs: PairSelection, cfg: LossConfig) -> LossOutput:
    """One log term per selected (anchor, positive) pair; the denominator
    holds only the anchor's different-class samples (plus the positive when
    ``cfg.include_positive_in_denominator``).

    Only the cover x stego similarity block is formed. Cover anchors read
    it by rows and stego anchors by columns, so one exponential serves both.
    """
    B, d = batch.Z.shape
    y = batch.labels
    anchors = pairs.anchors
    positives = pairs.positives
    if anchors.size == 0:
        warnings.warn("steg_cl received no pairs; loss is 0", RuntimeWarning, stacklevel=2)
        return LossOutput(0.0, np.zeros((B, d)), 0)
    if np.any(anchors == positives):
        raise ValueError("pair anchors must differ from their positives")
    if np.any(y[anchors] != y[positives]):
        raise ValueError("pair members must share a label")
    n_cover = int(np.count_nonzero(y == 0))
    if n_cover == 0 or n_cover == B:
        raise ValueError("empty negative set: StegCL needs both classes in the batch")

    tau = cfg.tau
    U = _features(batch, cfg)
    # work in class-sorted order: covers first, then stegoes
    perm = np.argsort(y, kind="stable")
    inv = np.empty(B, dtype=np.intp)
    inv[perm] = np.arange(B)
    Uo = U[perm]
    Uc, Us = Uo[:n_cover], Uo[n_cover:]
    a, p = inv[anchors], inv[positives]

    K = (Uc @ Us.T) / tau  # K[r, c] = logit(cover r, stego c)
    row_lse, col_lse, E, row_sum, col_sum = _block_lse(K)
    lse_neg = np.concatenate([row_lse, col_lse])[a]
    Ua, Up = Uo[a], Uo[p]
    s_pos = np.einsum("ij,ij->i", Ua, Up) / tau

    gap = lse_neg - s_pos
    if cfg.include_positive_in_denominator:
        terms = np.logaddexp(0.0, gap)
        neg_w = np.exp(gap - terms)  # share of the denominator held by negatives
    else:
        terms = gap
        neg_w = np.ones(a.size)
    value = float(np.sum(terms))

    # d/dK: row softmax weighted by cover-anchor use, column softmax by stego-anchor use
    w = np.bincount(a, weights=neg_w, minlength=B)
    row_w, col_w = w[:n_cover], w[n_cover:]
    if E is None:
        G = np.exp(K - row_lse[:, None]) * row_w[:, None] + np.exp(K - col_lse[None, :]) * col_w[None, :]
    else:
        G = E * ((row_w / row_sum)[:, None] + (col_w / col_sum)[None, :])
    dUo = np.concatenate([G @ Us, G.T @ Uc]) / tau

    # positive logits s_ap = u_a . u_p / tau
    dUo += _pair_backward(B, a, p, -neg_w / tau, Ua, Up)

    grad = _to_input_grad(batch, cfg, dUo[inv], U)
    return LossOutput(value, grad, int(a.size))


def _block_lse(K: np.ndarray):
    """Row- and column-wise log-sum-exp of ``K``.

    Uses one shared exponential shifted by the global max when that cannot
    underflow a whole row or column; otherwise falls back to per-axis shifts.
    Returns ``(row_lse, col_lse, E, row_sums, col_sums)`` where ``E = exp(K - max)``
    and the sums are its marginals, or ``E`` and sums are ``None`` on fallback.
    """
    m = K.max()
    if K.min() - m > -700.0:
        E = np.exp(K - m)
        rs = E.sum(axis=1)
        cs = E.sum(axis=0)
        return m + np.log(rs), m + np.log(cs), E, rs, cs
    return row_log_sum_exp(K), row_log_sum_exp(K.T), None, None, None


def cross_entropy(logits, labels) -> LossOutput:
    """Batch-mean softmax cross-entropy; gradient is ``(softmax - onehot) / B``."""
    X = as_matrix(logits, "logits")
    y = np.asarray(labels, dtype=np.intp).ravel()
    B = X.shape[0]
    if y.shape[0] != B:
        raise ValueError("labels length does not match logits")
    if B == 0:
        return LossOutput(0.0, np.zeros_like(X), 0)
    lse = row_log_sum_exp(X)
    rows = np.arange(B)
    value = float(np.mean(lse - X[rows, y]))
    P = np.exp(X - lse[:, None])
    P[rows, y] -= 1.0
    return LossOutput(value, P / B, B)


def contrastive(batch: FeatureBatch, cfg: LossConfig, pairs: PairSelection | None = None,
                positive_map=None) -> LossOutput:
    """Dispatch on ``cfg.variant``."""
    if cfg.variant == "none":
        return LossOutput(0.0, np.zeros_like(batch.Z), 0)
    if cfg.variant == "selfcl":
        if positive_map is None:
            raise ValueError("selfcl needs a positive_map")
        return self_cl(batch, positive_map, cfg)
    if cfg.variant == "supcl":
        return sup_cl(batch, cfg)
    if pairs is None:
        raise ValueError("stegcl needs a PairSelection")
    return steg_cl(batch, pairs, cfg)
