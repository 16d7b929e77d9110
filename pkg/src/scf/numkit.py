"""Numeric substrate: float64 matrices, stable reductions, seeded RNG streams,
power-iteration PCA and a central finite-difference gradient checker.

Matrices are plain ``numpy.ndarray`` objects of dtype float64; ``as_matrix``
is the single validation gate.
"""
from __future__ import annotations

from typing import Callable, Iterable

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

PCA_MAX_ITER = 500
PCA_TOL = 1e-10
PCA_SEED = 0x5CF


def as_matrix(Z, name: str = "Z") -> np.ndarray:
    """Return ``Z`` as a finite 2-D float64 array (copy-free when possible)."""
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {Z.shape}")
    if not np.all(np.isfinite(Z)):
        raise ValueError(f"{name} contains non-finite entries")
    return Z


def similarity_matrix(Z) -> np.ndarray:
    """Pairwise dot products ``S[i, j] = z_i . z_j``.

    The upper triangle is mirrored onto the lower one so the result is
    bitwise symmetric regardless of BLAS summation order.
    """
    Z = as_matrix(Z)
    if Z.shape[0] == 0:
        return np.zeros((0, 0))
    S = Z @ Z.T
    iu = np.triu_indices(S.shape[0], k=1)
    S[(iu[1], iu[0])] = S[iu]
    return S


def log_sum_exp(v) -> float:
    v = np.asarray(v, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("empty reduction")
    m = float(np.max(v))
    if not np.isfinite(m):
        return m
    return m + float(np.log(np.sum(np.exp(v - m))))


def row_log_sum_exp(A: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Row-wise log-sum-exp of ``A`` restricted to ``mask`` (True = included).

    Rows with an empty mask yield ``-inf``.
    """
    if mask is None:
        m = A.max(axis=1, keepdims=True)
        return (m + np.log(np.exp(A - m).sum(axis=1, keepdims=True)))[:, 0]
    masked = np.where(mask, A, -np.inf)
    m = masked.max(axis=1, keepdims=True)
    safe_m = np.where(np.isfinite(m), m, 0.0)
    s = np.where(mask, np.exp(A - safe_m), 0.0).sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore"):
        return (safe_m + np.log(s))[:, 0]


def l2_normalize_rows(Z) -> tuple[np.ndarray, np.ndarray]:
    """Scale every nonzero row to unit Euclidean norm.

    Returns ``(normalized, zero_rows)``; rows flagged in the boolean
    ``zero_rows`` are passed through unchanged.
    """
    Z = as_matrix(Z)
    norms = _row_norms(Z)
    zero = norms == 0.0
    return Z / np.where(zero, 1.0, norms)[:, None], zero


def _row_norms(Z: np.ndarray) -> np.ndarray:
    sq = np.einsum("ij,ij->i", Z, Z)
    if np.all((sq > 1e-290) & (sq < 1e290)):
        return np.sqrt(sq)
    # scale by the row's largest entry so tiny or huge rows don't under/overflow when squared
    s = np.max(np.abs(Z), axis=1, initial=0.0)
    safe = np.where(s > 0, s, 1.0)
    Y = Z / safe[:, None]
    return s * np.sqrt(np.einsum("ij,ij->i", Y, Y))


def l2_normalize_rows_backward(Z: np.ndarray, grad_out: np.ndarray,
                               U: np.ndarray | None = None,
                               norms: np.ndarray | None = None) -> np.ndarray:
    """Pull a gradient w.r.t. normalized rows back to the raw rows.

    For ``u = z / |z|``: ``dz = (g - u (u . g)) / |z|``. Zero rows were passed
    through unchanged, so their gradient passes through too. ``U`` and
    ``norms`` may be supplied from the forward pass.
    """
    if norms is None:
        norms = _row_norms(Z)
    zero = norms == 0.0
    inv = 1.0 / np.where(zero, 1.0, norms)
    if U is None:
        U = Z * inv[:, None]
    proj = np.einsum("ij,ij->i", U, grad_out)
    dZ = (grad_out - U * proj[:, None]) * inv[:, None]
    if zero.any():
        dZ[zero] = grad_out[zero]
    return dZ


# -- random streams ---------------------------------------------------------

def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """PCG64 generator fully determined by ``seed`` and the ``stream`` ids."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.PCG64(ss))


def rng_uniform(rng: np.random.Generator, n: int | None = None):
    return rng.random(n)


def rng_gaussian(rng: np.random.Generator, n: int | None = None):
    return rng.standard_normal(n)


def rng_choice(rng: np.random.Generator, items: Iterable[int]) -> int:
    """Uniform draw from ``items`` after sorting, so set iteration order is irrelevant."""
    pool = sorted(items)
    if not pool:
        raise ValueError("empty selection set")
    return pool[int(rng.integers(len(pool)))]


# -- PCA --------------------------------------------------------------------

def _power_iteration(C: np.ndarray, v0: np.ndarray) -> tuple[float, np.ndarray]:
    v = v0 / np.linalg.norm(v0)
    for _ in range(PCA_MAX_ITER):
        w = C @ v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0, v
        w /= nw
        # eigenvectors are defined up to sign; compare against the aligned copy
        if np.dot(w, v) < 0:
            w = -w
        if np.linalg.norm(w - v) < PCA_TOL:
            v = w
            break
        v = w
    return float(v @ C @ v), v


class PowerIterationPCA(TransformerMixin, BaseEstimator):
    """Top-k principal components via power iteration with deflation.

    Parameters
    ----------
    n_components : int, default=2
    random_state : int, default=PCA_SEED
        Seed of the starting vectors; fixed so projections are reproducible.

    Attributes
    ----------
    mean_ : ndarray of shape (n_features,)
    components_ : ndarray of shape (n_components, n_features)
    explained_variance_ : ndarray of shape (n_components,)
    total_variance_ : float
    """

    def __init__(self, n_components: int = 2, random_state: int = PCA_SEED):
        self.n_components = n_components
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        n, d = X.shape
        if n < 2:
            raise ValueError("insufficient samples")
        self.mean_ = X.mean(axis=0)
        Xc = X - self.mean_
        C = Xc.T @ Xc / (n - 1)
        rng = make_rng(self.random_state)
        comps, evals = [], []
        for _ in range(self.n_components):
            v0 = rng.standard_normal(d)
            for u in comps:
                v0 -= (v0 @ u) * u
            lam, v = _power_iteration(C, v0)
            for u in comps:
                v -= (v @ u) * u
            nv = np.linalg.norm(v)
            v = v / nv if nv > 0 else v
            # deterministic sign: largest-magnitude coordinate positive
            if v[np.argmax(np.abs(v))] < 0:
                v = -v
            comps.append(v)
            evals.append(max(lam, 0.0))
            C = C - lam * np.outer(v, v)
        self.components_ = np.array(comps)
        self.explained_variance_ = np.array(evals)
        self.total_variance_ = float(np.trace(Xc.T @ Xc) / (n - 1))
        return self

    def transform(self, X):
        check_is_fitted(self, "components_")
        X = check_array(X, dtype=np.float64)
        return (X - self.mean_) @ self.components_.T


def pca_2d(Z) -> np.ndarray:
    """Project rows of ``Z`` onto its top-2 principal directions."""
    Z = as_matrix(Z)
    if Z.shape[0] < 2:
        raise ValueError("insufficient samples")
    return PowerIterationPCA(n_components=2).fit_transform(Z)


# -- gradient checking ------------------------------------------------------

def finite_diff_grad(f: Callable[[np.ndarray], float], X, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``X``, one entry at a time."""
    if not h > 0:
        raise ValueError("step h must be positive")
    X = np.array(X, dtype=np.float64)
    G = np.zeros_like(X)
    flat, gflat = X.reshape(-1), G.reshape(-1)
    for idx in range(flat.size):
        x0 = flat[idx]
        flat[idx] = x0 + h
        fp = float(f(X))
        flat[idx] = x0 - h
        fm = float(f(X))
        flat[idx] = x0
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError(f"non-finite function value at entry {idx}")
        gflat[idx] = (fp - fm) / (2.0 * h)
    return G


def rel_err(a, b) -> float:
    """Norm-wise relative error ``|a - b| / max(|a|, |b|)`` (0 when both vanish)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    den = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if den == 0.0 else float(np.linalg.norm(a - b) / den)

