"""Detection-error metrics and feature-cluster separation."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial.distance import cdist


@dataclass
class EvalReport:
    p_e: float
    accuracy: float
    p_fa: float
    p_md: float
    threshold_at_min: float
    silhouette: float
    n: int

    def as_lines(self) -> list[str]:
        keys = {"p_e": "pe", "accuracy": "acc", "p_fa": "pfa", "p_md": "pmd",
                "threshold_at_min": "threshold", "silhouette": "silhouette", "n": "n"}
        return [f"{keys[k]}={v}" for k, v in asdict(self).items()]


def _two_class(labels) -> tuple[np.ndarray, int, int]:
    y = np.asarray(labels).astype(np.intp).ravel()
    n_cover = int(np.count_nonzero(y == 0))
    n_stego = int(np.count_nonzero(y == 1))
    if n_cover == 0 or n_stego == 0:
        raise ValueError("both classes must be present")
    if n_cover + n_stego != y.size:
        raise ValueError("labels must be 0 (cover) or 1 (stego)")
    return y, n_cover, n_stego


def p_e(scores, labels) -> tuple[float, float, float, float]:
    """Minimum of ``(P_FA + P_MD) / 2`` over thresholds, deciding stego when ``score >= t``.

    Candidate thresholds are the midpoints between consecutive distinct
    scores plus ``-inf`` and ``+inf``; ties go to the lowest threshold.

    Returns
    -------
    (p_e, p_fa, p_md, threshold)
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y, n_cover, n_stego = _two_class(labels)
    if s.size != y.size:
        raise ValueError("scores and labels differ in length")
    u = np.unique(s)
    thresholds = np.concatenate([[-np.inf], (u[:-1] + u[1:]) / 2.0, [np.inf]])
    # number of samples of each class strictly below each threshold
    below_cover = np.searchsorted(np.sort(s[y == 0]), thresholds, side="left")
    below_stego = np.searchsorted(np.sort(s[y == 1]), thresholds, side="left")
    fa = n_cover - below_cover
    md = below_stego
    pfa = fa / n_cover
    pmd = md / n_stego
    pe = 0.5 * (pfa + pmd)
    k = int(np.argmin(pe))
    return float(pe[k]), float(pfa[k]), float(pmd[k]), float(thresholds[k])


def silhouette(Z, labels) -> float:
    """Mean silhouette coefficient with Euclidean distances.

    Samples whose intra- and inter-class mean distances are both zero score 0.
    """
    Z = np.asarray(Z, dtype=np.float64)
    y, n_cover, n_stego = _two_class(labels)
    if min(n_cover, n_stego) < 2:
        raise ValueError("each class needs at least 2 members")
    D = cdist(Z, Z)
    onehot = np.stack([y == 0, y == 1], axis=1).astype(np.float64)
    sums = D @ onehot
    counts = onehot.sum(axis=0)
    rows = np.arange(y.size)
    a = sums[rows, y] / (counts[y] - 1)
    b = sums[rows, 1 - y] / counts[1 - y]
    m = np.maximum(a, b)
    s = np.where(m > 0, (b - a) / np.where(m > 0, m, 1.0), 0.0)
    return float(s.mean())
