"""scikit-learn style cover/stego classifier trained with CE + contrastive loss."""
from __future__ import annotations

import logging
import time

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .losses import LossConfig, FeatureBatch, contrastive, cross_entropy
from .metrics import p_e
from .model import ModelConfig, backward, dumps_checkpoint, forward, init_params, loads_checkpoint
from .numkit import make_rng
from .rss import select_positives

logger = logging.getLogger(__name__)

LOSS_CHOICES = {"ce": "none", "ce+selfcl": "selfcl", "ce+supcl": "supcl", "ce+stegcl": "stegcl"}

# RNG stream ids derived from random_state
INIT_STREAM = 10
ORDER_STREAM = 11
RSS_STREAM = 12


class TrainingDivergedError(FloatingPointError):
    """Raised when the training objective becomes non-finite."""


class _Adam:
    def __init__(self, lr, beta1, beta2, eps):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m, self.v, self.t = {}, {}, 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            m = self.m[k] = self.beta1 * self.m.get(k, 0.0) + (1.0 - self.beta1) * g
            v = self.v[k] = self.beta2 * self.v.get(k, 0.0) + (1.0 - self.beta2) * g * g
            params[k] = params[k] - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class _SGD:
    def __init__(self, lr):
        self.lr = lr

    def step(self, params, grads):
        for k, g in grads.items():
            params[k] = params[k] - self.lr * g


def to_unit_range(X) -> np.ndarray:
    """Validate an (n, H, W) stack of 8-bit images and scale to [0, 1]."""
    X = check_array(X, allow_nd=True, dtype=np.float64, ensure_2d=False)
    if X.ndim != 3 or X.shape[1] != X.shape[2]:
        raise ValueError(f"expected square images of shape (n, H, W), got {X.shape}")
    if X.min() < 0 or X.max() > 255:
        raise ValueError("pixel values must lie in [0, 255]")
    return X / 255.0


def pair_up(y, pair_ids=None) -> np.ndarray:
    """``(n_pairs, 2)`` array of (cover index, stego index).

    Without ``pair_ids`` the k-th cover is paired with the k-th stego.
    """
    y = np.asarray(y).ravel()
    if pair_ids is None:
        cov, steg = np.flatnonzero(y == 0), np.flatnonzero(y == 1)
        if cov.size != steg.size:
            raise ValueError("unpaired data needs equal numbers of covers and stegoes")
        return np.stack([cov, steg], axis=1)
    pair_ids = np.asarray(pair_ids).ravel()
    out = []
    for pid in np.unique(pair_ids):
        idx = np.flatnonzero(pair_ids == pid)
        cov = idx[y[idx] == 0]
        steg = idx[y[idx] == 1]
        if cov.size != 1 or steg.size != 1:
            raise ValueError(f"pair {pid} must hold exactly one cover and one stego")
        out.append((cov[0], steg[0]))
    return np.array(out, dtype=np.intp).reshape(-1, 2)


class SCFClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Cover/stego classifier with an optional contrastive term on its features.

    Each step draws a balanced batch of cover/stego pairs, runs the network,
    and backpropagates ``CE + lam * contrastive / term_count``. The
    contrastive gradient enters at the feature vector ``z``; the CE gradient at
    the logits. With ``lam == 0`` the contrastive backward path is skipped
    altogether.

    Parameters
    ----------
    loss : {"ce", "ce+selfcl", "ce+supcl", "ce+stegcl"}
    tau : float
        Contrastive temperature.
    lam : float
        Weight of the mean-normalized contrastive term.
    normalize_features : bool
        L2-normalize z before the contrastive loss.
    include_positive_in_denominator : bool
        StegCL only: add the positive to the negative sum.
    channels, feature_dim, trainable_preprocessing :
        Network shape, see :class:`scf.model.ModelConfig`.
    epochs, batch_size, learning_rate, optimizer, beta1, beta2, eps :
        Optimization settings; ``batch_size`` counts images and must be even.
    random_state : int
        Seeds initialization, batch order and positive sampling.
    record_time : bool
        Store wall-clock seconds per epoch in ``history_`` (otherwise 0.0,
        which keeps the history reproducible byte for byte).

    Attributes
    ----------
    params_ : dict of ndarray
        Parameters of the best-validation epoch (last epoch without validation data).
    model_config_ : ModelConfig
    history_ : list of dict
        One row per epoch: ``epoch, ce_loss, contrastive_loss, val_pe, val_acc, seconds``.
    best_epoch_ : int
    classes_ : ndarray, [0, 1]
    """

    def __init__(self, loss="ce+stegcl", tau=0.1, lam=1.0, normalize_features=True,
                 include_positive_in_denominator=False, channels=(8, 16), feature_dim=32,
                 trainable_preprocessing=False, epochs=30, batch_size=32, learning_rate=1e-3,
                 optimizer="adam", beta1=0.9, beta2=0.999, eps=1e-8, random_state=1,
                 record_time=False):
        self.loss = loss
        self.tau = tau
        self.lam = lam
        self.normalize_features = normalize_features
        self.include_positive_in_denominator = include_positive_in_denominator
        self.channels = channels
        self.feature_dim = feature_dim
        self.trainable_preprocessing = trainable_preprocessing
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.optimizer = optimizer
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.random_state = random_state
        self.record_time = record_time

    # -- configuration ----------------------------------------------------

    def _loss_config(self) -> LossConfig:
        if self.loss not in LOSS_CHOICES:
            raise ValueError(f"loss must be one of {sorted(LOSS_CHOICES)}, got {self.loss!r}")
        return LossConfig(tau=self.tau, normalize_features=self.normalize_features, lam=self.lam,
                          variant=LOSS_CHOICES[self.loss],
                          include_positive_in_denominator=self.include_positive_in_denominator)

    def _check_training_params(self):
        if self.batch_size < 4 or self.batch_size % 2:
            raise ValueError(f"batch_size must be even and >= 4, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.optimizer == "adam":
            return _Adam(self.learning_rate, self.beta1, self.beta2, self.eps)
        if self.optimizer == "sgd":
            return _SGD(self.learning_rate)
        raise ValueError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")

    # -- training ---------------------------------------------------------

    def fit(self, X, y, pair_ids=None, X_val=None, y_val=None):
        """Train on (n, H, W) 8-bit images with labels 0 = cover, 1 = stego.

        Parameters
        ----------
        pair_ids : array-like, optional
            Links each stego to its cover; batches always hold whole pairs.
        X_val, y_val : optional
            Held-out split used to pick the best epoch by detection error.
        """
        Xs = to_unit_range(X)
        y = np.asarray(y).astype(np.intp).ravel()
        if y.shape[0] != Xs.shape[0]:
            raise ValueError("X and y differ in length")
        pairs = pair_up(y, pair_ids)
        loss_cfg = self._loss_config()
        opt = self._check_training_params()
        half = self.batch_size // 2
        if pairs.shape[0] < half:
            raise ValueError(f"need at least {half} pairs for batch_size {self.batch_size}")

        cfg = ModelConfig(image_size=Xs.shape[1], channels=tuple(self.channels),
                          feature_dim=self.feature_dim,
                          trainable_preprocessing=self.trainable_preprocessing)
        params = init_params(cfg, make_rng(self.random_state, INIT_STREAM))
        self.model_config_ = cfg
        self.classes_ = np.array([0, 1])
        Xv = None
        if X_val is not None:
            Xv = to_unit_range(X_val)
            yv = np.asarray(y_val).astype(np.intp).ravel()

        rss_rng = make_rng(self.random_state, RSS_STREAM)
        self.history_ = []
        best = (np.inf, 0, params)
        for epoch in range(1, self.epochs + 1):
            t0 = time.perf_counter()
            order = make_rng(self.random_state, ORDER_STREAM, epoch).permutation(pairs.shape[0])
            ce_sum = con_sum = 0.0
            n_steps = pairs.shape[0] // half
            for step in range(n_steps):
                idx = pairs[order[step * half:(step + 1) * half]].ravel()  # cover, stego, cover, ...
                ce, con = self._step(params, opt, cfg, loss_cfg, Xs[idx], y[idx], rss_rng, epoch, step)
                ce_sum += ce
                con_sum += con
            self.params_ = params
            row = {"epoch": epoch, "ce_loss": ce_sum / n_steps, "contrastive_loss": con_sum / n_steps,
                   "val_pe": float("nan"), "val_acc": float("nan"),
                   "seconds": 0.0}
            if Xv is not None:
                pe, acc = self._val_scores(params, Xv, yv)
                row["val_pe"], row["val_acc"] = pe, acc
                if pe < best[0]:
                    best = (pe, epoch, {k: v.copy() for k, v in params.items()})
            else:
                best = (np.nan, epoch, params)
            if self.record_time:
                row["seconds"] = time.perf_counter() - t0
            self.history_.append(row)
            logger.info("epoch %d ce=%.5f con=%.5f val_pe=%.4f", epoch, row["ce_loss"],
                        row["contrastive_loss"], row["val_pe"])
        self.best_epoch_ = best[1]
        self.params_ = best[2]
        return self

    def _step(self, params, opt, cfg, loss_cfg, Xb, yb, rss_rng, epoch, step):
        if loss_cfg.variant != "none" and np.unique(yb).size < 2:
            raise ValueError("contrastive training needs both classes in every batch")
        z, logits, trace = forward(params, cfg, Xb)
        ce = cross_entropy(logits, yb)
        con_value, dZ = 0.0, None
        if loss_cfg.variant != "none":
            batch = FeatureBatch(z, yb)
            pairs = positive_map = None
            if loss_cfg.variant == "stegcl":
                pairs = select_positives(yb, rss_rng)
            elif loss_cfg.variant == "selfcl":
                positive_map = random_same_class_partner(yb, rss_rng)
            out = contrastive(batch, loss_cfg, pairs=pairs, positive_map=positive_map)
            con_value = out.value / out.term_count
            if loss_cfg.lam > 0:
                dZ = out.grad * (loss_cfg.lam / out.term_count)
        total = ce.value + loss_cfg.lam * con_value
        if not np.isfinite(total):
            raise TrainingDivergedError(
                f"non-finite objective at epoch {epoch} step {step}: ce={ce.value!r} contrastive={con_value!r}"
            )
        grads = backward(params, trace, dZ, ce.grad)
        if not cfg.trainable_preprocessing:
            del grads["hp"]
        opt.step(params, grads)
        return ce.value, con_value

    def _val_scores(self, params, Xv, yv):
        _, logits, _ = forward(params, self.model_config_, Xv)
        scores = _stego_probability(logits)
        acc = float(np.mean((logits[:, 1] > logits[:, 0]).astype(np.intp) == yv))
        return p_e(scores, yv)[0], acc

    # -- inference --------------------------------------------------------

    def _forward(self, X):
        check_is_fitted(self, "params_")
        return forward(self.params_, self.model_config_, to_unit_range(X))

    def decision_function(self, X) -> np.ndarray:
        """Stego probability per image (the detection score)."""
        return _stego_probability(self._forward(X)[1])

    def predict_proba(self, X) -> np.ndarray:
        logits = self._forward(X)[1]
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        logits = self._forward(X)[1]
        return (logits[:, 1] > logits[:, 0]).astype(np.intp)

    def transform(self, X) -> np.ndarray:
        """Feature vectors z (the contrastive tap point)."""
        return self._forward(X)[0]

    # -- persistence ------------------------------------------------------

    def to_bytes(self) -> bytes:
        check_is_fitted(self, "params_")
        return dumps_checkpoint(self.model_config_, self.params_)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "SCFClassifier":
        cfg, params = loads_checkpoint(buf)
        est = cls(channels=cfg.channels, feature_dim=cfg.feature_dim,
                  trainable_preprocessing=cfg.trainable_preprocessing)
        est.model_config_ = cfg
        est.params_ = params
        est.classes_ = np.array([0, 1])
        return est


def _stego_probability(logits: np.ndarray) -> np.ndarray:
    # softmax over two logits, written to stay finite for large gaps
    return 0.5 * (1.0 + np.tanh(0.5 * (logits[:, 1] - logits[:, 0])))


def random_same_class_partner(labels, rng: np.random.Generator) -> np.ndarray:
    """For each sample, a uniformly drawn other member of its class."""
    labels = np.asarray(labels).ravel()
    out = np.empty(labels.size, dtype=np.intp)
    for cls in np.unique(labels):
        members = np.flatnonzero(labels == cls)
        if members.size < 2:
            raise ValueError("selfcl needs at least 2 members per class")
        draw = rng.integers(members.size - 1, size=members.size)
        # skip over the anchor's own slot
        draw = draw + (draw >= np.arange(members.size))
        out[members] = members[draw]
    return out
