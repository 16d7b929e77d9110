"""Training, evaluation and payload-mismatch evaluation on SCFD datasets."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset
from .estimator import LOSS_CHOICES, SCFClassifier
from .losses import LossConfig
from .metrics import EvalReport, p_e, silhouette
from .model import ModelConfig

HISTORY_COLUMNS = ("epoch", "ce_loss", "contrastive_loss", "val_pe", "val_acc", "seconds")
MISMATCH_COLUMNS = ("train_payload", "test_payload", "pe")
_VARIANT_TO_LOSS = {v: k for k, v in LOSS_CHOICES.items()}


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    loss: LossConfig = field(default_factory=LossConfig)
    model: ModelConfig | None = None  # image_size is taken from the dataset when None
    seed: int = 1
    checkpoint_path: str | None = None
    record_time: bool = False

    def __post_init__(self):
        if self.batch_size < 4 or self.batch_size % 2:
            raise ValueError(f"batch_size must be even and >= 4, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")

    def estimator(self) -> SCFClassifier:
        m = self.model or ModelConfig()
        return SCFClassifier(
            loss=_VARIANT_TO_LOSS[self.loss.variant], tau=self.loss.tau, lam=self.loss.lam,
            normalize_features=self.loss.normalize_features,
            include_positive_in_denominator=self.loss.include_positive_in_denominator,
            channels=m.channels, feature_dim=m.feature_dim,
            trainable_preprocessing=m.trainable_preprocessing, epochs=self.epochs,
            batch_size=self.batch_size, learning_rate=self.learning_rate, optimizer=self.optimizer,
            beta1=self.beta1, beta2=self.beta2, eps=self.eps, random_state=self.seed,
            record_time=self.record_time,
        )


def train(cfg: TrainConfig, dataset: Dataset) -> tuple[SCFClassifier, list[dict]]:
    """Fit on the train split, select by validation P_E, optionally save the checkpoint."""
    X, y, pid = dataset.split("train")
    Xv, yv, _ = dataset.split("val")
    if cfg.model is not None and cfg.model.image_size != dataset.image_size:
        raise ValueError(f"model image_size {cfg.model.image_size} != dataset {dataset.image_size}")
    est = cfg.estimator().fit(X, y, pair_ids=pid, X_val=Xv, y_val=yv)
    if cfg.checkpoint_path is not None:
        Path(cfg.checkpoint_path).write_bytes(est.to_bytes())
    return est, est.history_


def as_estimator(checkpoint) -> SCFClassifier:
    if isinstance(checkpoint, SCFClassifier):
        return checkpoint
    if isinstance(checkpoint, (bytes, bytearray)):
        return SCFClassifier.from_bytes(bytes(checkpoint))
    return SCFClassifier.from_bytes(Path(checkpoint).read_bytes())


def evaluate(checkpoint, dataset: Dataset, split: str = "test") -> EvalReport:
    """Detection error, accuracy and feature silhouette on one split.

    ``checkpoint`` may be a fitted estimator, checkpoint bytes or a path.
    """
    est = as_estimator(checkpoint)
    X, y, _ = dataset.split(split)
    if X.shape[0] == 0:
        raise ValueError(f"split {split!r} is empty")
    z = est.transform(X)
    logits = z @ est.params_["cls.W"].T + est.params_["cls.b"]
    scores = 0.5 * (1.0 + np.tanh(0.5 * (logits[:, 1] - logits[:, 0])))
    pe, pfa, pmd, t = p_e(scores, y)
    acc = float(np.mean((logits[:, 1] > logits[:, 0]).astype(np.intp) == y))
    return EvalReport(pe, acc, pfa, pmd, t, silhouette(z, y), int(y.size))


def mismatch_eval(checkpoints, datasets) -> list[tuple[float, float, float]]:
    """P_E of every (train payload, test payload) cell on the test splits.

    Parameters
    ----------
    checkpoints : list of (train_payload, checkpoint)
    datasets : list of (test_payload, Dataset)
    """
    rows = []
    for train_payload, ckpt in checkpoints:
        est = as_estimator(ckpt)
        for test_payload, ds in datasets:
            rows.append((float(train_payload), float(test_payload), evaluate(est, ds, "test").p_e))
    return rows


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def history_csv(history: list[dict]) -> str:
    return csv_text(HISTORY_COLUMNS, ([repr(float(r[k])) if k != "epoch" else r[k]
                                         for k in HISTORY_COLUMNS] for r in history))


def mismatch_csv(rows) -> str:
    return csv_text(MISMATCH_COLUMNS, ([repr(a), repr(b), repr(c)] for a, b, c in rows))
