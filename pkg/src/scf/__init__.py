"""Contrastive learning for steganalysis: losses, positive-pair sampling,
a toy numpy classifier, synthetic data and benchmarks."""
from .bench import BenchResult, pair_count_audit, time_loss
from .data import (Dataset, DatasetConfig, DatasetFormatError, ImageSample, build_dataset, embed_pm1,
                   gen_cover, load_dataset, save_dataset)
from .estimator import SCFClassifier, TrainingDivergedError
from .losses import FeatureBatch, LossConfig, LossOutput, contrastive, cross_entropy, self_cl, steg_cl, sup_cl
from .metrics import EvalReport, p_e, silhouette
from .model import CheckpointFormatError, ModelConfig, backward, forward, init_params
from .numkit import PowerIterationPCA, finite_diff_grad, make_rng, pca_2d
from .rss import DisjointSet, PairSelection, select_positives
from .trainer import TrainConfig, evaluate, mismatch_eval, train

__version__ = "0.1.0"
