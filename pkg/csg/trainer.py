"""
Full-batch gradient-descent training with validation early stopping.

Three experiment modes share the loop:

- ``euclidean``: mesh neighborhoods, xyz features and kernel coordinates;
- ``spectral``: mesh neighborhoods, aligned spectral features and coordinates;
- ``pointwise``: spectral features but identity adjacency and frozen kernels.
"""

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .errors import ConfigError, DataValidationError, TrainingDivergedError
from .evaluation import mean_dice, node_accuracy
from .gconv_net import (
    ConvGeometry,
    NetworkConfig,
    NetworkParams,
    forward,
    init_params,
    loss_and_gradients,
    make_geometry,
    predict_labels,
    save_checkpoint,
)
from .spectral_alignment import build_feature_matrix
from .spectral_embedding import SpectralEmbedding
from .surface_graph import UNLABELED, AdjacencyMode, BrainGraph, SurfaceMesh, build_graph
from .workers import map_subjects

logger = logging.getLogger(__name__)

TRAIN_LOG_COLUMNS = ["epoch", "loss", "val_acc", "val_dice", "seconds"]


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    max_epochs: int = 300
    patience: int = 10
    mode: str = "spectral"
    seed: int = 0
    checkpoint_dir: Optional[str] = None
    loss_normalization: str = "mean"
    workers: int = 1
    checkpoint_format: str = "binary"

    def validate(self) -> None:
        if not self.learning_rate >= 0:
            raise ConfigError(f"training.learning_rate must be >= 0, got {self.learning_rate}")
        if self.patience < 1:
            raise ConfigError(f"training.patience must be >= 1, got {self.patience}")
        if self.max_epochs < 0:
            raise ConfigError(f"training.max_epochs must be >= 0, got {self.max_epochs}")
        if self.mode not in ("euclidean", "spectral", "pointwise"):
            raise ConfigError(f"training.mode must be euclidean, spectral or pointwise, got '{self.mode}'")
        if self.loss_normalization not in ("mean", "sum"):
            raise ConfigError(f"training.loss_normalization must be 'mean' or 'sum', got '{self.loss_normalization}'")

    @property
    def freeze_kernels(self) -> bool:
        return self.mode == "pointwise"


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    val_acc: float
    val_dice: float
    seconds: float


@dataclass
class TrainLog:
    records: List[EpochRecord] = field(default_factory=list)

    def append(self, record: EpochRecord) -> None:
        if self.records and record.epoch <= self.records[-1].epoch:
            raise ValueError(f"Epoch {record.epoch} after {self.records[-1].epoch}")
        self.records.append(record)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([dataclasses.asdict(r) for r in self.records], columns=TRAIN_LOG_COLUMNS)

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False)
        return path

    def best(self) -> Optional[EpochRecord]:
        if not self.records:
            return None
        return max(self.records, key=lambda r: (r.val_dice, -r.epoch))

    def __len__(self) -> int:
        return len(self.records)


@dataclass
class SubjectData:
    """One subject ready for the network: graph, inputs, convolution geometry and labels."""

    subject_id: str
    mesh: SurfaceMesh
    graph: BrainGraph
    features: np.ndarray
    geometry: ConvGeometry
    labels: Optional[np.ndarray]

    @property
    def n_labeled(self) -> int:
        if self.labels is None:
            return 0
        return int(np.count_nonzero(self.labels != UNLABELED))


@dataclass
class TrainResult:
    params: NetworkParams
    log: TrainLog
    best_epoch: int
    checkpoint: Optional[Path]


def prepare_subject(subject_id: str, mesh: SurfaceMesh, embedding: Optional[SpectralEmbedding],
                    mode: str) -> SubjectData:
    """Feature matrix and neighborhoods for ``mode``; kernel coordinates are the first three features."""
    adjacency = AdjacencyMode.IDENTITY if mode == "pointwise" else AdjacencyMode.MESH_EDGES
    graph = build_graph(mesh, adjacency)
    features = build_feature_matrix(embedding, graph, mode)
    geometry = make_geometry(graph, features[:, :3])
    return SubjectData(subject_id, mesh, graph, features, geometry, mesh.labels)


def _check_compatible(params: NetworkParams, subject: SubjectData) -> None:
    config = params.config
    if subject.features.shape[1] != config.input_maps:
        raise DataValidationError(
            f"Network expects {config.input_maps} input maps but subject {subject.subject_id} "
            f"has {subject.features.shape[1]} feature columns"
        )
    if subject.geometry.offsets.shape[1] != config.coord_dim:
        raise DataValidationError(
            f"Network kernels live in {config.coord_dim}-D but subject {subject.subject_id} "
            f"has {subject.geometry.offsets.shape[1]}-D coordinates"
        )


def predict(params: NetworkParams, subject: SubjectData) -> Tuple[np.ndarray, np.ndarray]:
    """Forward pass only: (probabilities N x C, argmax labels)."""
    _check_compatible(params, subject)
    probabilities, _ = forward(params, subject.features, subject.geometry)
    return probabilities, predict_labels(probabilities)


def validation_scores(params: NetworkParams, subjects: Sequence[SubjectData], workers: int = 1) -> Tuple[float, float]:
    """Mean node accuracy and mean Dice over subjects."""
    n_parcels = params.config.n_parcels

    def _score(subject: SubjectData):
        _, labels = predict(params, subject)
        return node_accuracy(labels, subject.labels), mean_dice(labels, subject.labels, n_parcels)

    scores = map_subjects(_score, subjects, workers)
    return float(np.mean([s[0] for s in scores])), float(np.mean([s[1] for s in scores]))


def _checkpoint_path(config: TrainConfig) -> Optional[Path]:
    if not config.checkpoint_dir:
        return None
    suffix = "json" if config.checkpoint_format == "json" else "bin"
    return Path(config.checkpoint_dir) / f"checkpoint.{suffix}"


def train(train_subjects: Sequence[SubjectData], val_subjects: Sequence[SubjectData],
          config: TrainConfig, netcfg: NetworkConfig) -> TrainResult:
    """
    Full-batch gradient descent.

    Each epoch sums the cross-entropy gradients of all training subjects (fixed
    subject order), takes one step, then scores the validation subjects. The
    parameters with the best validation mean Dice are kept and checkpointed;
    training stops after ``patience`` epochs without improvement.
    """
    config.validate()
    if not train_subjects:
        raise DataValidationError("Training needs at least one training subject")
    for subject in train_subjects:
        if subject.n_labeled == 0:
            raise DataValidationError(f"Training subject {subject.subject_id} has no labeled nodes")
    if not val_subjects:
        logger.warning("No validation subjects; early stopping scores the training set")
        val_subjects = train_subjects

    params = init_params(dataclasses.replace(netcfg, seed=config.seed))
    for subject in list(train_subjects) + list(val_subjects):
        _check_compatible(params, subject)

    n_labeled = sum(s.n_labeled for s in train_subjects)
    scale = 1.0 / n_labeled if config.loss_normalization == "mean" else 1.0
    checkpoint = _checkpoint_path(config)
    written: Optional[Path] = None

    log = TrainLog()
    best_params = params.copy()
    best_dice, best_epoch, stale = -math.inf, 0, 0
    logger.info(
        "training mode=%s: %d train / %d val subjects, %d parameters, lr=%g",
        config.mode, len(train_subjects), len(val_subjects), params.n_parameters(), config.learning_rate,
    )

    def _pass(subject: SubjectData):
        loss, grads, _ = loss_and_gradients(params, subject.features, subject.geometry, subject.labels,
                                            scale=scale, freeze_kernels=config.freeze_kernels)
        return loss, grads

    for epoch in range(1, config.max_epochs + 1):
        started = time.perf_counter()
        results = map_subjects(_pass, train_subjects, config.workers)
        total_loss = 0.0
        grads = params.zeros_like()
        for loss, subject_grads in results:
            total_loss += loss
            grads.add_scaled(subject_grads, 1.0)

        if not math.isfinite(total_loss) or not all(np.all(np.isfinite(g)) for _, g in grads.arrays()):
            raise TrainingDivergedError(epoch, str(written) if written else None)
        params.add_scaled(grads, -config.learning_rate)

        val_acc, val_dice = validation_scores(params, val_subjects, config.workers)
        record = EpochRecord(epoch, total_loss / n_labeled, val_acc, val_dice, time.perf_counter() - started)
        log.append(record)
        logger.info("epoch %d: loss %.5f  val acc %.4f  val dice %.4f  (%.2fs)",
                    epoch, record.loss, val_acc, val_dice, record.seconds)

        if val_dice > best_dice:
            best_dice, best_epoch, stale = val_dice, epoch, 0
            best_params = params.copy()
            if checkpoint is not None:
                written = save_checkpoint(checkpoint, best_params, fmt=config.checkpoint_format)
        else:
            stale += 1
            if stale >= config.patience:
                logger.info("early stop at epoch %d; best epoch %d (val dice %.4f)", epoch, best_epoch, best_dice)
                break

    if checkpoint is not None and written is None:
        written = save_checkpoint(checkpoint, best_params, fmt=config.checkpoint_format)
    return TrainResult(best_params, log, best_epoch, written)
