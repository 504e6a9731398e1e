"""
Test the full-batch training loop, early stopping and checkpointing

OVERALL TEST SUITE PURPOSE:
- Verify a zero learning rate leaves the initialization untouched
- Check training is deterministic for a fixed seed, regardless of workers
- Check early stopping, divergence handling and the per-epoch log
- Check pointwise mode keeps its kernels frozen

WHY THESE TESTS ARE REQUIRED:
- The three experiment modes are only comparable if the loop is reproducible
- A silent NaN or a lost best checkpoint would corrupt the whole ablation
"""
import logging

import numpy as np
import pandas as pd
import pytest

from csg.errors import ConfigError, DataValidationError, TrainingDivergedError
from csg.gconv_net import init_params, load_checkpoint, make_geometry
from csg.spectral_alignment import build_feature_matrix
from csg.spectral_embedding import EmbeddingConfig, embed_mesh
from csg.surface_graph import AdjacencyMode, SurfaceMesh, build_graph, icosphere
from csg.trainer import (
    TRAIN_LOG_COLUMNS,
    EpochRecord,
    SubjectData,
    TrainConfig,
    TrainLog,
    predict,
    prepare_subject,
    train,
    validation_scores,
)
from ..utils.test_helpers import CsgTestHelper


def _subjects(mode: str = "euclidean", n: int = 4, n_vertices: int = 162):
    helper = CsgTestHelper()
    subjects = []
    for k in range(n):
        mesh = helper.surface(seed=k, n_vertices=n_vertices)
        embedding = None
        if mode != "euclidean":
            embedding = embed_mesh(mesh, EmbeddingConfig(d=3, solver="dense")).transformed(np.eye(3))
        subjects.append(prepare_subject(f"sub{k:03d}", mesh, embedding, mode))
    return subjects[:-1], subjects[-1:]


def _assert_same_params(a, b):
    for (name, x), (_, y) in zip(a.arrays(), b.arrays()):
        np.testing.assert_array_equal(x, y, err_msg=name)


def test_zero_learning_rate_keeps_initial_parameters():
    """
    WHAT: Trains with learning rate 0.

    WHY: Every epoch then sees the same parameters, so the loss must be
         constant and the validation score never improves after epoch 1.

    EXPECTED:
    - returned parameters equal the seeded initialization
    - early stop after 1 + patience epochs with best epoch 1
    """
    train_set, val_set = _subjects()
    netcfg = CsgTestHelper().small_network()
    config = TrainConfig(learning_rate=0.0, max_epochs=10, patience=2, mode="euclidean", seed=4)

    result = train(train_set, val_set, config, netcfg)

    _assert_same_params(result.params, init_params(CsgTestHelper().small_network(seed=4)))
    assert len(result.log) == 3
    assert result.best_epoch == 1
    assert len({r.loss for r in result.log.records}) == 1


def test_training_is_deterministic_across_worker_counts():
    train_set, val_set = _subjects()
    netcfg = CsgTestHelper().small_network()

    a = train(train_set, val_set, TrainConfig(learning_rate=0.2, max_epochs=3, patience=5,
                                              mode="euclidean", workers=1), netcfg)
    b = train(train_set, val_set, TrainConfig(learning_rate=0.2, max_epochs=3, patience=5,
                                              mode="euclidean", workers=2), netcfg)

    _assert_same_params(a.params, b.params)
    assert [r.loss for r in a.log.records] == [r.loss for r in b.log.records]


def test_small_steps_reduce_the_training_loss():
    train_set, val_set = _subjects()
    config = TrainConfig(learning_rate=0.05, max_epochs=6, patience=10, mode="euclidean")

    result = train(train_set, val_set, config, CsgTestHelper().small_network())

    losses = [r.loss for r in result.log.records]
    assert len(losses) == 6
    assert losses[-1] < losses[0]
    assert 1 <= result.best_epoch <= 6


def test_zero_epochs_returns_the_initialization(tmp_path):
    train_set, val_set = _subjects(n=2)
    config = TrainConfig(max_epochs=0, mode="euclidean", checkpoint_dir=str(tmp_path))

    result = train(train_set, val_set, config, CsgTestHelper().small_network())

    assert len(result.log) == 0
    assert result.best_epoch == 0
    assert result.checkpoint == tmp_path / "checkpoint.bin"
    _assert_same_params(load_checkpoint(result.checkpoint), init_params(CsgTestHelper().small_network()))


def test_best_parameters_are_checkpointed(tmp_path):
    train_set, val_set = _subjects()
    config = TrainConfig(learning_rate=0.2, max_epochs=4, patience=2, mode="euclidean",
                         checkpoint_dir=str(tmp_path), checkpoint_format="json")

    result = train(train_set, val_set, config, CsgTestHelper().small_network())

    assert result.checkpoint == tmp_path / "checkpoint.json"
    _assert_same_params(load_checkpoint(result.checkpoint), result.params)
    assert result.log.best().epoch == result.best_epoch


def test_divergence_names_the_epoch_and_last_checkpoint(tmp_path):
    train_set, val_set = _subjects(n=2)
    config = TrainConfig(learning_rate=1e300, max_epochs=5, patience=5, mode="euclidean",
                         checkpoint_dir=str(tmp_path))

    with np.errstate(all="ignore"), pytest.raises(TrainingDivergedError) as excinfo:
        train(train_set, val_set, config, CsgTestHelper().small_network())

    assert excinfo.value.epoch == 2
    assert excinfo.value.checkpoint == str(tmp_path / "checkpoint.bin")
    assert excinfo.value.exit_code == 4


def test_pointwise_mode_freezes_kernels():
    train_set, val_set = _subjects(mode="pointwise")
    netcfg = CsgTestHelper().small_network()
    config = TrainConfig(learning_rate=0.2, max_epochs=2, patience=5, mode="pointwise")

    result = train(train_set, val_set, config, netcfg)
    initial = init_params(netcfg)

    for trained, start in zip(result.params.layers, initial.layers):
        np.testing.assert_array_equal(trained.mu, start.mu)
        np.testing.assert_array_equal(trained.log_sigma, start.log_sigma)
    assert not np.array_equal(result.params.layers[0].weights, initial.layers[0].weights)
    assert train_set[0].geometry.n_pairs == train_set[0].mesh.n_vertices


def test_empty_validation_set_falls_back_to_training_set(caplog):
    train_set, _ = _subjects(n=2)
    config = TrainConfig(learning_rate=0.1, max_epochs=1, mode="euclidean")

    with caplog.at_level(logging.WARNING, logger="csg.trainer"):
        result = train(train_set, [], config, CsgTestHelper().small_network())

    assert len(result.log) == 1
    assert "No validation subjects" in caplog.text


def test_unlabeled_training_subject_is_rejected():
    train_set, val_set = _subjects(n=2)
    mesh = train_set[0].mesh
    bare = prepare_subject("bare", SurfaceMesh(mesh.vertices, mesh.faces, mesh.sulcal_depth), None, "euclidean")

    with pytest.raises(DataValidationError):
        train([bare], val_set, TrainConfig(mode="euclidean"), CsgTestHelper().small_network())


def test_network_and_features_must_agree():
    train_set, val_set = _subjects(n=2)
    netcfg = CsgTestHelper().small_network(input_maps=5)

    with pytest.raises(DataValidationError):
        train(train_set, val_set, TrainConfig(mode="euclidean"), netcfg)
    with pytest.raises(DataValidationError):
        predict(init_params(netcfg), val_set[0])


def _half_sphere_subject() -> SubjectData:
    """Icosphere split at the widest z-gap near the equator, with one-vertex neighborhoods."""
    vertices, faces = icosphere(2)
    z = vertices[:, 2]
    levels = np.unique(np.round(z, 9))
    central = levels[(levels > np.quantile(z, 0.3)) & (levels < np.quantile(z, 0.7))]
    k = int(np.argmax(np.diff(central)))
    labels = (z > 0.5 * (central[k] + central[k + 1])).astype(np.int64)
    mesh = SurfaceMesh(vertices, faces, np.zeros(len(vertices)), labels)
    graph = build_graph(mesh, AdjacencyMode.IDENTITY)
    features = build_feature_matrix(None, graph, "euclidean")
    return SubjectData("sub000", mesh, graph, features, make_geometry(graph, features[:, :3]), mesh.labels)


def test_single_subject_can_be_fit_almost_perfectly():
    """
    WHAT: Trains and validates on the same linearly separable subject.

    WHY: A network that cannot memorize one subject points at a broken
         gradient or update step, whatever the held-out scores say.

    EXPECTED: training accuracy >= 0.99, and predict() reproduces the score
              the training loop logged for the kept parameters
    """
    subject = _half_sphere_subject()
    netcfg = CsgTestHelper().small_network(n_parcels=2, hidden_maps=(8, 8), expected_neighbors=1.0)
    config = TrainConfig(learning_rate=0.5, max_epochs=3000, patience=500, mode="euclidean")

    result = train([subject], [subject], config, netcfg)
    probabilities, predicted = predict(result.params, subject)

    accuracy = float(np.mean(predicted == subject.labels))
    assert accuracy >= 0.99
    np.testing.assert_array_equal(predicted, probabilities.argmax(axis=1))
    assert result.log.best().val_acc == accuracy


def test_predict_and_validation_scores():
    _, val_set = _subjects(n=2)
    params = init_params(CsgTestHelper().small_network())

    probabilities, labels = predict(params, val_set[0])
    accuracy, dice = validation_scores(params, val_set)

    assert probabilities.shape == (162, 4)
    np.testing.assert_array_equal(labels, probabilities.argmax(axis=1))
    assert 0.0 <= accuracy <= 1.0
    assert 0.0 <= dice <= 1.0


@pytest.mark.parametrize("field, value", [
    ("learning_rate", -0.1), ("patience", 0), ("max_epochs", -1), ("mode", "geodesic"),
    ("loss_normalization", "median"),
])
def test_invalid_train_config(field, value):
    with pytest.raises(ConfigError):
        TrainConfig(**{field: value}).validate()


def test_train_log_csv_and_best_epoch(tmp_path):
    log = TrainLog()
    log.append(EpochRecord(1, 1.2, 0.4, 0.30, 0.1))
    log.append(EpochRecord(2, 1.0, 0.5, 0.45, 0.1))
    log.append(EpochRecord(3, 0.9, 0.5, 0.45, 0.1))
    with pytest.raises(ValueError):
        log.append(EpochRecord(3, 0.8, 0.6, 0.5, 0.1))

    frame = pd.read_csv(log.write_csv(tmp_path / "train_log.csv"))

    assert list(frame.columns) == TRAIN_LOG_COLUMNS
    assert frame["epoch"].tolist() == [1, 2, 3]
    assert log.best().epoch == 2
