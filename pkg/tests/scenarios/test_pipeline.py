"""
Test stage artifacts, the run manifest and the end-to-end pipeline

OVERALL TEST SUITE PURPOSE:
- Check matrix, label and embedding files read back exactly
- Run every stage on a tiny synthetic cohort and verify the artifact layout
- Check reruns are reproducible and missing upstream artifacts are named

WHY THESE TESTS ARE REQUIRED:
- Stages communicate only through files; a stage that writes the wrong file
  or reads a stale one breaks the comparison between modes
"""
import json

import numpy as np
import pytest

from csg.artifacts import (
    read_embedding,
    read_labels,
    read_matrix,
    write_alignment,
    write_embedding,
    write_labels,
    write_matrix,
)
from csg.errors import ArtifactError
from csg.pipeline import (
    RunManifest,
    StageRecord,
    StageRunner,
    list_subjects,
    reference_subject,
    run_align,
    run_embed,
    run_evaluate,
    run_pipeline,
    run_predict,
    run_regularize,
    run_split,
    run_synth,
    run_train,
)
from csg.spectral_alignment import icp_align
from csg.surface_graph import DatasetSplit
from ..utils.test_helpers import CsgTestHelper


def test_matrix_file_reads_back_exactly(tmp_path):
    matrix = CsgTestHelper(seed=1).rng.normal(size=(7, 3)) * 1e-7

    path = write_matrix(tmp_path / "m.txt", matrix)

    assert path.read_text().splitlines()[0] == "7 3"
    np.testing.assert_array_equal(read_matrix(path), matrix)


def test_matrix_header_mismatch_is_an_artifact_error(tmp_path):
    path = tmp_path / "m.txt"
    path.write_text("3 2\n1 2\n3 4\n", encoding="utf-8")

    with pytest.raises(ArtifactError):
        read_matrix(path)
    with pytest.raises(ArtifactError) as excinfo:
        read_matrix(tmp_path / "absent.txt")
    assert excinfo.value.path.endswith("absent.txt")


def test_label_file_round_trip(tmp_path):
    labels = np.array([3, 0, 2, 2, 1])
    np.testing.assert_array_equal(read_labels(write_labels(tmp_path / "l.txt", labels)), labels)


def test_aligned_embedding_reads_back_with_rotated_eigenvectors(tmp_path):
    helper = CsgTestHelper(seed=2)
    reference = helper.random_embedding()
    embedding = helper.random_embedding()
    write_embedding(tmp_path, embedding)
    result, aligned = icp_align(embedding, reference)
    write_embedding(tmp_path, aligned)
    write_alignment(tmp_path / "align.json", result)

    raw = read_embedding(tmp_path)
    loaded = read_embedding(tmp_path, aligned=True)

    np.testing.assert_array_equal(raw.coordinates, embedding.coordinates)
    np.testing.assert_array_equal(loaded.coordinates, aligned.coordinates)
    np.testing.assert_allclose(loaded.eigenvectors, aligned.eigenvectors, atol=1e-12)
    assert loaded.aligned and not raw.aligned


def test_manifest_round_trip_and_corruption(tmp_path):
    manifest = RunManifest(subjects=["sub000"], seeds={"split": 0})
    manifest.record(StageRecord("split", seconds=0.5, status="ok", artifacts=[str(tmp_path / "split.txt")]))
    manifest.record(StageRecord("split", seconds=0.25, status="ok"))
    path = manifest.write(tmp_path / "manifest.json")

    loaded = RunManifest.load(path)

    assert [s.name for s in loaded.stages] == ["split"]
    assert loaded.timings() == {"split": 0.25}
    assert not list(tmp_path.glob(".manifest.*"))
    path.write_text("{not json", encoding="utf-8")
    with pytest.raises(ArtifactError):
        RunManifest.load(path)


def test_reference_defaults_to_first_training_subject(tmp_path):
    config = CsgTestHelper().tiny_config(tmp_path)
    split = DatasetSplit(("sub004", "sub001"), ("sub002",), ("sub003",), 0)

    assert reference_subject(config, split) == "sub001"
    config.alignment.reference = "sub002"
    assert reference_subject(config, split) == "sub002"


def test_empty_data_dir_names_the_expected_layout(tmp_path):
    with pytest.raises(ArtifactError) as excinfo:
        list_subjects(tmp_path / "nothing")
    assert "mesh.off" in excinfo.value.path


def test_stages_need_their_upstream_artifacts(tmp_path):
    """
    WHAT: Runs predict and evaluate before anything was trained.

    WHY: Running a stage out of order must fail with the path of the file
         that is missing, not with a stack trace from deep inside numpy.

    EXPECTED: ArtifactError naming the checkpoint, then the predicted labels
    """
    helper = CsgTestHelper()
    config = helper.tiny_config(tmp_path)
    helper.write_cohort(tmp_path / "data")
    runner = StageRunner(config)
    run_split(runner)

    with pytest.raises(ArtifactError) as excinfo:
        run_predict(runner, "spectral")
    assert excinfo.value.path.endswith("runs/spectral/checkpoint.bin")

    with pytest.raises(ArtifactError) as excinfo:
        run_evaluate(runner, ["euclidean"])
    assert excinfo.value.path.endswith("labels_pred.txt")
    assert RunManifest.load(runner.layout.manifest).stages[-1].status == "failed"


def test_full_pipeline_on_a_tiny_cohort(tmp_path):
    config = CsgTestHelper().tiny_config(tmp_path)
    runner = StageRunner(config)

    paths = run_pipeline(runner)

    summary = json.loads(paths["summary"].read_text())
    assert sorted(summary) == sorted(["euclidean", "euclidean+mrf", "spectral", "spectral+mrf",
                                      "pointwise", "pointwise+mrf"])
    for row in summary.values():
        assert 0.0 <= row["dice_mean"] <= 1.0
        assert row["n_parcels"] == 4
    assert paths["timings"].exists()

    out = tmp_path / "out"
    split = runner.layout.split_file.read_text()
    assert "[train]" in split and "[test]" in split
    for subject in ("sub000", "sub005"):
        for name in ("spectral.txt", "eigenvalues.txt", "spectral_aligned.txt", "align.json"):
            assert (out / "subjects" / subject / name).exists()
    for mode in ("euclidean", "spectral", "pointwise"):
        assert (out / "runs" / mode / "checkpoint.bin").exists()
        assert (out / "runs" / mode / "train_log.csv").exists()
        mrf = json.loads((out / "runs" / mode / "mrf.json").read_text())
        assert mrf["lambda"] in (0.1, 0.5)

    manifest = RunManifest.load(out / "manifest.json")
    names = [s.name for s in manifest.stages]
    assert names[:4] == ["synth", "split", "embed", "align"]
    assert "train:pointwise" in names and names[-1] == "evaluate"
    assert all(s.status == "ok" and s.rss_mb > 0 for s in manifest.stages)
    assert manifest.missing_artifacts() == []
    assert manifest.subjects == [f"sub{k:03d}" for k in range(6)]


def test_stage_reruns_are_reproducible(tmp_path):
    helper = CsgTestHelper()
    config = helper.tiny_config(tmp_path)
    runner = StageRunner(config)
    run_synth(runner)
    run_split(runner)
    run_embed(runner)
    reference = run_align(runner)

    run_train(runner, "euclidean")
    first = runner.layout.checkpoint("euclidean").read_bytes()
    split_text = runner.layout.split_file.read_text()
    split = run_split(runner)
    run_train(runner, "euclidean")

    assert reference == sorted(split.train)[0]
    assert runner.layout.split_file.read_text() == split_text
    assert runner.layout.checkpoint("euclidean").read_bytes() == first


def test_regularize_with_a_fixed_lambda(tmp_path):
    helper = CsgTestHelper()
    config = helper.tiny_config(tmp_path)
    helper.write_cohort(tmp_path / "data")
    runner = StageRunner(config)
    split = run_split(runner)
    run_train(runner, "euclidean")
    run_predict(runner, "euclidean")

    lam = run_regularize(runner, "euclidean", lam=0.3)

    record = json.loads(runner.layout.mrf_record("euclidean").read_text())
    assert lam == 0.3
    assert record == {"lambda": 0.3, "sweep": {}}
    for subject in split.val + split.test:
        labels = read_labels(runner.layout.regularize_dir("euclidean", subject) / "labels_mrf.txt")
        assert labels.shape == (162,)
    assert not (runner.layout.regularize_dir("euclidean", split.train[0])).exists()
