"""
Pipeline stages and the run manifest.

Stages read and write plain-text artifacts under ``runtime.out_dir`` so each one
can run on its own from the command line:

    synth -> split -> embed -> align -> train -> predict -> regularize -> evaluate
"""

import dataclasses
import json
import logging
import os
import tempfile
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence

import numpy as np
import psutil

from . import __version__
from .artifacts import (
    ALIGN_FILE,
    MRF_LABELS_FILE,
    PREDICTED_LABELS_FILE,
    PROBABILITIES_FILE,
    read_embedding,
    read_labels,
    read_matrix,
    write_alignment,
    write_embedding,
    write_json,
    write_labels,
    write_matrix,
)
from .config import PipelineConfig
from .errors import ArtifactError, DataValidationError
from .evaluation import ParcelMetrics, emit_report, evaluate_subject
from .gconv_net import load_checkpoint
from .mrf_regularizer import regularize, sweep_lambda
from .spectral_alignment import icp_align
from .spectral_embedding import embed_mesh
from .surface_graph import (
    MESH_FILE,
    DatasetSplit,
    SurfaceMesh,
    generate_cohort,
    load_mesh,
    read_split,
    save_subject,
    split_dataset,
    write_split,
)
from .trainer import SubjectData, prepare_subject, predict, train
from .workers import map_subjects

logger = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.json"
MRF_SUFFIX = "+mrf"


class RunLayout:
    """Artifact paths under the output directory."""

    def __init__(self, out_dir, data_dir):
        self.out_dir = Path(out_dir)
        self.data_dir = Path(data_dir)

    @property
    def split_file(self) -> Path:
        return self.out_dir / "split.txt"

    @property
    def manifest(self) -> Path:
        return self.out_dir / MANIFEST_FILE

    @property
    def report_dir(self) -> Path:
        return self.out_dir / "report"

    def subject_data(self, subject: str) -> Path:
        return self.data_dir / subject

    def subject_dir(self, subject: str) -> Path:
        return self.out_dir / "subjects" / subject

    def run_dir(self, mode: str) -> Path:
        return self.out_dir / "runs" / mode

    def checkpoint(self, mode: str, fmt: str = "binary") -> Path:
        return self.run_dir(mode) / ("checkpoint.json" if fmt == "json" else "checkpoint.bin")

    def train_log(self, mode: str) -> Path:
        return self.run_dir(mode) / "train_log.csv"

    def predict_dir(self, mode: str, subject: str) -> Path:
        return self.run_dir(mode) / "predict" / subject

    def regularize_dir(self, mode: str, subject: str) -> Path:
        return self.run_dir(mode) / "regularize" / subject

    def mrf_record(self, mode: str) -> Path:
        return self.run_dir(mode) / "mrf.json"


@dataclass
class StageRecord:
    name: str
    seconds: float = 0.0
    rss_mb: float = 0.0
    status: str = "running"
    artifacts: List[str] = field(default_factory=list)


@dataclass
class RunManifest:
    """Config snapshot, seeds, subjects, per-stage timings and every artifact written."""

    version: str = __version__
    config: Dict = field(default_factory=dict)
    seeds: Dict[str, int] = field(default_factory=dict)
    subjects: List[str] = field(default_factory=list)
    stages: List[StageRecord] = field(default_factory=list)

    def record(self, stage: StageRecord) -> None:
        self.stages = [s for s in self.stages if s.name != stage.name] + [stage]

    def artifacts(self) -> List[str]:
        return [a for stage in self.stages for a in stage.artifacts]

    def timings(self) -> Dict[str, float]:
        return {s.name: round(s.seconds, 6) for s in self.stages if s.status == "ok"}

    def missing_artifacts(self) -> List[str]:
        return [a for a in self.artifacts() if not Path(a).exists()]

    def to_dict(self) -> Dict:
        return dataclasses.asdict(self)

    @classmethod
    def load(cls, path) -> "RunManifest":
        path = Path(path)
        if not path.exists():
            return cls()
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
            stages = [StageRecord(**s) for s in data.pop("stages", [])]
            return cls(stages=stages, **data)
        except (json.JSONDecodeError, TypeError) as e:
            raise ArtifactError(path, f"corrupt manifest: {e}") from e

    def write(self, path) -> Path:
        """Write through a temporary file and rename, so readers never see a partial manifest."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".manifest.", suffix=".tmp")
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, sort_keys=True, indent=2)
            f.write("\n")
        os.replace(tmp, path)
        return path


class StageRunner:
    """Times stages and keeps the manifest current on disk."""

    def __init__(self, config: PipelineConfig):
        self.config = config
        self.layout = RunLayout(config.runtime.out_dir, config.runtime.data_dir)
        self.manifest = RunManifest.load(self.layout.manifest)
        self.manifest.version = __version__
        self.manifest.config = config.to_dict()
        self.manifest.seeds = {
            "synth": config.synth.seed,
            "split": config.runtime.seed,
            "training": config.runtime.seed,
            "embedding": config.embedding.seed,
        }
        self._process = psutil.Process()

    def _rss_mb(self) -> float:
        return self._process.memory_info().rss / (1024 * 1024)

    @contextmanager
    def stage(self, name: str) -> Iterator[StageRecord]:
        record = StageRecord(name)
        rss_before = self._rss_mb()
        started = time.perf_counter()
        logger.info("stage %s: start", name)
        try:
            yield record
            record.status = "ok"
        except Exception:
            record.status = "failed"
            logger.error("stage %s failed after %.2fs", name, time.perf_counter() - started)
            raise
        finally:
            record.seconds = time.perf_counter() - started
            record.rss_mb = round(max(rss_before, self._rss_mb()), 1)
            self.manifest.record(record)
            self.manifest.write(self.layout.manifest)
        logger.info("stage %s: done in %.2fs (%d artifacts)", name, record.seconds, len(record.artifacts))


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def list_subjects(data_dir) -> List[str]:
    data_dir = Path(data_dir)
    subjects = sorted(p.name for p in data_dir.iterdir() if (p / MESH_FILE).exists()) if data_dir.is_dir() else []
    if not subjects:
        raise ArtifactError(data_dir / "<subject>" / MESH_FILE, "no subject directories found")
    return subjects


def load_split(layout: RunLayout) -> DatasetSplit:
    if not layout.split_file.exists():
        raise ArtifactError(layout.split_file, "missing; run 'split' first")
    return read_split(layout.split_file)


def reference_subject(config: PipelineConfig, split: DatasetSplit) -> str:
    """The configured reference, else the first training subject by sorted id."""
    if config.alignment.reference:
        return config.alignment.reference
    if not split.train:
        raise DataValidationError("Split has no training subjects to pick an alignment reference from")
    return sorted(split.train)[0]


def _load_mesh(layout: RunLayout, subject: str) -> SurfaceMesh:
    return load_mesh(layout.subject_data(subject), format="internal")


def _subject_data(layout: RunLayout, subject: str, mode: str) -> SubjectData:
    mesh = _load_mesh(layout, subject)
    embedding = None
    if mode != "euclidean":
        embedding = read_embedding(layout.subject_dir(subject), aligned=True)
    return prepare_subject(subject, mesh, embedding, mode)


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def run_synth(runner: StageRunner) -> List[str]:
    config = runner.config
    with runner.stage("synth") as record:
        cohort = generate_cohort(config.synth)
        for subject, mesh in cohort.items():
            directory = runner.layout.subject_data(subject)
            save_subject(directory, mesh)
            record.artifacts.append(str(directory / MESH_FILE))
        runner.manifest.subjects = sorted(cohort)
    return sorted(cohort)


def run_split(runner: StageRunner) -> DatasetSplit:
    with runner.stage("split") as record:
        subjects = list_subjects(runner.layout.data_dir)
        split = split_dataset(subjects, runner.config.runtime.seed)
        write_split(runner.layout.split_file, split)
        runner.manifest.subjects = split.all_subjects()
        record.artifacts.append(str(runner.layout.split_file))
        logger.info("split: %d train / %d val / %d test", len(split.train), len(split.val), len(split.test))
    return split


def run_embed(runner: StageRunner, subjects: Optional[Sequence[str]] = None) -> None:
    config, layout = runner.config, runner.layout
    subjects = list(subjects) if subjects else list_subjects(layout.data_dir)

    def _embed(subject: str) -> List[str]:
        embedding = embed_mesh(_load_mesh(layout, subject), config.embedding)
        paths = write_embedding(layout.subject_dir(subject), embedding)
        return [str(p) for p in paths.values()]

    with runner.stage("embed") as record:
        for paths in map_subjects(_embed, subjects, config.runtime.workers):
            record.artifacts.extend(paths)


def run_align(runner: StageRunner, subjects: Optional[Sequence[str]] = None,
              reference: Optional[str] = None) -> str:
    config, layout = runner.config, runner.layout
    subjects = list(subjects) if subjects else list_subjects(layout.data_dir)
    reference = reference or reference_subject(config, load_split(layout))
    target = read_embedding(layout.subject_dir(reference))
    alignment = dataclasses.replace(config.alignment, workers=1)

    def _align(subject: str) -> List[str]:
        embedding = read_embedding(layout.subject_dir(subject))
        result, aligned = icp_align(embedding, target, alignment)
        logger.info("align %s -> %s: mean NN distance %.3e after %d iteration(s)",
                    subject, reference, result.mean_distance, result.iterations)
        paths = write_embedding(layout.subject_dir(subject), aligned)
        paths["align"] = write_alignment(layout.subject_dir(subject) / ALIGN_FILE, result)
        return [str(p) for p in paths.values()]

    with runner.stage("align") as record:
        for paths in map_subjects(_align, subjects, config.runtime.workers):
            record.artifacts.extend(paths)
    return reference


def run_train(runner: StageRunner, mode: str):
    config, layout = runner.config, runner.layout
    split = load_split(layout)
    training = dataclasses.replace(
        config.training,
        mode=mode,
        seed=config.runtime.seed,
        checkpoint_dir=str(layout.run_dir(mode)),
        checkpoint_format=config.runtime.checkpoint_format,
        workers=config.runtime.workers,
    )
    with runner.stage(f"train:{mode}") as record:
        train_subjects = map_subjects(lambda s: _subject_data(layout, s, mode), split.train, config.runtime.workers)
        val_subjects = map_subjects(lambda s: _subject_data(layout, s, mode), split.val, config.runtime.workers)
        result = train(train_subjects, val_subjects, training, config.network)
        record.artifacts.append(str(result.log.write_csv(layout.train_log(mode))))
        if result.checkpoint is not None:
            record.artifacts.append(str(result.checkpoint))
    return result


def run_predict(runner: StageRunner, mode: str, subjects: Optional[Sequence[str]] = None) -> None:
    config, layout = runner.config, runner.layout
    subjects = list(subjects) if subjects else load_split(layout).all_subjects()
    params = load_checkpoint(layout.checkpoint(mode, config.runtime.checkpoint_format))

    def _predict(subject: str) -> List[str]:
        probabilities, labels = predict(params, _subject_data(layout, subject, mode))
        directory = layout.predict_dir(mode, subject)
        return [
            str(write_matrix(directory / PROBABILITIES_FILE, probabilities)),
            str(write_labels(directory / PREDICTED_LABELS_FILE, labels)),
        ]

    with runner.stage(f"predict:{mode}") as record:
        for paths in map_subjects(_predict, subjects, config.runtime.workers):
            record.artifacts.extend(paths)


def run_regularize(runner: StageRunner, mode: str, lam: Optional[float] = None) -> float:
    """MRF refinement of the validation and test predictions; lambda swept on validation when unset."""
    config, layout = runner.config, runner.layout
    split = load_split(layout)
    lam = lam if lam is not None else config.mrf.lambda_

    def _probabilities(subject: str) -> np.ndarray:
        return read_matrix(layout.predict_dir(mode, subject) / PROBABILITIES_FILE)

    with runner.stage(f"regularize:{mode}") as record:
        scores: Dict[float, float] = {}
        if lam is None:
            if not split.val:
                raise DataValidationError("Lambda sweep needs validation subjects; set mrf.lambda_ instead")
            meshes = [_load_mesh(layout, s) for s in split.val]
            lam, scores = sweep_lambda(
                [_probabilities(s) for s in split.val], meshes, [m.labels for m in meshes],
                config.network.n_parcels, config.mrf.sweep, config.mrf.max_cycles,
            )

        def _refine(subject: str) -> str:
            labels = regularize(_probabilities(subject), _load_mesh(layout, subject), lam, config.mrf.max_cycles)
            return str(write_labels(layout.regularize_dir(mode, subject) / MRF_LABELS_FILE, labels))

        record.artifacts.extend(map_subjects(_refine, list(split.val) + list(split.test), config.runtime.workers))
        payload = {"lambda": lam, "sweep": {repr(k): v for k, v in scores.items()}}
        record.artifacts.append(str(write_json(layout.mrf_record(mode), payload)))
    return lam


def run_evaluate(runner: StageRunner, modes: Sequence[str]) -> Dict[str, Path]:
    config, layout = runner.config, runner.layout
    split = load_split(layout)
    if not split.test:
        raise DataValidationError("Split has no test subjects to evaluate")

    def _score(item):
        label_file, subject = item
        mesh = _load_mesh(layout, subject)
        return evaluate_subject(read_labels(label_file), mesh.labels, mesh, config.network.n_parcels, config.evaluation)

    with runner.stage("evaluate") as record:
        runs: Dict[str, Dict[str, ParcelMetrics]] = {}
        for mode in modes:
            variants = [(mode, lambda s: layout.predict_dir(mode, s) / PREDICTED_LABELS_FILE)]
            if layout.mrf_record(mode).exists():
                variants.append((mode + MRF_SUFFIX, lambda s: layout.regularize_dir(mode, s) / MRF_LABELS_FILE))
            for name, locate in variants:
                items = [(locate(s), s) for s in split.test]
                metrics = map_subjects(_score, items, config.runtime.workers)
                runs[name] = dict(zip(split.test, metrics))
                logger.info("%s: mean Dice %.4f", name, float(np.mean([m.mean_dice for m in metrics])))
        paths = emit_report(runs, layout.report_dir, timings=runner.manifest.timings())
        record.artifacts.extend(str(p) for p in paths.values())
    return paths


def run_pipeline(runner: StageRunner) -> Dict[str, Path]:
    """Every stage in order; synthesizes a cohort when the data directory holds none."""
    config, layout = runner.config, runner.layout
    try:
        list_subjects(layout.data_dir)
    except ArtifactError:
        logger.info("no subjects under %s; generating a synthetic cohort", layout.data_dir)
        run_synth(runner)
    run_split(runner)
    run_embed(runner)
    run_align(runner)
    for mode in config.runtime.modes:
        run_train(runner, mode)
        run_predict(runner, mode)
        run_regularize(runner, mode)
    paths = run_evaluate(runner, config.runtime.modes)
    missing = runner.manifest.missing_artifacts()
    if missing:
        raise ArtifactError(missing[0], "listed in the manifest but not on disk")
    return paths
