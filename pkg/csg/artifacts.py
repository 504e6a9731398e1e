"""
Text and JSON artifact grammars shared by the pipeline stages.

Matrices are written as a header line ``rows cols`` followed by one row per
line with 17 significant digits, so reading back gives the same float64 values.
"""

import json
from pathlib import Path
from typing import Any, Dict

import numpy as np

from .errors import ArtifactError
from .spectral_alignment import AlignmentResult
from .spectral_embedding import SpectralEmbedding

FLOAT_FMT = "%.17g"

SPECTRAL_FILE = "spectral.txt"
EIGENVALUES_FILE = "eigenvalues.txt"
ALIGNED_FILE = "spectral_aligned.txt"
ALIGN_FILE = "align.json"
PROBABILITIES_FILE = "probabilities.txt"
PREDICTED_LABELS_FILE = "labels_pred.txt"
MRF_LABELS_FILE = "labels_mrf.txt"


def _require(path) -> Path:
    path = Path(path)
    if not path.exists():
        raise ArtifactError(path, "missing; run the stage that produces it first")
    return path


def write_matrix(path, matrix: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    matrix = np.asarray(matrix, dtype=np.float64)
    rows, cols = matrix.shape
    with path.open("w", encoding="utf-8") as f:
        f.write(f"{rows} {cols}\n")
        np.savetxt(f, matrix, fmt=FLOAT_FMT)
    return path


def read_matrix(path) -> np.ndarray:
    path = _require(path)
    with path.open("r", encoding="utf-8") as f:
        header = f.readline().split()
        try:
            rows, cols = int(header[0]), int(header[1])
            data = np.loadtxt(f, dtype=np.float64, ndmin=2)
        except (IndexError, ValueError) as e:
            raise ArtifactError(path, f"malformed matrix file: {e}") from e
    if rows == 0:
        data = np.zeros((0, cols))
    if data.shape != (rows, cols):
        raise ArtifactError(path, f"header says {rows} x {cols} but found {data.shape[0]} x {data.shape[1]}")
    return data


def write_vector(path, values, fmt: str = FLOAT_FMT) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, np.asarray(values).reshape(-1), fmt=fmt)
    return path


def read_vector(path, dtype=np.float64) -> np.ndarray:
    path = _require(path)
    try:
        return np.atleast_1d(np.loadtxt(path, dtype=dtype))
    except ValueError as e:
        raise ArtifactError(path, f"malformed value list: {e}") from e


def write_labels(path, labels) -> Path:
    return write_vector(path, np.asarray(labels, dtype=np.int64), fmt="%d")


def read_labels(path) -> np.ndarray:
    return read_vector(path, dtype=np.int64)


def write_embedding(directory, embedding: SpectralEmbedding) -> Dict[str, Path]:
    """``spectral.txt`` (or ``spectral_aligned.txt`` once aligned) plus ``eigenvalues.txt``."""
    directory = Path(directory)
    name = ALIGNED_FILE if embedding.aligned else SPECTRAL_FILE
    paths = {"coordinates": write_matrix(directory / name, embedding.coordinates)}
    paths["eigenvalues"] = write_vector(directory / EIGENVALUES_FILE, embedding.eigenvalues)
    return paths


def read_embedding(directory, aligned: bool = False) -> SpectralEmbedding:
    """Coordinates and eigenvalues; eigenvectors are recovered as coordinates / sqrt(lambda)."""
    directory = Path(directory)
    coords = read_matrix(directory / (ALIGNED_FILE if aligned else SPECTRAL_FILE))
    values = read_vector(directory / EIGENVALUES_FILE)
    if len(values) != coords.shape[1]:
        raise ArtifactError(
            directory / EIGENVALUES_FILE,
            f"{len(values)} eigenvalues for a {coords.shape[1]}-D embedding",
        )
    if aligned:
        # U R from the unaligned coordinates and the stored transform
        base = read_matrix(directory / SPECTRAL_FILE) / np.sqrt(values)
        vectors = base @ read_rotation(directory / ALIGN_FILE)
    else:
        vectors = coords / np.sqrt(values)
    return SpectralEmbedding(values, vectors, coords, aligned=aligned)


def write_json(path, payload: Dict[str, Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return path


def read_json(path) -> Dict[str, Any]:
    path = _require(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ArtifactError(path, f"invalid JSON: {e}") from e


def write_alignment(path, result: AlignmentResult) -> Path:
    return write_json(path, result.to_dict())


def read_rotation(path) -> np.ndarray:
    payload = read_json(path)
    try:
        d = int(payload["d"])
        return np.array(payload["rotation"], dtype=np.float64).reshape(d, d)
    except (KeyError, ValueError) as e:
        raise ArtifactError(path, f"malformed alignment record: {e}") from e
