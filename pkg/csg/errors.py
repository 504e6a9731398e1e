"""
Exception hierarchy for the csg pipeline.

Every error carries the process exit code the CLI should return, so a failing
stage can be reported without the caller knowing which module raised it.
"""

from typing import Iterable, Optional


class CsgError(Exception):
    """Base class for all pipeline errors."""

    exit_code = 1


class ConfigError(CsgError):
    """Invalid configuration value or command-line usage."""

    exit_code = 2


class DataValidationError(CsgError):
    """Input data does not satisfy the documented grammar or invariants."""

    exit_code = 3


class MeshFormatError(DataValidationError):
    """A mesh file could not be parsed."""

    def __init__(self, path, line_no: Optional[int], reason: str):
        self.path = str(path)
        self.line_no = line_no
        where = f"{self.path}:{line_no}" if line_no is not None else self.path
        super().__init__(f"Malformed mesh file {where}: {reason}")


class FaceIndexError(DataValidationError):
    """A face references a vertex that does not exist."""

    def __init__(self, face_no: int, index: int, n_vertices: int):
        self.face_no = face_no
        self.index = index
        self.n_vertices = n_vertices
        super().__init__(
            f"Face {face_no} references vertex {index} but the mesh has only "
            f"{n_vertices} vertices"
        )


class DisconnectedMeshError(DataValidationError):
    """The mesh edge graph has more than one connected component."""

    def __init__(self, component_sizes: Iterable[int]):
        self.component_sizes = sorted((int(s) for s in component_sizes), reverse=True)
        super().__init__(
            f"Mesh is disconnected: {len(self.component_sizes)} components with sizes "
            f"{self.component_sizes}"
        )


class ZeroLengthEdgeError(DataValidationError):
    """Two vertices joined by an edge coincide."""

    def __init__(self, i: int, j: int):
        self.pair = (int(i), int(j))
        super().__init__(f"Zero-length edge between coincident vertices {i} and {j}")


class SplitError(DataValidationError):
    """Dataset cannot be split as requested."""


class ArtifactError(DataValidationError):
    """An upstream artifact is missing or does not validate."""

    def __init__(self, path, reason: str = "missing"):
        self.path = str(path)
        super().__init__(f"Expected artifact {self.path}: {reason}")


class NumericalError(CsgError):
    """A numerical procedure failed."""

    exit_code = 4


class EigenConvergenceError(NumericalError):
    """The eigensolver did not reach the residual tolerance."""

    def __init__(self, worst_residual: float, tol: float, detail: str = ""):
        self.worst_residual = float(worst_residual)
        self.tol = float(tol)
        msg = f"Eigensolver did not converge: worst residual {worst_residual:.3e} > tol {tol:.1e}"
        if detail:
            msg = f"{msg} ({detail})"
        super().__init__(msg)


class DegenerateAlignmentError(NumericalError):
    """Procrustes cross-covariance is rank deficient."""

    def __init__(self, singular_values):
        self.singular_values = [float(s) for s in singular_values]
        super().__init__(
            f"Degenerate Procrustes configuration: cross-covariance singular values "
            f"{self.singular_values}"
        )


class TrainingDivergedError(NumericalError):
    """Training loss became non-finite."""

    def __init__(self, epoch: int, checkpoint: Optional[str]):
        self.epoch = epoch
        self.checkpoint = checkpoint
        super().__init__(
            f"Training diverged at epoch {epoch} (non-finite loss); "
            f"last good checkpoint: {checkpoint or 'none written'}"
        )
