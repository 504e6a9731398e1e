"""
Spectral embedding of brain graphs.

L = I - D^(-1/2) A D^(-1/2); the smallest nontrivial eigenpairs give normalized
spectral coordinates U_hat = U * sqrt(Lambda).
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import ArpackNoConvergence, eigsh, lobpcg

from .errors import DataValidationError, EigenConvergenceError
from .surface_graph import AdjacencyMode, BrainGraph, SurfaceMesh, build_graph

logger = logging.getLogger(__name__)

RESIDUAL_TOL = 1e-6
MAX_ITER = 5000
ZERO_EIGENVALUE = 1e-8
DENSE_LIMIT = 2000
# Shift for ARPACK shift-invert; L - sigma*I is positive definite.
SHIFT = -1e-3


@dataclass
class EmbeddingConfig:
    d: int = 3
    solver: str = "lanczos"
    tol: float = RESIDUAL_TOL
    max_iter: int = MAX_ITER
    seed: int = 0


@dataclass(frozen=True)
class LaplacianMatrix:
    matrix: sparse.csr_matrix
    degrees: np.ndarray

    @property
    def n(self) -> int:
        return int(self.matrix.shape[0])


@dataclass(frozen=True)
class EigenResult:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    residuals: np.ndarray


@dataclass(frozen=True)
class SpectralEmbedding:
    """Nontrivial eigenvalues, eigenvectors U (orthonormal) and coordinates U * sqrt(lambda)."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    coordinates: np.ndarray
    aligned: bool = False

    @property
    def d(self) -> int:
        return int(self.coordinates.shape[1])

    @property
    def n(self) -> int:
        return int(self.coordinates.shape[0])

    def transformed(self, rotation: np.ndarray) -> "SpectralEmbedding":
        """Apply an orthogonal d x d transform on the right and mark the result aligned."""
        return SpectralEmbedding(
            eigenvalues=self.eigenvalues,
            eigenvectors=self.eigenvectors @ rotation,
            coordinates=self.coordinates @ rotation,
            aligned=True,
        )


def build_laplacian(graph: BrainGraph) -> LaplacianMatrix:
    """Normalized graph Laplacian; exactly symmetric by construction."""
    adjacency = graph.adjacency().tocoo()
    degrees = np.asarray(adjacency.sum(axis=1)).ravel()
    isolated = np.flatnonzero(degrees <= 0)
    if len(isolated):
        raise DataValidationError(
            f"Graph has {len(isolated)} isolated node(s) with zero degree, first: {int(isolated[0])}"
        )
    scale = 1.0 / np.sqrt(degrees)
    # s_i * s_j is commutative, so entries (i, j) and (j, i) are bitwise equal
    data = adjacency.data * (scale[adjacency.row] * scale[adjacency.col])
    normalized = sparse.csr_matrix((data, (adjacency.row, adjacency.col)), shape=adjacency.shape)
    laplacian = (sparse.identity(graph.n_nodes, format="csr") - normalized).tocsr()
    laplacian.sum_duplicates()
    laplacian.eliminate_zeros()
    return LaplacianMatrix(laplacian, degrees)


def _residuals(matrix, values: np.ndarray, vectors: np.ndarray) -> np.ndarray:
    return np.linalg.norm(matrix @ vectors - vectors * values, axis=0)


def _fix_signs(vectors: np.ndarray) -> np.ndarray:
    """Flip each column so its largest-magnitude entry is positive."""
    idx = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[idx, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


def dense_eig_oracle(laplacian: LaplacianMatrix) -> Tuple[np.ndarray, np.ndarray]:
    """Full spectrum by direct symmetric decomposition (test oracle, N <= 2000)."""
    if laplacian.n > DENSE_LIMIT:
        raise DataValidationError(
            f"Dense eigendecomposition limited to N <= {DENSE_LIMIT}, got N = {laplacian.n}"
        )
    values, vectors = np.linalg.eigh(laplacian.matrix.toarray())
    return values, vectors


def smallest_eigenpairs(laplacian: LaplacianMatrix, k: int, solver: str = "lanczos",
                        tol: float = RESIDUAL_TOL, max_iter: int = MAX_ITER, seed: int = 0) -> EigenResult:
    """
    The k + 1 smallest eigenpairs in ascending order, trivial pair included.

    Every returned pair satisfies ||L u - lambda u|| <= tol or EigenConvergenceError is raised.
    """
    n = laplacian.n
    if k + 1 > n:
        raise DataValidationError(f"Requested {k + 1} eigenpairs from a {n}-node graph")
    matrix = laplacian.matrix
    count = k + 1
    rng = np.random.default_rng(seed)

    if solver == "dense" or count >= n - 1:
        values, vectors = dense_eig_oracle(laplacian)
        values, vectors = values[:count], vectors[:, :count]
    elif solver == "lanczos":
        try:
            values, vectors = eigsh(
                matrix.tocsc(), k=count, sigma=SHIFT, which="LM",
                v0=rng.standard_normal(n), maxiter=max_iter, tol=tol * 1e-3,
            )
        except ArpackNoConvergence as e:
            worst = _residuals(matrix, e.eigenvalues, e.eigenvectors).max() if len(e.eigenvalues) else np.inf
            raise EigenConvergenceError(worst, tol, "ARPACK shift-invert") from e
    elif solver == "lobpcg":
        block = rng.standard_normal((n, count))
        values, vectors = lobpcg(matrix, block, largest=False, tol=tol * 1e-2, maxiter=max_iter)
    else:
        raise DataValidationError(f"Unknown eigensolver '{solver}'")

    order = np.argsort(values, kind="stable")
    values = np.asarray(values)[order]
    vectors = _fix_signs(np.asarray(vectors)[:, order])
    residuals = _residuals(matrix, values, vectors)
    worst = float(residuals.max())
    if not np.isfinite(worst) or worst > tol:
        raise EigenConvergenceError(worst, tol, f"solver={solver}")

    logger.debug("eigensolve %s: N=%d k=%d worst residual %.2e", solver, n, k, worst)
    return EigenResult(values, vectors, residuals)


def spectral_coordinates(pairs: EigenResult, d: int) -> SpectralEmbedding:
    """Drop the trivial pair and scale eigenvectors by sqrt(lambda)."""
    available = len(pairs.eigenvalues) - 1
    if d > available:
        raise DataValidationError(f"Requested d = {d} but only {available} nontrivial pairs available")
    if pairs.eigenvalues[0] >= ZERO_EIGENVALUE:
        logger.warning("smallest eigenvalue %.3e is not numerically zero", pairs.eigenvalues[0])
    values = pairs.eigenvalues[1:d + 1].copy()
    if np.any(values < ZERO_EIGENVALUE):
        raise DataValidationError(
            f"Nontrivial eigenvalues must be positive, got {values.tolist()}; is the graph connected?"
        )
    vectors = pairs.eigenvectors[:, 1:d + 1].copy()
    return SpectralEmbedding(values, vectors, vectors * np.sqrt(values))


def embed_mesh(mesh: SurfaceMesh, config: Optional[EmbeddingConfig] = None) -> SpectralEmbedding:
    """build_graph -> build_laplacian -> smallest_eigenpairs -> spectral_coordinates."""
    config = config or EmbeddingConfig()
    graph = build_graph(mesh, AdjacencyMode.MESH_EDGES)
    laplacian = build_laplacian(graph)
    pairs = smallest_eigenpairs(laplacian, config.d, solver=config.solver,
                                tol=config.tol, max_iter=config.max_iter, seed=config.seed)
    return spectral_coordinates(pairs, config.d)
