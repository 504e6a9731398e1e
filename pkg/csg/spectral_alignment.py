"""
Alignment of spectral embeddings.

Spectral coordinates are defined up to an orthogonal transform (sign flips,
rotations within repeated eigenvalues). Each subject is aligned to a reference
embedding by ICP: nearest-reference correspondence alternating with an
orthogonal Procrustes solve.
"""

import itertools
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy.spatial import cKDTree

from .errors import DataValidationError, DegenerateAlignmentError
from .spectral_embedding import SpectralEmbedding
from .surface_graph import BrainGraph, zscore

logger = logging.getLogger(__name__)

EXHAUSTIVE_THRESHOLD = 5000
RANK_TOL = 1e-12
# Extra neighbors fetched from the KD-tree to settle exact distance ties by index.
TIE_CANDIDATES = 4


@dataclass
class AlignmentConfig:
    max_iters: int = 100
    tol: float = 1e-7
    reference: Optional[str] = None
    exhaustive_threshold: int = EXHAUSTIVE_THRESHOLD
    workers: int = 1


@dataclass
class AlignmentResult:
    rotation: np.ndarray
    mean_distance: float
    iterations: int
    converged: bool
    history: List[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "d": int(self.rotation.shape[0]),
            "rotation": [float(v) for v in self.rotation.ravel()],
            "iterations": int(self.iterations),
            "final_distance": float(self.mean_distance),
            "converged": bool(self.converged),
        }


def _exhaustive_nearest(points: np.ndarray, reference: np.ndarray, chunk: int = 512) -> Tuple[np.ndarray, np.ndarray]:
    indices = np.empty(len(points), dtype=np.int64)
    distances = np.empty(len(points))
    for start in range(0, len(points), chunk):
        block = points[start:start + chunk]
        sq = ((block[:, None, :] - reference[None, :, :]) ** 2).sum(axis=2)
        best = np.argmin(sq, axis=1)
        indices[start:start + chunk] = best
        distances[start:start + chunk] = np.sqrt(sq[np.arange(len(block)), best])
    return indices, distances


def _lowest_tied(point: np.ndarray, reference: np.ndarray, tree: cKDTree, best_sq: float) -> int:
    """Lowest reference index at exactly ``best_sq`` from ``point``, searched over a widened ball."""
    radius = np.sqrt(best_sq) * (1.0 + 1e-9) + 1e-12
    ball = np.asarray(tree.query_ball_point(point, radius), dtype=np.int64)
    sq = ((reference[ball] - point) ** 2).sum(axis=1)
    return int(ball[sq == sq.min()].min())


def nearest_reference(points: np.ndarray, reference: np.ndarray, tree: Optional[cKDTree] = None,
                      exhaustive_threshold: int = EXHAUSTIVE_THRESHOLD, workers: int = 1,
                      return_distances: bool = False):
    """
    Index of the Euclidean-nearest reference point for every point; ties go to the lowest index.

    Uses a KD-tree when the larger of the two sets exceeds ``exhaustive_threshold``.
    """
    points = np.asarray(points, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if points.ndim != 2 or reference.ndim != 2 or points.shape[1] != reference.shape[1]:
        raise DataValidationError(
            f"Dimension mismatch: points {points.shape} vs reference {reference.shape}"
        )
    if len(points) == 0 or len(reference) == 0:
        raise DataValidationError("nearest_reference needs non-empty point sets")

    if max(len(points), len(reference)) <= exhaustive_threshold and tree is None:
        indices, distances = _exhaustive_nearest(points, reference)
    else:
        tree = tree if tree is not None else cKDTree(reference)
        k = min(TIE_CANDIDATES, len(reference))
        dist, idx = tree.query(points, k=k, workers=workers)
        if k == 1:
            indices, distances = idx.astype(np.int64), dist
        else:
            # exact recomputation so ties compare equal, then lowest index among the minima
            sq = ((points[:, None, :] - reference[idx]) ** 2).sum(axis=2)
            best_sq = sq.min(axis=1, keepdims=True)
            candidates = np.where(sq == best_sq, idx, np.iinfo(np.int64).max)
            indices = candidates.min(axis=1).astype(np.int64)
            distances = np.sqrt(best_sq[:, 0])
            # every fetched neighbor ties: more equally close points may lie beyond k
            for row in np.flatnonzero(sq.max(axis=1) <= best_sq[:, 0]):
                indices[row] = _lowest_tied(points[row], reference, tree, float(best_sq[row, 0]))
    if return_distances:
        return indices, distances
    return indices


def procrustes_transform(source: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Orthogonal R minimizing ||source @ R - target||_F; reflections allowed, no centering."""
    source = np.asarray(source, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if source.shape != target.shape:
        raise DataValidationError(f"Procrustes needs matched sets, got {source.shape} vs {target.shape}")
    k, d = source.shape
    if k < d:
        raise DataValidationError(f"Procrustes needs at least d = {d} matched pairs, got {k}")
    cross = source.T @ target
    u, s, vt = np.linalg.svd(cross)
    if s[-1] <= RANK_TOL * max(s[0], 1e-300):
        raise DegenerateAlignmentError(s)
    return u @ vt


def _principal_frames(embedding: np.ndarray, reference: np.ndarray) -> List[np.ndarray]:
    """Identity plus every sign pattern mapping the moment axes of one set onto the other's."""
    d = embedding.shape[1]
    _, axes_e = np.linalg.eigh(embedding.T @ embedding)
    _, axes_r = np.linalg.eigh(reference.T @ reference)
    frames = [np.eye(d)]
    for signs in itertools.product((1.0, -1.0), repeat=d):
        frames.append(axes_e @ np.diag(signs) @ axes_r.T)
    return frames


def _icp_from(coords: np.ndarray, reference: np.ndarray, start: np.ndarray, tree, config: AlignmentConfig):
    rotation = start
    match = nearest_reference(coords @ rotation, reference, tree=tree,
                              exhaustive_threshold=config.exhaustive_threshold,
                              workers=config.workers, return_distances=True)
    distance = float(match[1].mean())
    history = [distance]
    iterations = 0
    converged = False
    # a step that does not strictly lower the distance is rejected; an exact start stops after one pass
    while not converged and iterations < config.max_iters:
        iterations += 1
        candidate = procrustes_transform(coords, reference[match[0]])
        new_match = nearest_reference(coords @ candidate, reference, tree=tree,
                                      exhaustive_threshold=config.exhaustive_threshold,
                                      workers=config.workers, return_distances=True)
        new_distance = float(new_match[1].mean())
        if new_distance >= distance:
            converged = True
            break
        improvement = distance - new_distance
        rotation, match, distance = candidate, new_match, new_distance
        history.append(distance)
        if improvement < config.tol:
            converged = True
            break
    return AlignmentResult(rotation, distance, iterations, converged, history)


def icp_align(embedding: SpectralEmbedding, reference: SpectralEmbedding,
              config: Optional[AlignmentConfig] = None,
              max_iters: Optional[int] = None, tol: Optional[float] = None) -> Tuple[AlignmentResult, SpectralEmbedding]:
    """
    Align ``embedding`` to ``reference``; returns the result and the transformed embedding.

    ICP is started from the identity and from every sign pattern of the principal-axis
    frame; the run with the lowest final mean NN distance wins (identity on ties).
    """
    config = config or AlignmentConfig()
    if max_iters is not None or tol is not None:
        config = AlignmentConfig(
            max_iters=max_iters if max_iters is not None else config.max_iters,
            tol=tol if tol is not None else config.tol,
            reference=config.reference,
            exhaustive_threshold=config.exhaustive_threshold,
            workers=config.workers,
        )
    if embedding.d != reference.d:
        raise DataValidationError(f"Embedding dimension {embedding.d} != reference dimension {reference.d}")

    coords = embedding.coordinates
    ref = reference.coordinates
    tree = cKDTree(ref) if max(len(coords), len(ref)) > config.exhaustive_threshold else None

    best = None
    for start in _principal_frames(coords, ref):
        result = _icp_from(coords, ref, start, tree, config)
        if best is None or result.mean_distance < best.mean_distance - 1e-15:
            best = result
        if best.mean_distance == 0.0:
            break

    if not best.converged:
        logger.warning("ICP stopped at max_iters=%d with mean NN distance %.3e", config.max_iters, best.mean_distance)
    logger.debug("ICP history: %s", best.history)
    return best, embedding.transformed(best.rotation)


def spectral_feature_scale(coordinates: np.ndarray) -> float:
    """Single scalar mapping spectral coordinates to unit RMS."""
    rms = float(np.sqrt(np.mean(coordinates ** 2)))
    return 1.0 / rms if rms > 0 else 1.0


def build_feature_matrix(embedding: Optional[SpectralEmbedding], graph: BrainGraph, mode: str) -> np.ndarray:
    """
    N x 4 network input.

    ``spectral``/``pointwise``: (u1, u2, u3, S_d) from the first three aligned spectral
    coordinates, multiplied by one scalar so they have unit RMS (the alignment geometry is
    unchanged). ``euclidean``: (x, y, z, S_d) with coordinates z-scored per subject.
    The first three columns double as the convolution's kernel coordinates; embeddings
    with d > 3 contribute only their first three columns.
    """
    sulcal = graph.features[:, 3]
    if mode == "euclidean":
        coords = zscore(graph.features[:, :3])
    elif mode in ("spectral", "pointwise"):
        if embedding is None or not embedding.aligned:
            raise DataValidationError(f"Mode '{mode}' requires an aligned spectral embedding")
        if embedding.d < 3:
            raise DataValidationError(f"Spectral features need d >= 3 coordinates, got d = {embedding.d}")
        if embedding.n != graph.n_nodes:
            raise DataValidationError(
                f"Embedding has {embedding.n} rows but the graph has {graph.n_nodes} nodes"
            )
        leading = embedding.coordinates[:, :3]
        coords = leading * spectral_feature_scale(leading)
    else:
        raise DataValidationError(f"Unknown feature mode '{mode}'")
    return np.column_stack([coords, sulcal])
