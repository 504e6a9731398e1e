"""
Surface meshes and brain graphs.

Mesh ingestion (OFF, PLY, per-subject directories), graph construction
with inverse-distance edge weights, a synthetic labeled-surface generator used in
place of manually labeled cortical surfaces, and the train/validation/test split.
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from plyfile import PlyData, PlyParseError
from scipy import sparse
from scipy.sparse.csgraph import connected_components, dijkstra

from .errors import (
    DataValidationError,
    DisconnectedMeshError,
    FaceIndexError,
    MeshFormatError,
    SplitError,
    ZeroLengthEdgeError,
)

logger = logging.getLogger(__name__)

MESH_FILE = "mesh.off"
SULC_FILE = "sulc.txt"
LABELS_FILE = "labels.txt"

UNLABELED = -1

SPLIT_RATIOS = (0.7, 0.1, 0.2)

# Fixed seed of the deformation field shared by every synthetic subject.
TEMPLATE_SEED = 1729


class AdjacencyMode(str, Enum):
    MESH_EDGES = "mesh_edges"
    IDENTITY = "identity"


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class SurfaceMesh:
    """Triangle mesh with a per-vertex sulcal-depth channel and optional labels."""

    vertices: np.ndarray
    faces: np.ndarray
    sulcal_depth: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "vertices", _frozen(np.asarray(self.vertices, dtype=np.float64)))
        object.__setattr__(self, "faces", _frozen(np.asarray(self.faces, dtype=np.int64)))
        object.__setattr__(self, "sulcal_depth", _frozen(np.asarray(self.sulcal_depth, dtype=np.float64)))
        if self.labels is not None:
            object.__setattr__(self, "labels", _frozen(np.asarray(self.labels, dtype=np.int64)))

    @property
    def n_vertices(self) -> int:
        return int(self.vertices.shape[0])

    @property
    def n_faces(self) -> int:
        return int(self.faces.shape[0])

    def edges(self) -> np.ndarray:
        return mesh_edges(self.faces)


@dataclass(frozen=True)
class BrainGraph:
    """
    Graph over mesh vertices.

    ``edges`` holds each undirected edge once as (i, j) with i < j in mesh mode;
    in identity mode it holds the N self-loops (i, i) with weight 1.
    """

    features: np.ndarray
    edges: np.ndarray
    weights: np.ndarray
    mode: AdjacencyMode

    def __post_init__(self):
        object.__setattr__(self, "features", _frozen(np.asarray(self.features, dtype=np.float64)))
        object.__setattr__(self, "edges", _frozen(np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)))
        object.__setattr__(self, "weights", _frozen(np.asarray(self.weights, dtype=np.float64)))

    @property
    def n_nodes(self) -> int:
        return int(self.features.shape[0])

    def adjacency(self) -> sparse.csr_matrix:
        """Symmetric weighted adjacency matrix A."""
        n = self.n_nodes
        i, j = self.edges[:, 0], self.edges[:, 1]
        if self.mode is AdjacencyMode.IDENTITY:
            return sparse.csr_matrix((self.weights, (i, j)), shape=(n, n))
        rows = np.concatenate([i, j])
        cols = np.concatenate([j, i])
        data = np.concatenate([self.weights, self.weights])
        return sparse.csr_matrix((data, (rows, cols)), shape=(n, n))

    def neighborhoods(self) -> Tuple[np.ndarray, np.ndarray]:
        """
        Directed (i, j) pairs with j in N(i), self-loops included, sorted by i then j.

        These are the pairs the convolution sums over.
        """
        n = self.n_nodes
        self_loops = np.arange(n, dtype=np.int64)
        if self.mode is AdjacencyMode.IDENTITY:
            return self_loops, self_loops.copy()
        i, j = self.edges[:, 0], self.edges[:, 1]
        rows = np.concatenate([i, j, self_loops])
        cols = np.concatenate([j, i, self_loops])
        order = np.lexsort((cols, rows))
        return rows[order], cols[order]


@dataclass(frozen=True)
class DatasetSplit:
    train: Tuple[str, ...]
    val: Tuple[str, ...]
    test: Tuple[str, ...]
    seed: int

    def all_subjects(self) -> List[str]:
        return sorted(self.train + self.val + self.test)


@dataclass
class SynthConfig:
    n_subjects: int = 30
    n_vertices: int = 10242
    n_parcels: int = 32
    deform_amplitude: float = 0.25
    anisotropy: float = 0.25
    random_pose: bool = True
    template_weight: float = 0.7
    radius_mm: float = 70.0
    seed: int = 0


# ---------------------------------------------------------------------------
# topology helpers
# ---------------------------------------------------------------------------

def mesh_edges(faces: np.ndarray) -> np.ndarray:
    """Unique undirected edges (i < j), lexicographically sorted."""
    faces = np.asarray(faces, dtype=np.int64)
    pairs = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    pairs.sort(axis=1)
    return np.unique(pairs, axis=0)


def _edge_graph(n: int, edges: np.ndarray, weights: Optional[np.ndarray] = None) -> sparse.csr_matrix:
    if weights is None:
        weights = np.ones(len(edges))
    rows = np.concatenate([edges[:, 0], edges[:, 1]])
    cols = np.concatenate([edges[:, 1], edges[:, 0]])
    data = np.concatenate([weights, weights])
    return sparse.csr_matrix((data, (rows, cols)), shape=(n, n))


def component_sizes(n_vertices: int, faces: np.ndarray) -> List[int]:
    graph = _edge_graph(n_vertices, mesh_edges(faces))
    n_comp, labels = connected_components(graph, directed=False)
    return sorted(np.bincount(labels, minlength=n_comp).tolist(), reverse=True)


def validate_mesh(mesh: SurfaceMesh) -> SurfaceMesh:
    """Check the SurfaceMesh invariants, raising DataValidationError subclasses."""
    n = mesh.n_vertices
    if mesh.vertices.ndim != 2 or mesh.vertices.shape[1] != 3:
        raise DataValidationError(f"Vertices must be an (N, 3) array, got shape {mesh.vertices.shape}")
    if mesh.faces.ndim != 2 or mesh.faces.shape[1] != 3 or mesh.n_faces == 0:
        raise DataValidationError(f"Faces must be a non-empty (F, 3) array, got shape {mesh.faces.shape}")
    if not np.all(np.isfinite(mesh.vertices)):
        raise DataValidationError("Vertex coordinates contain non-finite values")

    bad = np.argwhere((mesh.faces < 0) | (mesh.faces >= n))
    if len(bad):
        face_no, col = bad[0]
        raise FaceIndexError(int(face_no), int(mesh.faces[face_no, col]), n)

    f = mesh.faces
    degenerate = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
    if degenerate.any():
        face_no = int(np.argmax(degenerate))
        raise DataValidationError(f"Degenerate face {face_no}: {f[face_no].tolist()}")

    sizes = component_sizes(n, mesh.faces)
    if len(sizes) > 1:
        raise DisconnectedMeshError(sizes)

    if mesh.sulcal_depth.shape != (n,) or not np.all(np.isfinite(mesh.sulcal_depth)):
        raise DataValidationError("sulcal_depth must hold one finite value per vertex")
    if mesh.labels is not None and mesh.labels.shape != (n,):
        raise DataValidationError(
            f"labels must hold one value per vertex ({n}), got {mesh.labels.shape[0]}"
        )
    return mesh


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def _content_lines(path: Path):
    """Yield (line_no, tokens) for non-empty, non-comment lines."""
    with path.open("r", encoding="utf-8") as f:
        for line_no, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if line:
                yield line_no, line.split()


def read_off(path) -> Tuple[np.ndarray, np.ndarray]:
    """Read positions and triangle faces from an OFF file."""
    path = Path(path)
    lines = _content_lines(path)
    try:
        line_no, tokens = next(lines)
    except StopIteration:
        raise MeshFormatError(path, None, "empty file") from None
    if tokens[0] != "OFF":
        raise MeshFormatError(path, line_no, f"expected 'OFF' header, got '{tokens[0]}'")
    counts = tokens[1:]
    if not counts:
        try:
            line_no, counts = next(lines)
        except StopIteration:
            raise MeshFormatError(path, line_no, "missing vertex/face counts") from None
    try:
        n_vertices, n_faces = int(counts[0]), int(counts[1])
    except (ValueError, IndexError):
        raise MeshFormatError(path, line_no, f"bad counts line {counts}") from None

    vertices = np.empty((n_vertices, 3))
    faces = np.empty((n_faces, 3), dtype=np.int64)
    try:
        for k in range(n_vertices):
            line_no, tokens = next(lines)
            if len(tokens) < 3:
                raise MeshFormatError(path, line_no, "vertex line needs 3 coordinates")
            vertices[k] = [float(t) for t in tokens[:3]]
        for k in range(n_faces):
            line_no, tokens = next(lines)
            if int(tokens[0]) != 3 or len(tokens) < 4:
                raise MeshFormatError(path, line_no, "only triangle faces are supported")
            faces[k] = [int(t) for t in tokens[1:4]]
    except StopIteration:
        raise MeshFormatError(path, None, "file ends before all vertices/faces were read") from None
    except ValueError as e:
        raise MeshFormatError(path, line_no, str(e)) from None
    return vertices, faces


def _ply_faces(path: Path, raw: np.ndarray) -> np.ndarray:
    if raw.dtype != object:
        rows = np.asarray(raw, dtype=np.int64).reshape(len(raw), -1)
    else:
        lengths = [len(f) for f in raw]
        bad = [k for k, n in enumerate(lengths) if n != 3]
        if bad:
            raise MeshFormatError(path, None, f"face {bad[0]} has {lengths[bad[0]]} vertices; only triangles are supported")
        rows = np.vstack(raw).astype(np.int64) if len(raw) else np.empty((0, 3), dtype=np.int64)
    if rows.shape[1] != 3:
        raise MeshFormatError(path, None, "only triangle faces are supported")
    return rows


def read_ply(path) -> Tuple[np.ndarray, np.ndarray]:
    """Read positions and triangle faces from an ASCII or binary PLY file."""
    path = Path(path)
    if not path.exists():
        raise MeshFormatError(path, None, "file not found")
    try:
        data = PlyData.read(str(path))
    except (PlyParseError, ValueError, IndexError) as e:
        raise MeshFormatError(path, None, str(e)) from None
    elements = {element.name: element for element in data.elements}
    if "vertex" not in elements or "face" not in elements:
        raise MeshFormatError(path, None, "PLY needs both vertex and face elements")

    vertex = elements["vertex"].data
    if not {"x", "y", "z"} <= set(vertex.dtype.names or ()):
        raise MeshFormatError(path, None, "vertex element lacks x/y/z properties")
    vertices = np.column_stack([vertex[axis] for axis in ("x", "y", "z")]).astype(np.float64)

    face = elements["face"].data
    names = [n for n in ("vertex_indices", "vertex_index") if n in (face.dtype.names or ())]
    if not names:
        raise MeshFormatError(path, None, "face element lacks a vertex_indices list")
    return vertices, _ply_faces(path, face[names[0]])


def write_off(path, vertices: np.ndarray, faces: np.ndarray) -> None:
    path = Path(path)
    lines = ["OFF", f"{len(vertices)} {len(faces)} 0"]
    lines.extend(f"{x!r} {y!r} {z!r}" for x, y, z in vertices.tolist())
    lines.extend(f"3 {a} {b} {c}" for a, b, c in faces.tolist())
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _read_column(path: Path, n: int, dtype) -> np.ndarray:
    if not path.exists():
        raise DataValidationError(f"Missing per-vertex file {path}")
    values = [line.strip() for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]
    if len(values) != n:
        raise DataValidationError(f"{path} has {len(values)} lines but the mesh has {n} vertices")
    try:
        return np.array([dtype(v) for v in values])
    except ValueError as e:
        raise DataValidationError(f"{path}: {e}") from None


def load_subject(directory) -> SurfaceMesh:
    """Load a subject directory in the internal format."""
    directory = Path(directory)
    vertices, faces = read_off(directory / MESH_FILE)
    n = len(vertices)
    sulc = _read_column(directory / SULC_FILE, n, float)
    labels_path = directory / LABELS_FILE
    labels = _read_column(labels_path, n, int) if labels_path.exists() else None
    return SurfaceMesh(vertices, faces, sulc, labels)


def save_subject(directory, mesh: SurfaceMesh) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_off(directory / MESH_FILE, mesh.vertices, mesh.faces)
    (directory / SULC_FILE).write_text(
        "".join(f"{v!r}\n" for v in mesh.sulcal_depth.tolist()), encoding="utf-8"
    )
    if mesh.labels is not None:
        (directory / LABELS_FILE).write_text(
            "".join(f"{v}\n" for v in mesh.labels.tolist()), encoding="utf-8"
        )


def load_mesh(path, format: str = "off") -> SurfaceMesh:
    """
    Load a mesh and validate it.

    ``format`` is ``off``, ``ply`` (ASCII or binary; ``ply-ascii`` is accepted too) or
    ``internal`` (a subject directory).
    OFF and PLY inputs carry no sulcal depth or labels; depth is set to zero.
    """
    if format == "internal":
        mesh = load_subject(path)
    elif format in ("off", "ply", "ply-ascii"):
        reader = read_off if format == "off" else read_ply
        vertices, faces = reader(path)
        mesh = SurfaceMesh(vertices, faces, np.zeros(len(vertices)))
    else:
        raise DataValidationError(f"Unknown mesh format '{format}'")
    return validate_mesh(mesh)


# ---------------------------------------------------------------------------
# graph construction
# ---------------------------------------------------------------------------

def zscore(values: np.ndarray) -> np.ndarray:
    """Standardize along axis 0; constant columns map to zeros."""
    values = np.asarray(values, dtype=np.float64)
    mean = values.mean(axis=0)
    std = values.std(axis=0)
    centered = values - mean
    safe = np.where(std > 0, std, 1.0)
    return np.where(std > 0, centered / safe, 0.0)


def build_graph(mesh: SurfaceMesh, mode=AdjacencyMode.MESH_EDGES) -> BrainGraph:
    """Brain graph with w(i, j) = 1 / ||v_i - v_j|| over mesh edges, or self-loops only."""
    mode = AdjacencyMode(mode)
    features = np.column_stack([mesh.vertices, mesh.sulcal_depth])
    n = mesh.n_vertices

    if mode is AdjacencyMode.IDENTITY:
        loops = np.arange(n, dtype=np.int64)
        return BrainGraph(features, np.column_stack([loops, loops]), np.ones(n), mode)

    edges = mesh_edges(mesh.faces)
    lengths = np.linalg.norm(mesh.vertices[edges[:, 0]] - mesh.vertices[edges[:, 1]], axis=1)
    zero = np.flatnonzero(lengths <= 0.0)
    if len(zero):
        i, j = edges[zero[0]]
        raise ZeroLengthEdgeError(int(i), int(j))
    return BrainGraph(features, edges, 1.0 / lengths, mode)


# ---------------------------------------------------------------------------
# synthetic surfaces
# ---------------------------------------------------------------------------

_ICOSAHEDRON_FACES = np.array([
    [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
    [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
    [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
    [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
], dtype=np.int64)


@lru_cache(maxsize=8)
def _icosphere_cached(subdivisions: int) -> Tuple[np.ndarray, np.ndarray]:
    t = (1.0 + math.sqrt(5.0)) / 2.0
    vertices = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=np.float64)
    faces = _ICOSAHEDRON_FACES.copy()
    for _ in range(subdivisions):
        edges = mesh_edges(faces)
        n = len(vertices)
        midpoints = (vertices[edges[:, 0]] + vertices[edges[:, 1]]) / 2.0
        lookup = {(int(a), int(b)): n + k for k, (a, b) in enumerate(edges)}

        def mid(a, b):
            return lookup[(a, b) if a < b else (b, a)]

        new_faces = []
        for a, b, c in faces.tolist():
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]])
        vertices = np.vstack([vertices, midpoints])
        faces = np.array(new_faces, dtype=np.int64)
    vertices /= np.linalg.norm(vertices, axis=1, keepdims=True)
    vertices.setflags(write=False)
    faces.setflags(write=False)
    return vertices, faces


def icosphere(subdivisions: int) -> Tuple[np.ndarray, np.ndarray]:
    """Unit icosphere with 10 * 4**s + 2 vertices."""
    vertices, faces = _icosphere_cached(int(subdivisions))
    return vertices.copy(), faces.copy()


def subdivisions_for(n_vertices: int) -> int:
    s = 0
    while 10 * 4 ** s + 2 < n_vertices:
        s += 1
    return s


def farthest_point_seeds(vertices: np.ndarray, faces: np.ndarray, n_seeds: int, start: int = 0) -> np.ndarray:
    """Geodesic farthest-point sampling over mesh edges, starting at ``start``."""
    edges = mesh_edges(faces)
    lengths = np.linalg.norm(vertices[edges[:, 0]] - vertices[edges[:, 1]], axis=1)
    graph = _edge_graph(len(vertices), edges, lengths)
    seeds = [int(start)]
    nearest = dijkstra(graph, directed=False, indices=start)
    for _ in range(n_seeds - 1):
        nxt = int(np.argmax(nearest))
        seeds.append(nxt)
        nearest = np.minimum(nearest, dijkstra(graph, directed=False, indices=nxt))
    return np.array(seeds, dtype=np.int64)


def geodesic_voronoi(vertices: np.ndarray, faces: np.ndarray, seeds: Sequence[int]) -> np.ndarray:
    """Label every vertex with the index of its geodesically nearest seed."""
    edges = mesh_edges(faces)
    lengths = np.linalg.norm(vertices[edges[:, 0]] - vertices[edges[:, 1]], axis=1)
    graph = _edge_graph(len(vertices), edges, lengths)
    _, _, sources = dijkstra(
        graph, directed=False, indices=np.asarray(seeds), min_only=True, return_predecessors=True
    )
    seed_to_label = {int(s): k for k, s in enumerate(seeds)}
    return np.array([seed_to_label[int(s)] for s in sources], dtype=np.int64)


@lru_cache(maxsize=8)
def _canonical_labels(subdivisions: int, n_parcels: int) -> np.ndarray:
    vertices, faces = _icosphere_cached(subdivisions)
    seeds = farthest_point_seeds(vertices, faces, n_parcels, start=0)
    labels = geodesic_voronoi(vertices, faces, seeds)
    labels.setflags(write=False)
    return labels


def smooth_field(unit_vertices: np.ndarray, rng: np.random.Generator,
                 n_waves: int = 24, band: float = 3.0) -> np.ndarray:
    """Band-limited random field on the sphere: a sum of low-frequency plane waves, max |f| = 1."""
    directions = rng.normal(size=(n_waves, 3))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    frequencies = rng.uniform(1.0, band, size=n_waves)
    phases = rng.uniform(0.0, 2.0 * math.pi, size=n_waves)
    amplitudes = rng.normal(size=n_waves) / frequencies
    f = np.cos(unit_vertices @ (directions * frequencies[:, None]).T + phases) @ amplitudes
    peak = np.abs(f).max()
    return f / peak if peak > 0 else f


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def generate_synthetic_surface(seed: int, n_vertices: int, n_parcels: int, deform_amplitude: float,
                               anisotropy: float = 0.0, random_pose: bool = False,
                               template_weight: float = 0.7, radius_mm: float = 1.0) -> SurfaceMesh:
    """
    Deformed icosphere with a sulcal-depth proxy and parcel labels.

    Vertices are displaced radially by a smooth field mixing a cohort-wide template
    (fixed seed) with a subject field (``seed``). Labels are geodesic Voronoi cells
    of farthest-point seeds on the undeformed sphere, so they follow the same
    intrinsic location in every subject.
    """
    if n_vertices < 12:
        raise DataValidationError(f"n_vertices must be >= 12, got {n_vertices}")
    if not 2 <= n_parcels <= 64:
        raise DataValidationError(f"n_parcels must be in [2, 64], got {n_parcels}")
    if not 0.0 <= deform_amplitude <= 0.5:
        raise DataValidationError(f"deform_amplitude must be in [0, 0.5], got {deform_amplitude}")
    if not 0.0 <= anisotropy < 1.0:
        raise DataValidationError(f"anisotropy must be in [0, 1), got {anisotropy}")
    if not 0.0 <= template_weight <= 1.0:
        raise DataValidationError(f"template_weight must be in [0, 1], got {template_weight}")

    s = subdivisions_for(n_vertices)
    unit, faces = icosphere(s)
    labels = _canonical_labels(s, n_parcels).copy()

    rng = np.random.default_rng([int(seed), 1])
    template = smooth_field(unit, np.random.default_rng([TEMPLATE_SEED]))
    subject = smooth_field(unit, rng)
    field_values = template_weight * template + (1.0 - template_weight) * subject
    peak = np.abs(field_values).max()
    if peak > 0:
        field_values = field_values / peak

    displacement = deform_amplitude * field_values
    vertices = unit * (1.0 + displacement)[:, None]
    if anisotropy > 0:
        vertices = vertices * np.array([1.0 + anisotropy, 1.0, 1.0 - anisotropy / 2.0])
    if random_pose:
        vertices = vertices @ random_rotation(rng).T
    vertices = vertices * radius_mm

    return SurfaceMesh(vertices, faces, zscore(displacement), labels)


def subject_id(index: int) -> str:
    return f"sub{index:03d}"


def generate_cohort(config: SynthConfig) -> Dict[str, SurfaceMesh]:
    """One synthetic mesh per subject id, seeded from ``config.seed`` and the subject index."""
    cohort = {}
    for k in range(config.n_subjects):
        cohort[subject_id(k)] = generate_synthetic_surface(
            seed=config.seed * 1000 + k,
            n_vertices=config.n_vertices,
            n_parcels=config.n_parcels,
            deform_amplitude=config.deform_amplitude,
            anisotropy=config.anisotropy,
            random_pose=config.random_pose,
            template_weight=config.template_weight,
            radius_mm=config.radius_mm,
        )
    return cohort


# ---------------------------------------------------------------------------
# dataset split
# ---------------------------------------------------------------------------

def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5 + 1e-9))


def split_dataset(subjects: Sequence[str], seed: int) -> DatasetSplit:
    """Random 70/10/20 split; train and validation counts round half up, test takes the rest."""
    subjects = sorted(subjects)
    n = len(subjects)
    if n < 5:
        raise SplitError(f"Need at least 5 subjects to split, got {n}")
    if len(set(subjects)) != n:
        raise SplitError("Subject ids must be unique")
    n_train = _round_half_up(SPLIT_RATIOS[0] * n)
    n_val = _round_half_up(SPLIT_RATIOS[1] * n)
    order = np.random.default_rng(int(seed)).permutation(n)
    shuffled = [subjects[k] for k in order]
    return DatasetSplit(
        train=tuple(sorted(shuffled[:n_train])),
        val=tuple(sorted(shuffled[n_train:n_train + n_val])),
        test=tuple(sorted(shuffled[n_train + n_val:])),
        seed=int(seed),
    )


def write_split(path, split: DatasetSplit) -> None:
    sections = [("train", split.train), ("val", split.val), ("test", split.test)]
    lines = [f"# seed {split.seed}"]
    for name, ids in sections:
        lines.append(f"[{name}]")
        lines.extend(ids)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_split(path) -> DatasetSplit:
    path = Path(path)
    if not path.exists():
        raise SplitError(f"Split file not found: {path}")
    sections: Dict[str, List[str]] = {}
    current = None
    seed = 0
    for line_no, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            tokens = line[1:].split()
            if len(tokens) == 2 and tokens[0] == "seed":
                seed = int(tokens[1])
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1]
            if current not in ("train", "val", "test"):
                raise SplitError(f"{path}:{line_no}: unknown section [{current}]")
            sections[current] = []
        elif current is None:
            raise SplitError(f"{path}:{line_no}: subject id before any section")
        else:
            sections[current].append(line)
    for name in ("train", "val", "test"):
        if name not in sections:
            raise SplitError(f"{path}: missing [{name}] section")
    ids = sections["train"] + sections["val"] + sections["test"]
    if len(set(ids)) != len(ids):
        raise SplitError(f"{path}: subject listed in more than one section")
    return DatasetSplit(tuple(sections["train"]), tuple(sections["val"]), tuple(sections["test"]), seed)
