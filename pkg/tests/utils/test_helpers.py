"""
Test utilities for csg tests
"""
from pathlib import Path
from typing import Dict, Optional

import numpy as np
from dotenv import load_dotenv
from scipy.spatial import ConvexHull

from csg.config import PipelineConfig, load_config
from csg.gconv_net import NetworkConfig
from csg.spectral_embedding import SpectralEmbedding
from csg.surface_graph import (
    AdjacencyMode,
    BrainGraph,
    SurfaceMesh,
    generate_synthetic_surface,
    save_subject,
    subject_id,
)

load_dotenv()


class CsgTestHelper:
    """Helper class building small meshes, graphs, cohorts and configs for tests"""

    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)

    def tetrahedron(self, labels=None) -> SurfaceMesh:
        """Regular tetrahedron: 4 vertices, 4 faces, 6 edges of equal length"""
        vertices = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=float)
        faces = np.array([[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]])
        return SurfaceMesh(vertices, faces, np.zeros(4), labels)

    def path_graph(self, n: int, weights=None) -> BrainGraph:
        """Path 0 - 1 - ... - n-1 as a brain graph with zero features"""
        edges = np.column_stack([np.arange(n - 1), np.arange(1, n)])
        weights = np.ones(n - 1) if weights is None else np.asarray(weights, dtype=float)
        return BrainGraph(np.zeros((n, 4)), edges, weights, AdjacencyMode.MESH_EDGES)

    def sphere_mesh(self, n: int, n_labels: int = 4) -> SurfaceMesh:
        """Random points on the unit sphere triangulated by their convex hull"""
        points = self.rng.normal(size=(n, 3))
        points /= np.linalg.norm(points, axis=1, keepdims=True)
        faces = ConvexHull(points).simplices
        labels = self.rng.integers(0, n_labels, size=n)
        return SurfaceMesh(points, faces, self.rng.normal(size=n), labels)

    def surface(self, seed: int = 0, n_vertices: int = 162, n_parcels: int = 4, **kwargs) -> SurfaceMesh:
        """Small synthetic subject (icosphere with 2 subdivisions by default)"""
        options = dict(deform_amplitude=0.2, anisotropy=0.25)
        options.update(kwargs)
        return generate_synthetic_surface(seed=seed, n_vertices=n_vertices, n_parcels=n_parcels, **options)

    def random_embedding(self, n: int = 300, d: int = 3, values=(0.01, 0.02, 0.04)) -> SpectralEmbedding:
        """Orthonormal columns with distinct eigenvalues; enough asymmetry for ICP to lock on"""
        raw = self.rng.normal(size=(n, d)) + np.linspace(0.0, 1.0, n)[:, None] ** np.arange(1, d + 1)
        vectors, _ = np.linalg.qr(raw)
        values = np.asarray(values[:d], dtype=float)
        return SpectralEmbedding(values, vectors, vectors * np.sqrt(values))

    def random_orthogonal(self, d: int = 3, reflect: bool = False) -> np.ndarray:
        q, r = np.linalg.qr(self.rng.normal(size=(d, d)))
        q = q * np.sign(np.diag(r))
        if reflect:
            q[:, 0] = -q[:, 0]
        return q

    def small_network(self, n_parcels: int = 4, seed: int = 0, **kwargs) -> NetworkConfig:
        options = dict(hidden_maps=(6, 8), n_parcels=n_parcels, kernels=3, seed=seed)
        options.update(kwargs)
        return NetworkConfig(**options)

    def write_cohort(self, data_dir: Path, n_subjects: int = 6, n_vertices: int = 162,
                     n_parcels: int = 4) -> Dict[str, SurfaceMesh]:
        """Write a tiny synthetic cohort in the internal format"""
        cohort = {}
        for k in range(n_subjects):
            mesh = self.surface(seed=k, n_vertices=n_vertices, n_parcels=n_parcels, random_pose=True)
            save_subject(Path(data_dir) / subject_id(k), mesh)
            cohort[subject_id(k)] = mesh
        return cohort

    def tiny_config(self, tmp_path: Path, overrides: Optional[Dict] = None) -> PipelineConfig:
        """Pipeline config sized for unit tests: 6 subjects, 162 vertices, 4 parcels, a few epochs"""
        tree = {
            "synth": {"n_subjects": 6, "n_vertices": 162, "n_parcels": 4},
            "network": {"hidden_maps": (6, 8), "n_parcels": 4, "kernels": 3},
            "training": {"learning_rate": 0.2, "max_epochs": 4, "patience": 2},
            "mrf": {"sweep": (0.1, 0.5)},
            "runtime": {"data_dir": str(tmp_path / "data"), "out_dir": str(tmp_path / "out"), "workers": 1},
        }
        for section, values in (overrides or {}).items():
            tree.setdefault(section, {}).update(values)
        return load_config(None, tree)
