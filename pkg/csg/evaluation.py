"""
Parcellation metrics and experiment reports.

Dice and Hausdorff are computed per parcel and aggregated without weighting.
Hausdorff distances are Euclidean, in the mesh's units (mm), between parcel
boundary vertices by default.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Mapping, Optional

import numpy as np
import pandas as pd
from scipy.spatial import ConvexHull, QhullError, cKDTree

from .errors import ConfigError, DataValidationError
from .surface_graph import UNLABELED, SurfaceMesh

logger = logging.getLogger(__name__)

HAUSDORFF_VARIANTS = ("boundary", "full", "p95")
FLOAT_FORMAT = "%.12g"


@dataclass
class EvaluationConfig:
    hausdorff: str = "boundary"


def _labels(values) -> np.ndarray:
    return np.asarray(values, dtype=np.int64)


def dice_per_parcel(pred, ref, c: int) -> float:
    """2|P & R| / (|P| + |R|) over labeled reference nodes; both empty -> 1."""
    pred, ref = _labels(pred), _labels(ref)
    if pred.shape != ref.shape:
        raise DataValidationError(f"Label vectors differ in length: {pred.shape} vs {ref.shape}")
    labeled = ref != UNLABELED
    in_pred = (pred == c) & labeled
    in_ref = ref == c
    total = int(in_pred.sum() + in_ref.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(in_pred & in_ref)) / total


def dice_scores(pred, ref, n_parcels: int) -> np.ndarray:
    return np.array([dice_per_parcel(pred, ref, c) for c in range(n_parcels)])


def mean_dice(pred, ref, n_parcels: int) -> float:
    return float(dice_scores(pred, ref, n_parcels).mean())


def node_accuracy(pred, ref) -> float:
    """Fraction of labeled reference nodes where pred == ref."""
    pred, ref = _labels(pred), _labels(ref)
    labeled = ref != UNLABELED
    if not labeled.any():
        raise DataValidationError("node_accuracy needs at least one labeled node")
    return float(np.mean(pred[labeled] == ref[labeled]))


def boundary_mask(labels, edges: np.ndarray, c: int) -> np.ndarray:
    """Vertices labeled ``c`` with at least one neighbor of a different label."""
    labels = _labels(labels)
    i, j = edges[:, 0], edges[:, 1]
    differs = labels[i] != labels[j]
    touching = np.zeros(len(labels), dtype=bool)
    touching[i[differs]] = True
    touching[j[differs]] = True
    return touching & (labels == c)


def mesh_diameter(vertices: np.ndarray, chunk: int = 1024) -> float:
    """Largest Euclidean distance between two vertices, searched over convex hull vertices."""
    vertices = np.asarray(vertices, dtype=np.float64)
    if len(vertices) < 2:
        return 0.0
    try:
        candidates = vertices[ConvexHull(vertices).vertices]
    except (QhullError, ValueError):
        candidates = vertices
    best = 0.0
    for start in range(0, len(candidates), chunk):
        block = candidates[start:start + chunk]
        sq = ((block[:, None, :] - candidates[None, :, :]) ** 2).sum(axis=2)
        best = max(best, float(sq.max()))
    return float(np.sqrt(best))


def _directed(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distance from every point of ``a`` to its nearest point of ``b``."""
    distances, _ = cKDTree(b).query(a, k=1)
    return np.asarray(distances)


def hausdorff_brute_force(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric Hausdorff distance by a full O(|a| |b|) scan."""
    sq = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
    return float(np.sqrt(max(sq.min(axis=1).max(), sq.min(axis=0).max())))


def _parcel_points(labels: np.ndarray, vertices: np.ndarray, edges: np.ndarray, c: int, variant: str) -> np.ndarray:
    members = labels == c
    if variant != "full":
        border = boundary_mask(labels, edges, c)
        if border.any():
            members = border
    return vertices[members]


def hausdorff_per_parcel(pred, ref, c: int, mesh: SurfaceMesh, variant: str = "boundary",
                         diameter: Optional[float] = None, edges: Optional[np.ndarray] = None) -> float:
    """
    Symmetric Hausdorff distance between predicted and reference parcel ``c``.

    ``boundary`` uses parcel boundary vertices, ``full`` every parcel vertex and
    ``p95`` the 95th percentile of boundary distances. A parcel present on one side
    only scores the mesh diameter; absent on both sides scores 0.
    """
    if variant not in HAUSDORFF_VARIANTS:
        raise ConfigError(f"Unknown Hausdorff variant '{variant}'; expected one of {list(HAUSDORFF_VARIANTS)}")
    pred, ref = _labels(pred), _labels(ref)
    has_pred, has_ref = bool((pred == c).any()), bool((ref == c).any())
    if not has_pred and not has_ref:
        return 0.0
    if not has_pred or not has_ref:
        return float(diameter if diameter is not None else mesh_diameter(mesh.vertices))

    edges = edges if edges is not None else mesh.edges()
    a = _parcel_points(pred, mesh.vertices, edges, c, variant)
    b = _parcel_points(ref, mesh.vertices, edges, c, variant)
    forward, backward = _directed(a, b), _directed(b, a)
    if variant == "p95":
        return float(max(np.percentile(forward, 95), np.percentile(backward, 95)))
    return float(max(forward.max(), backward.max()))


@dataclass
class ParcelMetrics:
    dice: np.ndarray
    hausdorff: np.ndarray
    support_pred: np.ndarray
    support_ref: np.ndarray
    accuracy: float

    @property
    def n_parcels(self) -> int:
        return int(len(self.dice))

    @property
    def mean_dice(self) -> float:
        return float(self.dice.mean())

    @property
    def std_dice(self) -> float:
        return float(self.dice.std())

    @property
    def mean_hausdorff(self) -> float:
        return float(self.hausdorff.mean())

    def to_dict(self) -> Dict:
        return {
            "dice_mean": self.mean_dice,
            "dice_std": self.std_dice,
            "dice_min": float(self.dice.min()),
            "dice_max": float(self.dice.max()),
            "hausdorff_mean": self.mean_hausdorff,
            "accuracy": float(self.accuracy),
        }


def evaluate_subject(pred, ref, mesh: SurfaceMesh, n_parcels: int,
                     config: Optional[EvaluationConfig] = None) -> ParcelMetrics:
    """Per-parcel Dice and Hausdorff plus node accuracy; ``ref`` must be a label vector."""
    if ref is None:
        raise DataValidationError(
            f"Cannot evaluate a {mesh.n_vertices}-vertex subject without reference labels"
        )
    config = config or EvaluationConfig()
    pred, ref = _labels(pred), _labels(ref)
    edges = mesh.edges()
    diameter = mesh_diameter(mesh.vertices)
    hausdorff = np.array([
        hausdorff_per_parcel(pred, ref, c, mesh, config.hausdorff, diameter=diameter, edges=edges)
        for c in range(n_parcels)
    ])
    missing = [c for c in range(n_parcels) if not (pred == c).any() and (ref == c).any()]
    if missing:
        logger.warning("predicted labeling is missing parcel(s) %s", missing)
    return ParcelMetrics(
        dice=dice_scores(pred, ref, n_parcels),
        hausdorff=hausdorff,
        support_pred=np.bincount(pred[pred >= 0], minlength=n_parcels)[:n_parcels],
        support_ref=np.bincount(ref[ref >= 0], minlength=n_parcels)[:n_parcels],
        accuracy=node_accuracy(pred, ref),
    )


def per_parcel_frame(runs: Mapping[str, Mapping[str, ParcelMetrics]]) -> pd.DataFrame:
    rows = []
    for mode, subjects in runs.items():
        for subject in sorted(subjects):
            metrics = subjects[subject]
            for c in range(metrics.n_parcels):
                rows.append({
                    "mode": mode,
                    "subject": subject,
                    "parcel": c,
                    "dice": float(metrics.dice[c]),
                    "hausdorff_mm": float(metrics.hausdorff[c]),
                })
    return pd.DataFrame(rows, columns=["mode", "subject", "parcel", "dice", "hausdorff_mm"])


def summarize(runs: Mapping[str, Mapping[str, ParcelMetrics]]) -> Dict[str, Dict]:
    """Per-mode aggregates over every (subject, parcel) pair; std is the population std."""
    summary = {}
    for mode, subjects in runs.items():
        if not subjects:
            continue
        dice = np.concatenate([subjects[s].dice for s in sorted(subjects)])
        hausdorff = np.concatenate([subjects[s].hausdorff for s in sorted(subjects)])
        summary[mode] = {
            "dice_mean": float(dice.mean()),
            "dice_std": float(dice.std()),
            "dice_min": float(dice.min()),
            "dice_max": float(dice.max()),
            "hausdorff_mean": float(hausdorff.mean()),
            "hausdorff_std": float(hausdorff.std()),
            "accuracy_mean": float(np.mean([subjects[s].accuracy for s in sorted(subjects)])),
            "n_subjects": len(subjects),
            "n_parcels": int(subjects[sorted(subjects)[0]].n_parcels),
        }
    return summary


def emit_report(runs: Mapping[str, Mapping[str, ParcelMetrics]], out_dir,
                timings: Optional[Mapping[str, float]] = None) -> Dict[str, Path]:
    """
    Write ``metrics_per_parcel.csv``, ``dice_by_parcel.csv``, ``summary.json`` and,
    when given, ``timings.json``. Identical inputs give identical bytes except for timings.
    """
    if not runs or not any(runs.values()):
        raise DataValidationError("emit_report needs at least one evaluated run")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths: Dict[str, Path] = {}

    frame = per_parcel_frame(runs)
    paths["metrics_per_parcel"] = out_dir / "metrics_per_parcel.csv"
    frame.to_csv(paths["metrics_per_parcel"], index=False, float_format=FLOAT_FORMAT)

    table = frame.pivot_table(index="parcel", columns="mode", values="dice", aggfunc="mean")
    table = table[[m for m in runs if m in table.columns]]
    paths["dice_by_parcel"] = out_dir / "dice_by_parcel.csv"
    table.to_csv(paths["dice_by_parcel"], float_format=FLOAT_FORMAT)

    paths["summary"] = out_dir / "summary.json"
    paths["summary"].write_text(json.dumps(summarize(runs), sort_keys=True, indent=2) + "\n", encoding="utf-8")

    if timings is not None:
        paths["timings"] = out_dir / "timings.json"
        paths["timings"].write_text(json.dumps(dict(timings), sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return paths
