#!/usr/bin/env python3
"""
csg System Diagnostics
Runs the acceptance diagnostics by category, prints a summary and saves the results as JSON.
"""

import argparse
import itertools
import json
import sys
import tempfile
import time
from pathlib import Path
from typing import Callable, Dict, List

import numpy as np
from rich.console import Console
from rich.table import Table
from scipy.spatial import ConvexHull

from csg.config import load_config
from csg.gconv_net import (
    LayerParams,
    NetworkConfig,
    finite_difference_check,
    forward,
    grid_conv_1d,
    init_params,
    layer_forward,
    make_geometry,
    path_geometry,
)
from csg.logs import configure_logging
from csg.mrf_regularizer import MrfProblem, alpha_expansion, mrf_energy
from csg.pipeline import StageRunner, run_pipeline
from csg.spectral_alignment import icp_align
from csg.spectral_embedding import (
    EmbeddingConfig,
    SpectralEmbedding,
    build_laplacian,
    dense_eig_oracle,
    embed_mesh,
    smallest_eigenpairs,
)
from csg.surface_graph import (
    AdjacencyMode,
    BrainGraph,
    SurfaceMesh,
    build_graph,
    generate_synthetic_surface,
    random_rotation,
)
from csg.trainer import prepare_subject

console = Console()


# ---------------------------------------------------------------------------
# fixtures
# ---------------------------------------------------------------------------

def sphere_mesh(n: int, rng: np.random.Generator) -> SurfaceMesh:
    """Random points on the unit sphere triangulated by their convex hull (always connected)."""
    points = rng.normal(size=(n, 3))
    points /= np.linalg.norm(points, axis=1, keepdims=True)
    faces = ConvexHull(points).simplices
    labels = rng.integers(0, 4, size=n)
    return SurfaceMesh(points, faces, rng.normal(size=n), labels)


def brute_force_minimum(problem: MrfProblem) -> float:
    labelings = np.array(list(itertools.product(range(problem.n_labels), repeat=problem.n_nodes)))
    unary = problem.unary[np.arange(problem.n_nodes), labelings].sum(axis=1)
    i, j = problem.edges[:, 0], problem.edges[:, 1]
    pairwise = (labelings[:, i] != labelings[:, j]).sum(axis=1)
    return float((unary + problem.lam * pairwise).min())


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------

def diagnose_gradients() -> Dict:
    rng = np.random.default_rng(0)
    mesh = sphere_mesh(30, rng)
    graph = build_graph(mesh, AdjacencyMode.MESH_EDGES)
    features = np.column_stack([mesh.vertices, mesh.sulcal_depth])
    geometry = make_geometry(graph, mesh.vertices)
    config = NetworkConfig(hidden_maps=(6, 8), n_parcels=4, kernels=3, seed=3)
    params = init_params(config)
    check = finite_difference_check(params, features, geometry, mesh.labels)
    return {
        "passed": check.max_relative_error <= 1e-4 and check.checked > 0,
        "max_relative_error": check.max_relative_error,
        "worst_parameter": check.worst_parameter,
        "checked": check.checked,
        "skipped_kinks": check.skipped_kinks,
    }


def diagnose_eigensolver() -> Dict:
    rng = np.random.default_rng(1)
    worst_gap, out_of_range = 0.0, 0
    for _ in range(50):
        mesh = sphere_mesh(int(rng.integers(50, 501)), rng)
        lap = build_laplacian(build_graph(mesh))
        pairs = smallest_eigenpairs(lap, 5)
        dense, _ = dense_eig_oracle(lap)
        worst_gap = max(worst_gap, float(np.abs(pairs.eigenvalues - dense[:6]).max()))
        out_of_range += int(((dense < -1e-8) | (dense > 2 + 1e-8)).sum())
    path = BrainGraph(np.zeros((3, 4)), [[0, 1], [1, 2]], [1.0, 1.0], AdjacencyMode.MESH_EDGES)
    path_values, _ = dense_eig_oracle(build_laplacian(path))
    path_error = float(np.abs(path_values - [0.0, 1.0, 2.0]).max())
    return {
        "passed": worst_gap <= 1e-6 and out_of_range == 0 and path_error <= 1e-8,
        "worst_eigenvalue_gap": worst_gap,
        "out_of_range": out_of_range,
        "path3_error": path_error,
    }


def diagnose_alignment() -> Dict:
    rng = np.random.default_rng(2)
    mesh = generate_synthetic_surface(seed=11, n_vertices=642, n_parcels=8, deform_amplitude=0.25, anisotropy=0.25)
    embedding = embed_mesh(mesh)
    recovered, worst_distance, worst_transform = 0, 0.0, 0.0
    for _ in range(20):
        q = random_rotation(rng)
        if rng.random() < 0.5:
            q = q @ np.diag([1.0, 1.0, -1.0])
        perm = rng.permutation(embedding.n)
        moved = SpectralEmbedding(embedding.eigenvalues, (embedding.eigenvectors @ q)[perm],
                                  (embedding.coordinates @ q)[perm])
        result, _ = icp_align(moved, embedding)
        transform_error = float(np.linalg.norm(result.rotation @ q - np.eye(3)))
        worst_distance = max(worst_distance, result.mean_distance)
        worst_transform = max(worst_transform, transform_error)
        recovered += int(result.mean_distance <= 1e-6 and transform_error <= 1e-6)
    return {
        "passed": recovered == 20,
        "recovered": recovered,
        "worst_mean_distance": worst_distance,
        "worst_transform_error": worst_transform,
    }


def diagnose_grid() -> Dict:
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(10):
        n, q, p = 25, 3, 2
        y = rng.normal(size=(n, q))
        w = rng.normal(size=(p, q, 3))
        b = rng.normal(size=p)
        expected = grid_conv_1d(y, w, b, 1)
        layer = LayerParams(w, b, np.array([[-1.0], [0.0], [1.0]]), np.full(3, np.log(50.0)))
        got = layer_forward(y, layer, path_geometry(np.arange(n, dtype=float)))
        worst = max(worst, float(np.abs(got - expected).max()))
    return {"passed": worst <= 1e-6, "max_abs_error": worst}


def diagnose_mrf() -> Dict:
    rng = np.random.default_rng(5)
    monotone_failures, argmax_failures = 0, 0
    for _ in range(100):
        n, c = int(rng.integers(5, 40)), int(rng.integers(2, 6))
        probabilities = rng.dirichlet(np.ones(c), size=n)
        edges = np.array([(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < 0.15]).reshape(-1, 2)
        trace: List[float] = []
        alpha_expansion(MrfProblem.from_probabilities(probabilities, edges, float(rng.uniform(0.1, 2.0))), trace=trace)
        monotone_failures += int(any(b > a for a, b in zip(trace, trace[1:])))
        free = alpha_expansion(MrfProblem.from_probabilities(probabilities, edges, 0.0))
        argmax_failures += int(not np.array_equal(free, probabilities.argmax(axis=1)))

    exact, above_init = 0, 0
    for _ in range(20):
        n = int(rng.integers(4, 11))
        probabilities = rng.dirichlet(np.ones(3), size=n)
        edges = np.array([(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < 0.3]).reshape(-1, 2)
        problem = MrfProblem.from_probabilities(probabilities, edges, float(rng.uniform(0.2, 1.5)))
        init = probabilities.argmax(axis=1)
        labels = alpha_expansion(problem, init=init)
        energy = mrf_energy(labels, problem)
        exact += int(abs(energy - brute_force_minimum(problem)) <= 1e-9)
        above_init += int(energy > mrf_energy(init, problem) + 1e-12)
    return {
        "passed": monotone_failures == 0 and argmax_failures == 0 and exact >= 18 and above_init == 0,
        "monotone_failures": monotone_failures,
        "argmax_failures": argmax_failures,
        "brute_force_matches": exact,
        "above_initial_energy": above_init,
    }


def _pipeline_summary(out_dir: Path, overrides: Dict) -> Dict:
    base = {"runtime": {"out_dir": str(out_dir), "data_dir": str(out_dir / "data")}}
    for section, values in overrides.items():
        base.setdefault(section, {}).update(values)
    config = load_config("csg.yaml" if Path("csg.yaml").exists() else None, base)
    paths = run_pipeline(StageRunner(config))
    return json.loads(paths["summary"].read_text(encoding="utf-8"))


def diagnose_ablation() -> Dict:
    with tempfile.TemporaryDirectory(prefix="csg-ablation-") as tmp:
        summary = _pipeline_summary(Path(tmp), {})
    dice = {mode: row["dice_mean"] for mode, row in summary.items()}
    hausdorff = {mode: row["hausdorff_mean"] for mode, row in summary.items()}
    spectral_vs_euclidean = dice["spectral"] - dice["euclidean"]
    spectral_vs_pointwise = dice["spectral"] - dice["pointwise"]
    mrf_dice_change = dice.get("spectral+mrf", dice["spectral"]) - dice["spectral"]
    mrf_hausdorff_change = hausdorff.get("spectral+mrf", hausdorff["spectral"]) - hausdorff["spectral"]
    return {
        "passed": (spectral_vs_euclidean >= 0.10 and spectral_vs_pointwise >= 0.03
                   and mrf_dice_change >= -0.005 and mrf_hausdorff_change < 0),
        "dice": dice,
        "hausdorff": hausdorff,
        "spectral_minus_euclidean": spectral_vs_euclidean,
        "spectral_minus_pointwise": spectral_vs_pointwise,
    }


def diagnose_throughput() -> Dict:
    meshes = [
        generate_synthetic_surface(seed=s, n_vertices=100000, n_parcels=32, deform_amplitude=0.25,
                                   anisotropy=0.25, random_pose=True, radius_mm=70.0)
        for s in (21, 22)
    ]
    started = time.perf_counter()
    reference = embed_mesh(meshes[0], EmbeddingConfig())
    subject = embed_mesh(meshes[1], EmbeddingConfig())
    embed_seconds = (time.perf_counter() - started) / 2
    started = time.perf_counter()
    _, aligned = icp_align(subject, reference)
    align_seconds = time.perf_counter() - started

    data = prepare_subject("throughput", meshes[1], aligned, "spectral")
    params = init_params(NetworkConfig())
    started = time.perf_counter()
    forward(params, data.features, data.geometry)
    forward_seconds = time.perf_counter() - started
    return {
        "passed": embed_seconds + align_seconds < 120 and forward_seconds < 15,
        "n_vertices": meshes[1].n_vertices,
        "embed_plus_align_seconds": embed_seconds + align_seconds,
        "forward_seconds": forward_seconds,
    }


def diagnose_determinism() -> Dict:
    small = {
        "synth": {"n_subjects": 10, "n_vertices": 642, "n_parcels": 8},
        "network": {"n_parcels": 8},
        "training": {"max_epochs": 15},
        "runtime": {"workers": 2},
    }
    digests = []
    with tempfile.TemporaryDirectory(prefix="csg-determinism-") as tmp:
        for run in ("first", "second"):
            out_dir = Path(tmp) / run
            _pipeline_summary(out_dir, small)
            digests.append((out_dir / "report" / "summary.json").read_bytes())
    return {"passed": digests[0] == digests[1], "summary_bytes": len(digests[0])}


DIAGNOSTIC_CATEGORIES: Dict[str, Dict] = {
    "gradients": {"run": diagnose_gradients, "budget_seconds": 60,
                  "expected": "max relative error <= 1e-4 on a 30-node graph"},
    "eigensolver": {"run": diagnose_eigensolver, "budget_seconds": 120,
                    "expected": "iterative vs dense within 1e-6 on 50 graphs; path spectrum {0, 1, 2}"},
    "alignment": {"run": diagnose_alignment, "budget_seconds": 120,
                  "expected": "20/20 orthogonal + permutation trials recovered"},
    "grid": {"run": diagnose_grid, "budget_seconds": 10,
             "expected": "graph convolution equals 1-D grid convolution within 1e-6"},
    "mrf": {"run": diagnose_mrf, "budget_seconds": 180,
            "expected": "monotone moves, exact at lambda 0, >= 18/20 brute-force matches"},
    "ablation": {"run": diagnose_ablation, "budget_seconds": 7200,
                 "expected": "spectral beats euclidean by 10 pts and pointwise by 3 pts"},
    "throughput": {"run": diagnose_throughput, "budget_seconds": 600,
                   "expected": "embed + align < 120 s, forward < 15 s at 100K vertices"},
    "determinism": {"run": diagnose_determinism, "budget_seconds": 1200,
                    "expected": "summary.json byte-identical across reruns"},
}


class DiagnosticRunner:
    def __init__(self):
        self.results: List[Dict] = []

    def print_header(self):
        console.rule("csg System Diagnostics")
        console.print(f"Working directory: {Path.cwd()}")
        console.print(f"Started at: {time.strftime('%Y-%m-%d %H:%M:%S')}\n")

    def run_category(self, category: str) -> Dict:
        info = DIAGNOSTIC_CATEGORIES[category]
        run: Callable[[], Dict] = info["run"]
        console.print(f"[bold]{category}[/bold]: {info['expected']}")
        started = time.perf_counter()
        result = {"category": category, "expected": info["expected"], "passed": False}
        try:
            result.update(run())
        except Exception as e:
            result["error"] = f"{type(e).__name__}: {e}"
        result["duration"] = time.perf_counter() - started
        result["within_budget"] = result["duration"] <= info["budget_seconds"]
        status = "[green]PASS[/green]" if result["passed"] else "[red]FAIL[/red]"
        console.print(f"   {status} ({result['duration']:.2f}s)")
        if "error" in result:
            console.print(f"   [yellow]{result['error']}[/yellow]")
        self.results.append(result)
        return result

    def print_summary(self):
        table = Table(title="Diagnostics summary")
        for column in ("category", "result", "seconds", "within budget"):
            table.add_column(column)
        for r in self.results:
            table.add_row(r["category"], "PASS" if r["passed"] else "FAIL",
                          f"{r['duration']:.1f}", "yes" if r["within_budget"] else "no")
        console.print(table)
        passed = sum(r["passed"] for r in self.results)
        console.print(f"Passed {passed}/{len(self.results)}")

    def save_results(self, filename: str):
        payload = {
            "timestamp": time.strftime("%Y-%m-%d %H:%M:%S"),
            "passed": sum(r["passed"] for r in self.results),
            "total": len(self.results),
            "results": self.results,
        }
        Path(filename).write_text(json.dumps(payload, indent=2, default=float) + "\n", encoding="utf-8")
        console.print(f"Results saved to: {filename}")


def main():
    parser = argparse.ArgumentParser(
        description="Run csg acceptance diagnostics",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  python system_diagnostics.py all            # every category (the ablation takes a while)
  python system_diagnostics.py gradients mrf  # selected categories
  python system_diagnostics.py --list         # list categories
        """,
    )
    parser.add_argument("targets", nargs="*", metavar="target",
                        help=f"Categories to run or 'all': {', '.join(DIAGNOSTIC_CATEGORIES)}")
    parser.add_argument("--list", action="store_true", help="List available categories and exit")
    parser.add_argument("--save-results", metavar="FILENAME", default="diagnostic_results.json",
                        help="Save results to JSON file (default: diagnostic_results.json)")
    args = parser.parse_args()

    if args.list:
        for category, info in DIAGNOSTIC_CATEGORIES.items():
            console.print(f"  {category:<12} - {info['expected']}")
        return 0
    if not args.targets:
        parser.print_help()
        return 0

    configure_logging("WARNING")
    targets = list(DIAGNOSTIC_CATEGORIES) if "all" in args.targets else args.targets
    runner = DiagnosticRunner()
    runner.print_header()
    try:
        for category in targets:
            runner.run_category(category)
    except KeyboardInterrupt:
        console.print(f"\nInterrupted after {len(runner.results)} diagnostic(s)")
    runner.print_summary()
    if args.save_results:
        runner.save_results(args.save_results)
    return 0 if runner.results and all(r["passed"] for r in runner.results) else 1


if __name__ == "__main__":
    sys.exit(main())
