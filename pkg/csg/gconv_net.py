"""
Geometric graph CNN with Gaussian kernels in the embedding space.

Layer l computes

    z_ip = sum_{j in N(i)} sum_q sum_k w_pqk * y_jq * phi_k(u_j - u_i) + b_p
    phi_k(delta) = exp(-sigma_k * ||delta - mu_k||^2)

followed by leaky ReLU; the network ends in a row-wise softmax and is trained on
cross-entropy. Forward and backward are plain numpy with an explicit cache, so
gradients are exact and checkable against finite differences.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np
from scipy import sparse

from .errors import ArtifactError, ConfigError, DataValidationError
from .surface_graph import UNLABELED, BrainGraph

logger = logging.getLogger(__name__)

LOG_CLAMP = 1e-12
CHECKPOINT_MAGIC = b"CSGCKPT1\n"
CHECKPOINT_VERSION = 1


@dataclass
class NetworkConfig:
    """
    Layer sizes are (input_maps, *hidden_maps, n_parcels): with the defaults
    4 -> 32 -> 64 -> 32, three graph convolution layers with K kernels each.
    """

    input_maps: int = 4
    hidden_maps: Tuple[int, ...] = (32, 64)
    n_parcels: int = 32
    kernels: int = 4
    coord_dim: int = 3
    leaky_slope: float = 0.01
    leaky_output: bool = True
    expected_neighbors: float = 7.0
    seed: int = 0

    def layer_sizes(self) -> Tuple[int, ...]:
        return (self.input_maps, *self.hidden_maps, self.n_parcels)

    def validate(self) -> None:
        if any(int(m) < 1 for m in self.layer_sizes()) or self.kernels < 1 or self.coord_dim < 1:
            raise ConfigError(f"All network sizes must be >= 1, got {self.layer_sizes()}, K={self.kernels}")
        if self.leaky_slope < 0:
            raise ConfigError(f"leaky_slope must be >= 0, got {self.leaky_slope}")

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["hidden_maps"] = list(self.hidden_maps)
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> "NetworkConfig":
        data = dict(data)
        data["hidden_maps"] = tuple(int(m) for m in data.get("hidden_maps", ()))
        return cls(**data)


@dataclass
class LayerParams:
    weights: np.ndarray     # (P, Q, K)
    bias: np.ndarray        # (P,)
    mu: np.ndarray          # (K, d)
    log_sigma: np.ndarray   # (K,)

    def arrays(self) -> List[Tuple[str, np.ndarray]]:
        return [("w", self.weights), ("b", self.bias), ("mu", self.mu), ("log_sigma", self.log_sigma)]

    def copy(self) -> "LayerParams":
        return LayerParams(self.weights.copy(), self.bias.copy(), self.mu.copy(), self.log_sigma.copy())


@dataclass
class NetworkParams:
    config: NetworkConfig
    layers: List[LayerParams]

    def arrays(self) -> Iterator[Tuple[str, np.ndarray]]:
        """Every parameter array in declared order: per layer w, b, mu, log_sigma."""
        for index, layer in enumerate(self.layers):
            for name, array in layer.arrays():
                yield f"layer{index}.{name}", array

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.config, [layer.copy() for layer in self.layers])

    def zeros_like(self) -> "NetworkParams":
        return NetworkParams(self.config, [
            LayerParams(*(np.zeros_like(a) for _, a in layer.arrays())) for layer in self.layers
        ])

    def add_scaled(self, other: "NetworkParams", scale: float) -> None:
        for (_, mine), (_, theirs) in zip(self.arrays(), other.arrays()):
            mine += scale * theirs

    def n_parameters(self) -> int:
        return sum(a.size for _, a in self.arrays())


def init_params(config: NetworkConfig) -> NetworkParams:
    """
    w ~ U(+-sqrt(6 / (fan_in + fan_out))) with fan_in = Q * K * expected_neighbors,
    b = 0, mu ~ N(0, 0.01 I), log sigma = 0.
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    sizes = config.layer_sizes()
    layers = []
    for q, p in zip(sizes[:-1], sizes[1:]):
        k = config.kernels
        fan_in = q * k * max(config.expected_neighbors, 1.0)
        limit = math.sqrt(6.0 / (fan_in + p))
        weights = rng.uniform(-limit, limit, size=(p, q, k))
        mu = rng.normal(0.0, 0.1, size=(k, config.coord_dim))
        layers.append(LayerParams(weights, np.zeros(p), mu, np.zeros(k)))
    return NetworkParams(config, layers)


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConvGeometry:
    """Directed neighbor pairs (CSR order) and their embedding offsets u_j - u_i."""

    n: int
    rows: np.ndarray
    cols: np.ndarray
    indptr: np.ndarray
    offsets: np.ndarray

    @property
    def n_pairs(self) -> int:
        return int(len(self.rows))

    def kernel_matrix(self, values: np.ndarray) -> sparse.csr_matrix:
        return sparse.csr_matrix((values, self.cols, self.indptr), shape=(self.n, self.n))


def make_geometry(graph: BrainGraph, coords: np.ndarray) -> ConvGeometry:
    """Neighborhoods N(i) (self included) of ``graph`` with offsets taken from ``coords``."""
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[0] != graph.n_nodes:
        raise DataValidationError(
            f"Kernel coordinates must be ({graph.n_nodes}, d), got {coords.shape}"
        )
    rows, cols = graph.neighborhoods()
    return _geometry(graph.n_nodes, rows, cols, coords)


def _geometry(n: int, rows: np.ndarray, cols: np.ndarray, coords: np.ndarray) -> ConvGeometry:
    indptr = np.searchsorted(rows, np.arange(n + 1)).astype(np.int64)
    offsets = coords[cols] - coords[rows]
    return ConvGeometry(n, rows, cols, indptr, offsets)


def path_geometry(positions: np.ndarray) -> ConvGeometry:
    """1-D path graph i -- i+1 with self-loops, embedded at ``positions``."""
    n = len(positions)
    i = np.arange(n)
    rows = np.concatenate([i, i[:-1], i[1:]])
    cols = np.concatenate([i, i[1:], i[:-1]])
    order = np.lexsort((cols, rows))
    coords = np.asarray(positions, dtype=np.float64).reshape(n, -1)
    return _geometry(n, rows[order], cols[order], coords)


# ---------------------------------------------------------------------------
# elementary operations
# ---------------------------------------------------------------------------

def gaussian_kernel(u_i, u_j, mu, sigma: float) -> float:
    """exp(-sigma * ||(u_j - u_i) - mu||^2)."""
    delta = np.asarray(u_j, dtype=np.float64) - np.asarray(u_i, dtype=np.float64) - np.asarray(mu, dtype=np.float64)
    return float(np.exp(-sigma * np.dot(delta, delta)))


def leaky_relu(z, slope: float = 0.01) -> Tuple[np.ndarray, np.ndarray]:
    """Value and derivative; the derivative at exactly 0 is 1."""
    z = np.asarray(z, dtype=np.float64)
    positive = z >= 0
    return np.where(positive, z, slope * z), np.where(positive, 1.0, slope)


def softmax_rows(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(p: np.ndarray, labels: np.ndarray) -> float:
    """-sum_i log p_i,label_i over labeled nodes (label -1 excluded), log argument clamped."""
    labels = np.asarray(labels, dtype=np.int64)
    labeled = np.flatnonzero(labels != UNLABELED)
    if len(labeled) == 0:
        raise DataValidationError("cross_entropy needs at least one labeled node")
    if labels[labeled].max() >= p.shape[1] or labels[labeled].min() < 0:
        raise DataValidationError(f"Labels must be in [0, {p.shape[1]}) or -1")
    picked = p[labeled, labels[labeled]]
    return float(-np.log(np.maximum(picked, LOG_CLAMP)).sum())


def grid_conv_1d(y: np.ndarray, w: np.ndarray, b: np.ndarray, K: int) -> np.ndarray:
    """
    z_ip = sum_q sum_{k=-K..K} w[p, q, k+K] * y[i+k, q] + b_p on a 1-D grid, zero padded.
    """
    y = np.asarray(y, dtype=np.float64)
    n, q = y.shape
    if w.shape[1] != q or w.shape[2] != 2 * K + 1:
        raise DataValidationError(f"Kernel shape {w.shape} does not match Q={q}, K={K}")
    padded = np.vstack([np.zeros((K, q)), y, np.zeros((K, q))])
    z = np.tile(np.asarray(b, dtype=np.float64), (n, 1))
    for tap in range(2 * K + 1):
        z += padded[tap:tap + n] @ w[:, :, tap].T
    return z


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

@dataclass
class LayerCache:
    y_in: np.ndarray
    phi: np.ndarray       # (E, K)
    sq: np.ndarray        # (E, K)
    diff: np.ndarray      # (E, K, d)
    gathered: np.ndarray  # (N, Q, K)
    z: np.ndarray         # (N, P)
    slope: np.ndarray     # leaky derivative at z, or None without activation


@dataclass
class ForwardCache:
    layers: List[LayerCache] = field(default_factory=list)
    logits: Optional[np.ndarray] = None
    probabilities: Optional[np.ndarray] = None

    def preactivation_signs(self) -> List[np.ndarray]:
        return [layer.z >= 0 for layer in self.layers]


def _kernels(params: LayerParams, geometry: ConvGeometry):
    if params.mu.shape[1] != geometry.offsets.shape[1]:
        raise DataValidationError(
            f"Kernel means have dimension {params.mu.shape[1]} but offsets have {geometry.offsets.shape[1]}"
        )
    diff = geometry.offsets[:, None, :] - params.mu[None, :, :]
    sq = np.einsum("ekd,ekd->ek", diff, diff)
    phi = np.exp(-np.exp(params.log_sigma)[None, :] * sq)
    return phi, sq, diff


def layer_forward(y: np.ndarray, params: LayerParams, geometry: ConvGeometry,
                  return_cache: bool = False):
    """Pre-activations Z of one graph convolution layer."""
    y = np.asarray(y, dtype=np.float64)
    p, q, k = params.weights.shape
    if y.shape != (geometry.n, q):
        raise DataValidationError(f"Layer expects input ({geometry.n}, {q}), got {y.shape}")
    phi, sq, diff = _kernels(params, geometry)
    gathered = np.empty((geometry.n, q, k))
    for kk in range(k):
        gathered[:, :, kk] = geometry.kernel_matrix(phi[:, kk]) @ y
    z = gathered.reshape(geometry.n, q * k) @ params.weights.reshape(p, q * k).T + params.bias
    if return_cache:
        return z, LayerCache(y, phi, sq, diff, gathered, z, None)
    return z


def forward(params: NetworkParams, features: np.ndarray, geometry: ConvGeometry) -> Tuple[np.ndarray, ForwardCache]:
    """Parcel probabilities (N x C) and the cache needed by ``backward``."""
    config = params.config
    cache = ForwardCache()
    y = np.asarray(features, dtype=np.float64)
    last = len(params.layers) - 1
    for index, layer in enumerate(params.layers):
        z, layer_cache = layer_forward(y, layer, geometry, return_cache=True)
        if index < last or config.leaky_output:
            y, slope = leaky_relu(z, config.leaky_slope)
            layer_cache.slope = slope
        else:
            y = z
        cache.layers.append(layer_cache)
    cache.logits = y
    cache.probabilities = softmax_rows(y)
    return cache.probabilities, cache


def _logit_gradient(probabilities: np.ndarray, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    grad = np.zeros_like(probabilities)
    labeled = np.flatnonzero(labels != UNLABELED)
    picked = probabilities[labeled, labels[labeled]]
    active = labeled[picked > LOG_CLAMP]
    grad[active] = probabilities[active]
    grad[active, labels[active]] -= 1.0
    return grad


def backward(params: NetworkParams, cache: ForwardCache, labels: Optional[np.ndarray] = None,
             geometry: Optional[ConvGeometry] = None, upstream: Optional[np.ndarray] = None,
             scale: float = 1.0, freeze_kernels: bool = False) -> NetworkParams:
    """
    Exact gradients of the cross-entropy (or of <upstream, logits>) w.r.t. every
    parameter: w, b, mu and log sigma of each layer. Frozen kernels get zero mu and
    log sigma gradients.
    """
    if cache is None or not cache.layers or cache.probabilities is None:
        raise DataValidationError("backward needs the cache of a forward pass")
    if geometry is None:
        raise DataValidationError("backward needs the geometry used in the forward pass")
    if upstream is None:
        if labels is None:
            raise DataValidationError("backward needs labels or an upstream gradient")
        upstream = _logit_gradient(cache.probabilities, labels)
    grad_y = np.asarray(upstream, dtype=np.float64) * scale

    grads = params.zeros_like()
    for index in range(len(params.layers) - 1, -1, -1):
        layer = params.layers[index]
        lc = cache.layers[index]
        out = grads.layers[index]
        p, q, k = layer.weights.shape

        grad_z = grad_y * lc.slope if lc.slope is not None else grad_y
        out.bias[:] = grad_z.sum(axis=0)
        flat_gathered = lc.gathered.reshape(geometry.n, q * k)
        out.weights[:] = (grad_z.T @ flat_gathered).reshape(p, q, k)
        grad_gathered = (grad_z @ layer.weights.reshape(p, q * k)).reshape(geometry.n, q, k)

        grad_y = np.zeros((geometry.n, q))
        grad_phi = np.empty((geometry.n_pairs, k))
        y_neighbors = lc.y_in[geometry.cols]
        for kk in range(k):
            grad_y += geometry.kernel_matrix(lc.phi[:, kk]).T @ grad_gathered[:, :, kk]
            grad_phi[:, kk] = np.einsum("eq,eq->e", grad_gathered[geometry.rows, :, kk], y_neighbors)

        if not freeze_kernels:
            sigma = np.exp(layer.log_sigma)
            t = grad_phi * lc.phi
            out.mu[:] = 2.0 * sigma[:, None] * np.einsum("ek,ekd->kd", t, lc.diff)
            out.log_sigma[:] = -sigma * np.einsum("ek,ek->k", t, lc.sq)
    return grads


def loss_and_gradients(params: NetworkParams, features: np.ndarray, geometry: ConvGeometry,
                       labels: np.ndarray, scale: float = 1.0,
                       freeze_kernels: bool = False) -> Tuple[float, NetworkParams, ForwardCache]:
    probabilities, cache = forward(params, features, geometry)
    loss = cross_entropy(probabilities, labels)
    grads = backward(params, cache, labels=labels, geometry=geometry, scale=scale,
                     freeze_kernels=freeze_kernels)
    return loss, grads, cache


def predict_labels(probabilities: np.ndarray) -> np.ndarray:
    """Row argmax; np.argmax returns the lowest index on ties."""
    return np.argmax(probabilities, axis=1).astype(np.int64)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradientCheck:
    max_relative_error: float
    worst_parameter: str
    checked: int
    skipped_kinks: int
    per_array: Dict[str, float]


def finite_difference_check(params: NetworkParams, features: np.ndarray, geometry: ConvGeometry,
                            labels: np.ndarray, h: float = 1e-5, floor: float = 1e-3,
                            freeze_kernels: bool = False) -> GradientCheck:
    """
    Compare analytic gradients with central differences on every parameter.

    Components whose +-h perturbation changes the sign of any pre-activation straddle
    a leaky-ReLU kink and are skipped.
    """
    _, analytic, _ = loss_and_gradients(params, features, geometry, labels, freeze_kernels=freeze_kernels)
    perturbed = params.copy()
    per_array: Dict[str, float] = {}
    worst, worst_name, checked, skipped = 0.0, "", 0, 0

    for (name, array), (_, grad) in zip(perturbed.arrays(), analytic.arrays()):
        frozen = freeze_kernels and (name.endswith(".mu") or name.endswith(".log_sigma"))
        array_worst = 0.0
        for index in np.ndindex(array.shape):
            original = array[index]
            array[index] = original + h
            p_plus, c_plus = forward(perturbed, features, geometry)
            loss_plus = cross_entropy(p_plus, labels)
            array[index] = original - h
            p_minus, c_minus = forward(perturbed, features, geometry)
            loss_minus = cross_entropy(p_minus, labels)
            array[index] = original

            if any(np.any(a != b) for a, b in zip(c_plus.preactivation_signs(), c_minus.preactivation_signs())):
                skipped += 1
                continue
            numeric = 0.0 if frozen else (loss_plus - loss_minus) / (2.0 * h)
            a = grad[index]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            checked += 1
            array_worst = max(array_worst, rel)
            if rel > worst:
                worst, worst_name = rel, f"{name}{list(index)}"
        per_array[name] = array_worst
    return GradientCheck(worst, worst_name, checked, skipped, per_array)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _header(params: NetworkParams) -> Dict:
    return {
        "format": "csg-checkpoint",
        "version": CHECKPOINT_VERSION,
        "config": params.config.to_dict(),
        "arrays": [{"name": name, "shape": list(a.shape)} for name, a in params.arrays()],
    }


def save_checkpoint(path, params: NetworkParams, fmt: str = "binary") -> Path:
    """Write parameters; identical parameters give identical bytes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = _header(params)
    if fmt == "json":
        for entry, (_, array) in zip(header["arrays"], params.arrays()):
            entry["data"] = [float(v) for v in array.ravel()]
        path.write_text(json.dumps(header, sort_keys=True, indent=1) + "\n", encoding="utf-8")
        return path
    if fmt != "binary":
        raise ConfigError(f"Unknown checkpoint format '{fmt}'")
    blob = bytearray(CHECKPOINT_MAGIC)
    blob += json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8") + b"\n"
    for _, array in params.arrays():
        blob += np.ascontiguousarray(array, dtype="<f8").tobytes()
    path.write_bytes(bytes(blob))
    return path


def _params_from(header: Dict, arrays: List[np.ndarray]) -> NetworkParams:
    config = NetworkConfig.from_dict(header["config"])
    if len(arrays) % 4:
        raise ArtifactError("<checkpoint>", f"expected 4 arrays per layer, got {len(arrays)}")
    layers = [LayerParams(*arrays[i:i + 4]) for i in range(0, len(arrays), 4)]
    return NetworkParams(config, layers)


def load_checkpoint(path) -> NetworkParams:
    path = Path(path)
    if not path.exists():
        raise ArtifactError(path, "checkpoint not found")
    raw = path.read_bytes()
    try:
        if raw.startswith(CHECKPOINT_MAGIC):
            end = raw.index(b"\n", len(CHECKPOINT_MAGIC))
            header = json.loads(raw[len(CHECKPOINT_MAGIC):end].decode("utf-8"))
            offset = end + 1
            arrays = []
            for entry in header["arrays"]:
                shape = tuple(entry["shape"])
                count = int(np.prod(shape)) if shape else 1
                data = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
                arrays.append(data.astype(np.float64).reshape(shape))
                offset += 8 * count
            if offset != len(raw):
                raise ValueError(f"{len(raw) - offset} trailing bytes")
        else:
            header = json.loads(raw.decode("utf-8"))
            arrays = [np.array(e["data"], dtype=np.float64).reshape(e["shape"]) for e in header["arrays"]]
    except (ValueError, KeyError, UnicodeDecodeError) as e:
        raise ArtifactError(path, f"corrupt checkpoint: {e}") from e
    if header.get("version") != CHECKPOINT_VERSION:
        raise ArtifactError(path, f"unsupported checkpoint version {header.get('version')}")
    return _params_from(header, arrays)
