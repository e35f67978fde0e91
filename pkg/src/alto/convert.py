"""Point <-> grid feature conversion.

Grids live on a node-centred lattice: node ``i`` of an ``R``-node axis sits at
``i / (R - 1)``. A triplane stores planes xy, xz, yz stacked as
``(3, R, R, d)``; plane ``p`` is indexed by the coordinate pair
``PLANE_AXES[p]``. A volume is ``(R, R, R, d)`` indexed by (x, y, z).

Both directions are linear in the features, so each is a constant sparse
matrix for a fixed point set: gathers are (N, nodes), scatters (nodes, N).
Point coordinates are data and are never differentiated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from alto.ad import Tensor, ops
from alto.errors import ConfigError, ContractError, DimensionError

PLANE_AXES = ((0, 1), (0, 2), (1, 2))
KINDS = ("triplane", "volume")

# Set to raise on out-of-range coordinates instead of clamping them.
STRICT_BOUNDS = False


@dataclass
class FeatureGrid:
    kind: str
    data: Tensor

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown grid kind {self.kind!r}")
        s = self.data.shape
        if self.kind == "triplane":
            ok = len(s) == 4 and s[0] == 3 and s[1] == s[2]
        else:
            ok = len(s) == 4 and s[0] == s[1] == s[2]
        if not ok or s[1] < 2 or s[-1] < 1:
            raise DimensionError(f"{self.kind} grid has invalid shape {s}")

    @property
    def resolution(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[-1]

    @property
    def n_nodes(self) -> int:
        r = self.resolution
        return 3 * r * r if self.kind == "triplane" else r**3

    def flat(self) -> Tensor:
        """All node features as a (n_nodes, d) table."""
        return ops.reshape(self.data, (self.n_nodes, self.channels))


def grid_shape(kind: str, resolution: int, channels: int) -> tuple[int, ...]:
    if kind == "triplane":
        return (3, resolution, resolution, channels)
    return (resolution, resolution, resolution, channels)


# -- lattice helpers ------------------------------------------------------------


def _checked(coords: np.ndarray, k: int) -> np.ndarray:
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != k:
        raise DimensionError(f"expected (N, {k}) coordinates, got {coords.shape}")
    if STRICT_BOUNDS and (coords.min(initial=0.0) < 0 or coords.max(initial=1.0) > 1):
        raise ContractError("coordinates outside the unit cube")
    return np.clip(coords, 0.0, 1.0)


def _scaled(coords, resolution: int, spacing: float | None) -> np.ndarray:
    """Coordinates in lattice units; the default spacing spans [0, 1] with ``resolution`` nodes."""
    coords = np.asarray(coords, dtype=np.float64)
    if spacing is None:
        return coords * (resolution - 1)
    return coords / spacing


def nearest_node(coords: np.ndarray, resolution: int, spacing: float | None = None) -> np.ndarray:
    """Nearest lattice index per coordinate; exact half-cell ties go to the lower index."""
    x = _scaled(coords, resolution, spacing)
    lo = np.floor(x)
    idx = np.where(x - lo <= 0.5, lo, lo + 1).astype(np.int64)
    return np.clip(idx, 0, resolution - 1)


def linear_cells(coords: np.ndarray, resolution: int, spacing: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Lower corner index and fractional offset of each coordinate's lattice cell.

    Coordinates past the last node (possible with an explicit spacing) are
    clamped onto it.
    """
    x = np.minimum(_scaled(coords, resolution, spacing), resolution - 1)
    i0 = np.minimum(np.floor(x).astype(np.int64), resolution - 2)
    return i0, x - i0


def _plane_rows(uv: np.ndarray, res_u: int, res_v: int | None = None, spacing: float | None = None):
    """Row index (within one plane) and weight of the 4 bilinear corners; shapes (N, 4)."""
    res_v = res_u if res_v is None else res_v
    iu, tu = linear_cells(uv[:, 0], res_u, spacing)
    iv, tv = linear_cells(uv[:, 1], res_v, spacing)
    rows, wts = [], []
    for du, wu in ((0, 1 - tu), (1, tu)):
        for dv, wv in ((0, 1 - tv), (1, tv)):
            rows.append((iu + du) * res_v + (iv + dv))
            wts.append(wu * wv)
    return np.stack(rows, 1), np.stack(wts, 1)


def _volume_rows(xyz: np.ndarray, resolution: int, spacing: float | None = None):
    cells = [linear_cells(xyz[:, a], resolution, spacing) for a in range(3)]
    rows, wts = [], []
    for corner in np.ndindex(2, 2, 2):
        r = np.zeros(len(xyz), dtype=np.int64)
        w = np.ones(len(xyz))
        for a in range(3):
            i0, t = cells[a]
            r = r * resolution + i0 + corner[a]
            w = w * (t if corner[a] else 1 - t)
        rows.append(r)
        wts.append(w)
    return np.stack(rows, 1), np.stack(wts, 1)


def _csr(rows: np.ndarray, cols: np.ndarray, vals: np.ndarray, shape) -> sp.csr_matrix:
    return sp.csr_matrix((vals.ravel(), (rows.ravel(), cols.ravel())), shape=shape)


def gather_matrix(
    points: np.ndarray,
    resolution: int,
    kind: str,
    planes: tuple[int, ...] = (0, 1, 2),
    spacing: float | None = None,
) -> sp.csr_matrix:
    """(N, n_nodes) interpolation matrix; triplane rows sum the selected planes.

    ``spacing`` overrides the node spacing (default ``1 / (resolution - 1)``);
    coarse U-Net levels use it so their nodes coincide with every 2^k-th fine node.
    """
    pts = _checked(points, 3)
    n = len(pts)
    if kind == "volume":
        cols, wts = _volume_rows(pts, resolution, spacing)
        shape = (n, resolution**3)
    else:
        per = resolution * resolution
        col_parts, wt_parts = [], []
        for p in planes:
            c, w = _plane_rows(pts[:, PLANE_AXES[p]], resolution, spacing=spacing)
            col_parts.append(c + p * per)
            wt_parts.append(w)
        cols, wts = np.concatenate(col_parts, 1), np.concatenate(wt_parts, 1)
        shape = (n, 3 * per)
    rows = np.repeat(np.arange(n), cols.shape[1]).reshape(cols.shape)
    return _csr(rows, cols, wts, shape)


def node_index(points: np.ndarray, resolution: int, kind: str, spacing: float | None = None) -> np.ndarray:
    """Nearest-node row per point: (N,) for a volume, (N, 3) for a triplane."""
    pts = _checked(points, 3)
    idx = nearest_node(pts, resolution, spacing)
    if kind == "volume":
        return (idx[:, 0] * resolution + idx[:, 1]) * resolution + idx[:, 2]
    per = resolution * resolution
    return np.stack([idx[:, a] * resolution + idx[:, b] + p * per for p, (a, b) in enumerate(PLANE_AXES)], 1)


def scatter_mean_matrix(points: np.ndarray, resolution: int, kind: str, spacing: float | None = None) -> sp.csr_matrix:
    """(n_nodes, N) averaging matrix; empty nodes are all-zero rows."""
    nodes = node_index(points, resolution, kind, spacing)
    n = len(nodes)
    if nodes.ndim == 1:
        nodes = nodes[:, None]
    n_rows = resolution**3 if kind == "volume" else 3 * resolution * resolution
    counts = np.zeros(n_rows)
    np.add.at(counts, nodes.ravel(), 1.0)
    cols = np.repeat(np.arange(n), nodes.shape[1]).reshape(nodes.shape)
    vals = 1.0 / counts[nodes]
    return _csr(nodes, cols, vals, (n_rows, n))


# -- public kernels -------------------------------------------------------------


def interpolate_bilinear(plane, uv: np.ndarray) -> Tensor:
    """Sample an (H, W, d) plane at (N, 2) coordinates in [0, 1]^2."""
    plane = plane if isinstance(plane, Tensor) else Tensor(plane)
    if plane.ndim != 3 or min(plane.shape[:2]) < 2:
        raise DimensionError(f"expected an (H, W, d) plane with H, W >= 2, got {plane.shape}")
    H, W, d = plane.shape
    uv = _checked(uv, 2)
    cols, wts = _plane_rows(uv, H, W)
    rows = np.repeat(np.arange(len(uv)), 4).reshape(cols.shape)
    m = _csr(rows, cols, wts, (len(uv), H * W))
    return ops.sparse_matmul(m, ops.reshape(plane, (H * W, d)))


def interpolate_trilinear(volume, xyz: np.ndarray) -> Tensor:
    volume = volume if isinstance(volume, Tensor) else Tensor(volume)
    R = volume.shape[0]
    if volume.shape[:3] != (R, R, R):
        raise DimensionError(f"volumes must be cubic, got {volume.shape[:3]}")
    m = gather_matrix(xyz, R, "volume")
    return ops.sparse_matmul(m, ops.reshape(volume, (R**3, volume.shape[-1])))


def grid_to_point(grid: FeatureGrid, points: np.ndarray, matrix: sp.csr_matrix | None = None) -> Tensor:
    """Interpolated grid features at each point (triplane: sum over the three planes)."""
    if matrix is None:
        matrix = gather_matrix(points, grid.resolution, grid.kind)
    return ops.sparse_matmul(matrix, grid.flat())


def scatter_mean(
    points: np.ndarray,
    features,
    resolution: int,
    kind: str,
    matrix: sp.csr_matrix | None = None,
) -> FeatureGrid:
    """Average point features into their nearest lattice nodes."""
    features = features if isinstance(features, Tensor) else Tensor(features)
    if features.ndim != 2 or features.shape[0] != len(points):
        raise DimensionError(f"{len(points)} points but features of shape {features.shape}")
    if kind not in KINDS:
        raise ConfigError(f"unknown grid kind {kind!r}")
    if matrix is None:
        matrix = scatter_mean_matrix(points, resolution, kind)
    flat = ops.sparse_matmul(matrix, features)
    return FeatureGrid(kind, ops.reshape(flat, grid_shape(kind, resolution, features.shape[1])))


def point_mlp(x, params: dict, prefix: str) -> Tensor:
    """linear -> ReLU -> linear."""
    h = ops.relu(ops.linear(x, params[f"{prefix}.fc1.weight"], params[f"{prefix}.fc1.bias"]))
    return ops.linear(h, params[f"{prefix}.fc2.weight"], params[f"{prefix}.fc2.bias"])


def point_to_grid(
    points: np.ndarray,
    features,
    params: dict,
    prefix: str,
    resolution: int,
    kind: str,
    matrix: sp.csr_matrix | None = None,
) -> tuple[FeatureGrid, Tensor]:
    """Per-point MLP followed by scatter-mean; returns the grid and the MLP output."""
    w1 = params.get(f"{prefix}.fc1.weight")
    if w1 is None:
        raise ConfigError(f"missing conversion MLP parameters under {prefix!r}")
    if w1.shape[0] != features.shape[-1]:
        raise ConfigError(f"{prefix}: MLP expects {w1.shape[0]} input channels, got {features.shape[-1]}")
    out = point_mlp(features, params, prefix)
    return scatter_mean(points, out, resolution, kind, matrix), out
