"""Dense occupancy evaluation, marching cubes and per-edge vertex refinement.

Volumes live on the node-centred lattice used everywhere else: value
``[i, j, k]`` is the occupancy at ``(i, j, k) / (R - 1)``. A node is inside
when its value is >= tau.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from alto.ad import no_grad
from alto.errors import ContractError
from alto.mesh.tables import CORNERS, EDGES, TRIANGLES

Predictor = Callable[[np.ndarray], np.ndarray]


@dataclass
class Mesh:
    """Triangle mesh; ``edge_in``/``edge_out`` record the lattice edge each vertex came from.

    ``edge_in`` is the endpoint on the inside (value >= tau), ``edge_out`` the
    outside one. They are None for meshes not produced by marching cubes.
    """

    vertices: np.ndarray
    faces: np.ndarray
    edge_in: np.ndarray | None = None
    edge_out: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ContractError("face index out of range")

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def triangles(self) -> np.ndarray:
        return self.vertices[self.faces]

    def face_normals(self) -> np.ndarray:
        """Unit normals (zero for degenerate faces), oriented by the vertex order."""
        t = self.triangles()
        n = np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0])
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        return np.divide(n, norm, out=np.zeros_like(n), where=norm > 0)

    def face_areas(self) -> np.ndarray:
        t = self.triangles()
        return 0.5 * np.linalg.norm(np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0]), axis=1)

    def signed_volume(self) -> float:
        t = self.triangles()
        return float(np.sum(np.einsum("ij,ij->i", t[:, 0], np.cross(t[:, 1], t[:, 2]))) / 6.0)

    def boundary_edge_count(self) -> int:
        """Number of undirected edges not shared by exactly two faces."""
        if self.is_empty:
            return 0
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        e.sort(axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        return int(np.sum(counts != 2))


@dataclass
class OccupancyVolume:
    values: np.ndarray
    tau: float = 0.5

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3 or len(set(v.shape)) != 1 or v.shape[0] < 2:
            raise ContractError(f"occupancy volume must be R x R x R with R >= 2, got {v.shape}")
        self.values = v

    @property
    def resolution(self) -> int:
        return self.values.shape[0]


def lattice_points(resolution: int) -> np.ndarray:
    """All lattice nodes in C order, shape (R^3, 3)."""
    axis = np.linspace(0.0, 1.0, resolution)
    return np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), -1).reshape(-1, 3)


def evaluate_field(predictor: Predictor, resolution: int, chunk_size: int = 65536, tau: float = 0.5) -> OccupancyVolume:
    """Evaluate ``predictor`` at every lattice node in fixed-size chunks."""
    if resolution < 2:
        raise ContractError("resolution must be >= 2")
    pts = lattice_points(resolution)
    out = np.empty(len(pts))
    for i in range(0, len(pts), chunk_size):
        out[i : i + chunk_size] = predictor(pts[i : i + chunk_size])
    return OccupancyVolume(out.reshape((resolution,) * 3), tau)


def evaluate_grid(grid, params, decoder_cfg, resolution: int = 64, chunk_size: int = 16384, tau: float = 0.5) -> OccupancyVolume:
    """Decode an encoded feature grid at every node of an R^3 lattice."""
    from alto.decoder import predict_occupancy

    if resolution < 8:
        raise ContractError("evaluation resolution must be >= 8")

    def predictor(q):
        with no_grad():
            return predict_occupancy(grid, q, params, decoder_cfg).data

    return evaluate_field(predictor, resolution, chunk_size, tau)


def marching_cubes(volume: OccupancyVolume | np.ndarray, tau: float | None = None) -> Mesh:
    """Triangulate the tau-level set; vertices are shared along lattice edges."""
    if not isinstance(volume, OccupancyVolume):
        volume = OccupancyVolume(volume, 0.5 if tau is None else tau)
    tau = volume.tau if tau is None else tau
    if not 0.0 < tau < 1.0:
        raise ContractError(f"tau must lie in (0, 1), got {tau}")
    v = volume.values
    R = v.shape[0]
    below = v < tau
    n = R - 1
    case = np.zeros((n, n, n), dtype=np.int64)
    for c, (dx, dy, dz) in enumerate(CORNERS):
        case |= below[dx : dx + n, dy : dy + n, dz : dz + n].astype(np.int64) << c
    cells = np.argwhere((case != 0) & (case != 255))
    if len(cells) == 0:
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), np.zeros((0, 3)), np.zeros((0, 3)))
    cases = case[cells[:, 0], cells[:, 1], cells[:, 2]]
    tri_edges = TRIANGLES[cases]  # (C, 16)

    # global id of each cell edge: (lower endpoint node, axis)
    lo = np.minimum(CORNERS[EDGES[:, 0]], CORNERS[EDGES[:, 1]])  # (12, 3)
    axis = np.argmax(CORNERS[EDGES[:, 0]] != CORNERS[EDGES[:, 1]], axis=1)  # (12,)
    start = cells[:, None, :] + lo[None]  # (C, 12, 3)
    edge_id = ((start[..., 0] * R + start[..., 1]) * R + start[..., 2]) * 3 + axis[None]

    mask = tri_edges >= 0
    cell_of = np.repeat(np.arange(len(cells)), 16).reshape(tri_edges.shape)[mask]
    local = tri_edges[mask]
    gid = edge_id[cell_of, local]
    uniq, inverse = np.unique(gid, return_inverse=True)
    # with bits set for corners below tau the table winds triangles so that
    # normals point toward decreasing occupancy
    faces = inverse.reshape(-1, 3)

    ax = uniq % 3
    node = uniq // 3
    p0 = np.stack([node // (R * R), (node // R) % R, node % R], 1)
    p1 = p0.copy()
    p1[np.arange(len(p1)), ax] += 1
    v0 = v[p0[:, 0], p0[:, 1], p0[:, 2]]
    v1 = v[p1[:, 0], p1[:, 1], p1[:, 2]]
    t = (tau - v0) / (v1 - v0)  # endpoints straddle tau, so v1 != v0
    scale = 1.0 / (R - 1)
    verts = (p0 + t[:, None] * (p1 - p0)) * scale
    inside0 = (v0 >= tau)[:, None]
    edge_in = np.where(inside0, p0, p1) * scale
    edge_out = np.where(inside0, p1, p0) * scale
    return Mesh(verts, faces, edge_in, edge_out)


@dataclass
class RefineTrace:
    """Per-iteration record of ``max |f(vertex) - tau|`` and the final brackets."""

    max_error: list[float]
    errors: list[np.ndarray]
    bracket_in: np.ndarray
    bracket_out: np.ndarray


def refine_vertices(mesh: Mesh, predictor: Predictor, tau: float = 0.5, iters: int = 10, trace: bool = False):
    """Bisect each vertex along its lattice edge toward the tau-crossing of ``predictor``.

    Every iteration moves the bracket end on the probe's side to the probe,
    probes the new midpoint, and keeps whichever visited point has the
    smallest ``|f - tau|`` (ties go to the newer probe). The bracket always
    straddles tau and vertices never leave their edge.
    """
    if iters < 0:
        raise ContractError("iters must be >= 0")
    if iters == 0 or mesh.is_empty:
        out = Mesh(mesh.vertices.copy(), mesh.faces.copy(), mesh.edge_in, mesh.edge_out)
        return (out, RefineTrace([], [], mesh.edge_in, mesh.edge_out)) if trace else out
    if mesh.edge_in is None or mesh.edge_out is None:
        raise ContractError("refinement needs the lattice edge of every vertex (a marching-cubes mesh)")
    lo = mesh.edge_in.copy()
    hi = mesh.edge_out.copy()
    probe = mesh.vertices.copy()
    fp = np.asarray(predictor(probe), dtype=np.float64)
    best = probe.copy()
    best_err = np.abs(fp - tau)
    history, errs = [float(best_err.max())], [best_err.copy()]
    for _ in range(iters):
        inside = (fp >= tau)[:, None]
        lo = np.where(inside, probe, lo)
        hi = np.where(inside, hi, probe)
        probe = 0.5 * (lo + hi)
        fp = np.asarray(predictor(probe), dtype=np.float64)
        err = np.abs(fp - tau)
        take = err <= best_err
        best = np.where(take[:, None], probe, best)
        best_err = np.where(take, err, best_err)
        history.append(float(best_err.max()))
        errs.append(best_err.copy())
    out = Mesh(best, mesh.faces.copy(), mesh.edge_in, mesh.edge_out)
    if trace:
        return out, RefineTrace(history, errs, lo, hi)
    return out
