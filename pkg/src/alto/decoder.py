"""Query decoding: vector attention over neighbor patches, then the occupancy head.

Attention runs in G independent groups. A triplane has one group per plane,
each fed by that plane's features; a volume has ``heads`` groups that all read
the same features through their own projections. Within a group, for query
feature psi, patch features c_i and displacements d_i (cell units):

    Q = W_q psi,  K_i = W_k c_i,  V_i = W_v c_i,  g_i = gamma(d_i)
    A_i = softmax_i(score(Q - K_i + g_i))        (per channel)
    F = sum_i A_i * (V_i + g_i)

Group outputs are concatenated and passed to the head, which never sees the
query's absolute position.
"""

from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass

import numpy as np
import scipy.sparse as sp

from alto import layers
from alto.ad import Tensor, no_grad, ops
from alto.convert import PLANE_AXES, FeatureGrid, _checked, _plane_rows, _volume_rows, nearest_node
from alto.errors import ConfigError
from alto.geometry import QueryBatch
from alto.layers import ParamBuilder, Params

DECODE_MODES = ("attention", "linear-interp")


@dataclass
class DecoderConfig:
    mode: str = "triplane"
    feature_dim: int = 32
    heads: int = 4  # volume only; a triplane always uses one head per plane
    occupancy_blocks: int = 5
    decode_mode: str = "attention"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.mode not in ("triplane", "volume"):
            raise ConfigError(f"mode must be 'triplane' or 'volume', got {self.mode!r}")
        if self.decode_mode not in DECODE_MODES:
            raise ConfigError(f"decode_mode must be one of {DECODE_MODES}, got {self.decode_mode!r}")
        if self.feature_dim < 1 or self.heads < 1 or self.occupancy_blocks < 0:
            raise ConfigError("feature_dim and heads must be >= 1, occupancy_blocks >= 0")

    @property
    def groups(self) -> int:
        return 3 if self.mode == "triplane" else self.heads

    @property
    def neighborhood(self) -> int:
        return 9 if self.mode == "triplane" else 27

    @property
    def head_width(self) -> int:
        if self.decode_mode == "attention":
            return self.groups * self.feature_dim
        return 3 * self.feature_dim if self.mode == "triplane" else self.feature_dim

    def to_dict(self) -> dict:
        return asdict(self)


def init_decoder(cfg: DecoderConfig, builder: ParamBuilder, prefix: str = "decoder") -> None:
    d, G = cfg.feature_dim, cfg.groups
    k = 2 if cfg.mode == "triplane" else 3
    if cfg.decode_mode == "attention":
        for name in ("query", "key", "value"):
            builder.grouped_linear(f"{prefix}.attn.{name}", G, d, d)
        builder.grouped_linear(f"{prefix}.attn.pos.fc1", G, k, d)
        builder.grouped_linear(f"{prefix}.attn.pos.fc2", G, d, d)
        builder.grouped_linear(f"{prefix}.attn.score.fc1", G, d, d)
        builder.grouped_linear(f"{prefix}.attn.score.fc2", G, d, d)
    w = cfg.head_width
    for i in range(cfg.occupancy_blocks):
        builder.resnet_fc(f"{prefix}.head.block{i}", w)
    builder.linear(f"{prefix}.head.out", w, 1)


def build_decoder_params(cfg: DecoderConfig, seed: int = 0, dtype=np.float64) -> Params:
    from alto.geometry import make_rng

    builder = ParamBuilder(make_rng(seed), dtype)
    init_decoder(cfg, builder)
    return builder.params


# -- lattice lookups ------------------------------------------------------------


def _coords(queries) -> np.ndarray:
    if isinstance(queries, QueryBatch):
        queries = queries.coords
    return _checked(queries, 3)


def interp_matrix(points: np.ndarray, resolution: int, kind: str) -> sp.csr_matrix:
    """Per-group interpolation rows: (3N, 3R^2) with row 3n+p reading plane p, or (N, R^3)."""
    n = len(points)
    if kind == "volume":
        cols, wts = _volume_rows(points, resolution)
        rows = np.repeat(np.arange(n), 8).reshape(cols.shape)
        return sp.csr_matrix((wts.ravel(), (rows.ravel(), cols.ravel())), shape=(n, resolution**3))
    per = resolution * resolution
    cols, wts, rows = [], [], []
    for p, axes in enumerate(PLANE_AXES):
        c, w = _plane_rows(points[:, axes], resolution)
        cols.append(c + p * per)
        wts.append(w)
        rows.append(np.repeat(3 * np.arange(n) + p, 4).reshape(c.shape))
    cat = lambda xs: np.concatenate(xs, 1).ravel()  # noqa: E731
    return sp.csr_matrix((cat(wts), (cat(rows), cat(cols))), shape=(3 * n, 3 * per))


def neighbor_indices(points: np.ndarray, resolution: int, kind: str) -> tuple[np.ndarray, np.ndarray]:
    """Rows of ``grid.flat()`` and cell-unit displacements of each query's patch.

    Returns ``rows`` of shape (N, M, P) and ``disp`` of shape (N, M, P, k), with
    P = 3 planes (k = 2) for a triplane and P = 1 (k = 3) for a volume. The
    patch is the 3^k block around the nearest node, clamped to the lattice;
    offsets are enumerated lexicographically.
    """
    pts = _checked(points, 3)
    R = resolution
    scaled = pts * (R - 1)
    near = nearest_node(pts, R)
    if kind == "volume":
        axes_sets = [(0, 1, 2)]
    else:
        axes_sets = list(PLANE_AXES)
    k = len(axes_sets[0])
    offsets = np.array(list(itertools.product((-1, 0, 1), repeat=k)))  # (M, k)
    rows, disp = [], []
    for p, axes in enumerate(axes_sets):
        nodes = np.clip(near[:, None, list(axes)] + offsets[None], 0, R - 1)  # (N, M, k)
        flat = np.zeros(nodes.shape[:2], dtype=np.int64)
        for a in range(k):
            flat = flat * R + nodes[..., a]
        if kind == "triplane":
            flat = flat + p * R * R
        rows.append(flat)
        disp.append(scaled[:, None, list(axes)] - nodes)
    return np.stack(rows, 2), np.stack(disp, 2)


def neighbor_patch(grid: FeatureGrid, queries) -> tuple[Tensor, np.ndarray]:
    """Patch features (N, M, P, d) and displacements (N, M, P, k)."""
    rows, disp = neighbor_indices(_coords(queries), grid.resolution, grid.kind)
    n, m, p = rows.shape
    feats = ops.take_rows(grid.flat(), rows.reshape(-1))
    return ops.reshape(feats, (n, m, p, grid.channels)), disp


def _repeat(x: Tensor, axis: int, times: int) -> Tensor:
    return x if times == 1 else ops.concat([x] * times, axis=axis)


# -- decoding -------------------------------------------------------------------


def linear_interpolate_feature(grid: FeatureGrid, queries) -> Tensor:
    """Interpolated feature per query; triplane planes are concatenated, not summed."""
    pts = _coords(queries)
    m = interp_matrix(pts, grid.resolution, grid.kind)
    out = ops.sparse_matmul(m, grid.flat())
    if grid.kind == "triplane":
        out = ops.reshape(out, (len(pts), 3 * grid.channels))
    return out


def attention_interpolate(grid: FeatureGrid, queries, params: Params, cfg: DecoderConfig, prefix: str = "decoder") -> Tensor:
    """Grouped vector attention over each query's neighbor patch; returns (N, G*d)."""
    wq = params.get(f"{prefix}.attn.query.weight")
    d, G = cfg.feature_dim, cfg.groups
    if wq is None:
        raise ConfigError(f"missing attention parameters under {prefix!r}")
    if wq.shape != (G, d, d) or grid.channels != d or grid.kind != cfg.mode:
        raise ConfigError(
            f"attention expects a {cfg.mode} grid with {d} channels and {G} groups; "
            f"got {grid.kind} with {grid.channels} channels, query weight {wq.shape}"
        )
    pts = _coords(queries)
    n = len(pts)
    psi = linear_interpolate_feature(grid, pts)
    psi = ops.reshape(psi, (n, 3 if grid.kind == "triplane" else 1, d))
    patch, disp = neighbor_patch(grid, pts)
    if grid.kind == "volume":
        psi = _repeat(psi, 1, G)
        patch = _repeat(patch, 2, G)
        disp = np.repeat(disp, G, axis=2)
    disp_t = Tensor(disp.astype(wq.dtype))
    gl = lambda name, x: layers.grouped_linear(params, f"{prefix}.attn.{name}", x)  # noqa: E731
    q = gl("query", psi)  # (N, G, d)
    key = gl("key", patch)  # (N, M, G, d)
    val = gl("value", patch)
    pos = gl("pos.fc2", ops.relu(gl("pos.fc1", disp_t)))
    rel = ops.add(ops.sub(ops.reshape(q, (n, 1, G, d)), key), pos)
    logits = gl("score.fc2", ops.relu(gl("score.fc1", rel)))
    attn = ops.softmax(logits, axis=1)
    out = ops.sum(ops.mul(attn, ops.add(val, pos)), axis=1)
    return ops.reshape(out, (n, G * d))


def occupancy_head(features, params: Params, cfg: DecoderConfig | None = None, prefix: str = "decoder") -> Tensor:
    """Residual MLP on the decoded feature, then a sigmoid; returns (N,)."""
    w = params.get(f"{prefix}.head.out.weight")
    if w is None:
        raise ConfigError(f"missing occupancy head parameters under {prefix!r}")
    if features.shape[-1] != w.shape[0]:
        raise ConfigError(f"occupancy head expects width {w.shape[0]}, got {features.shape[-1]}")
    x = features
    i = 0
    while f"{prefix}.head.block{i}.fc0.weight" in params:
        x = layers.resnet_fc(params, f"{prefix}.head.block{i}", x)
        i += 1
    logit = layers.linear(params, f"{prefix}.head.out", ops.relu(x))
    return ops.reshape(ops.sigmoid(logit), (features.shape[0],))


def decode_features(grid: FeatureGrid, queries, params: Params, cfg: DecoderConfig, prefix: str = "decoder") -> Tensor:
    if cfg.decode_mode == "attention":
        return attention_interpolate(grid, queries, params, cfg, prefix)
    return linear_interpolate_feature(grid, queries)


def predict_occupancy(
    grid: FeatureGrid,
    queries,
    params: Params,
    cfg: DecoderConfig,
    chunk_size: int | None = None,
    prefix: str = "decoder",
) -> Tensor:
    """Occupancy probability per query. ``chunk_size`` bounds memory for large, gradient-free batches."""
    pts = _coords(queries)
    if chunk_size is None or len(pts) <= chunk_size:
        return occupancy_head(decode_features(grid, pts, params, cfg, prefix), params, cfg, prefix)
    with no_grad():
        parts = [
            occupancy_head(decode_features(grid, pts[i : i + chunk_size], params, cfg, prefix), params, cfg, prefix).data
            for i in range(0, len(pts), chunk_size)
        ]
    return Tensor(np.concatenate(parts))
