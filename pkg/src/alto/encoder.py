"""Point-cloud encoder: local-pooling PointNet followed by the alternating U-Net.

U-Net layout for depth L: down blocks at levels 0..L-1 (level L-1 is the
bottleneck) and up blocks at levels L-2..0. The top ``no_resample_top_levels``
levels share the input resolution; every later level halves it with a
stride-2 convolution, and the up path mirrors that with nearest upsampling
followed by a convolution. The last up block is always convolution-only.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from alto import layers
from alto.ad import Tensor, ops
from alto.convert import (
    FeatureGrid,
    gather_matrix,
    grid_to_point,
    nearest_node,
    node_index,
    point_to_grid,
    scatter_mean_matrix,
)
from alto.errors import ConfigError, DimensionError
from alto.geometry import PointCloud
from alto.layers import ParamBuilder, Params


@dataclass
class EncoderConfig:
    mode: str = "triplane"
    resolution: int = 64
    feature_dim: int = 32
    unet_depth: int = 4
    no_resample_top_levels: int = 2
    alternation_count: int | None = None  # None means every available slot
    padding: str = "zero"
    pointnet_blocks: int = 5

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.mode not in ("triplane", "volume"):
            raise ConfigError(f"mode must be 'triplane' or 'volume', got {self.mode!r}")
        r = self.resolution
        if r < 8 or r & (r - 1):
            raise ConfigError(f"resolution must be a power of two >= 8, got {r}")
        if self.feature_dim < 1:
            raise ConfigError("feature_dim must be >= 1")
        if self.unet_depth < 1:
            raise ConfigError("unet_depth must be >= 1")
        if self.no_resample_top_levels < 0:
            raise ConfigError("no_resample_top_levels must be >= 0")
        if self.level_resolutions()[-1] < 2:
            raise ConfigError(f"depth {self.unet_depth} downsamples resolution {r} below 2")
        if self.padding not in ("zero", "circular"):
            raise ConfigError(f"padding must be 'zero' or 'circular', got {self.padding!r}")
        if self.pointnet_blocks < 1:
            raise ConfigError("pointnet_blocks must be >= 1")
        if self.alternation_count is not None and not 0 <= self.alternation_count <= self.max_alternations:
            raise ConfigError(
                f"alternation_count {self.alternation_count} outside 0..{self.max_alternations} for depth {self.unet_depth}"
            )

    @property
    def dims(self) -> int:
        return 2 if self.mode == "triplane" else 3

    def resamples_into(self, level: int) -> bool:
        """Whether the step from ``level - 1`` to ``level`` halves the resolution."""
        return level >= max(self.no_resample_top_levels, 1)

    def level_resolutions(self) -> list[int]:
        res = [self.resolution]
        for level in range(1, self.unet_depth):
            res.append(res[-1] // 2 if self.resamples_into(level) else res[-1])
        return res

    def block_slots(self) -> list[tuple[str, int]]:
        """Blocks that may alternate, finest level first (down before up)."""
        slots = []
        for level in range(self.unet_depth):
            slots.append(("down", level))
            if 0 < level < self.unet_depth - 1:
                slots.append(("up", level))
        if self.unet_depth == 1:
            return []  # the single block is also the final block
        return slots

    @property
    def max_alternations(self) -> int:
        return max(0, 2 * self.unet_depth - 2)

    def alternating_blocks(self) -> set[tuple[str, int]]:
        n = self.max_alternations if self.alternation_count is None else self.alternation_count
        return set(self.block_slots()[:n])

    def to_dict(self) -> dict:
        return asdict(self)


# -- point-set index ------------------------------------------------------------


class CloudIndex:
    """Per-point-set cache of lattice lookups, keyed by resolution.

    ``base`` is the finest resolution. A coarser level of resolution
    ``base / 2^k`` places node ``i`` on fine node ``2^k i``, matching the
    sampling of stride-2 convolutions, so its spacing is ``2^k / (base - 1)``.
    """

    def __init__(self, points, kind: str, base: int | None = None):
        if isinstance(points, PointCloud):
            points = points.points
        points = np.asarray(points, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != 3 or len(points) < 1:
            raise DimensionError(f"expected (N, 3) points with N >= 1, got {points.shape}")
        self.points = points
        self.kind = kind
        self.base = base
        self._gather: dict[int, object] = {}
        self._scatter: dict[int, object] = {}
        self._nodes: dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.points)

    def spacing(self, res: int) -> float:
        base = res if self.base is None else self.base
        if base % res or (base // res) & (base // res - 1):
            raise ConfigError(f"resolution {res} is not a power-of-two coarsening of {base}")
        return (base // res) / (base - 1)

    def gather(self, res: int):
        if res not in self._gather:
            self._gather[res] = gather_matrix(self.points, res, self.kind, spacing=self.spacing(res))
        return self._gather[res]

    def scatter(self, res: int):
        if res not in self._scatter:
            self._scatter[res] = scatter_mean_matrix(self.points, res, self.kind, self.spacing(res))
        return self._scatter[res]

    def nodes(self, res: int) -> np.ndarray:
        if res not in self._nodes:
            self._nodes[res] = node_index(self.points, res, self.kind, self.spacing(res))
        return self._nodes[res]

    def local_coords(self, res: int) -> np.ndarray:
        """Offset of each point from its nearest lattice node, in cell units."""
        h = self.spacing(res)
        return self.points / h - nearest_node(self.points, res, h)


# -- parameters -----------------------------------------------------------------


def init_encoder(cfg: EncoderConfig, builder: ParamBuilder, prefix: str = "encoder") -> None:
    d, dims = cfg.feature_dim, cfg.dims
    builder.linear(f"{prefix}.pointnet.fc_pos", 3, d)
    for i in range(cfg.pointnet_blocks):
        builder.resnet_fc(f"{prefix}.pointnet.block{i}", d)
        builder.linear(f"{prefix}.pointnet.merge{i}", 2 * d, d)
    builder.mlp2(f"{prefix}.project", d, d, d)
    slots = set(cfg.block_slots())
    for level in range(cfg.unet_depth):
        name = f"{prefix}.unet.down{level}"
        if level > 0 and cfg.resamples_into(level):
            builder.conv(f"{name}.resample", dims, d, d)
        _init_block(builder, name, cfg, ("down", level) in slots)
    for level in reversed(range(cfg.unet_depth - 1)):
        name = f"{prefix}.unet.up{level}"
        if cfg.resamples_into(level + 1):
            builder.conv(f"{name}.upconv", dims, d, d)
        builder.linear(f"{name}.merge", 2 * d, d)
        _init_block(builder, name, cfg, ("up", level) in slots)


def _init_block(builder: ParamBuilder, name: str, cfg: EncoderConfig, has_slot: bool) -> None:
    d = cfg.feature_dim
    builder.conv(f"{name}.conv1", cfg.dims, d, d)
    builder.conv(f"{name}.conv2", cfg.dims, d, d)
    if has_slot:
        # conversion MLPs exist for every slot so parameter counts do not depend
        # on alternation_count; unused ones simply receive zero gradient
        builder.mlp2(f"{name}.convert", d, d, d, zero_last=True)


# -- forward --------------------------------------------------------------------


def _batched(grid: FeatureGrid) -> Tensor:
    if grid.kind == "triplane":
        return grid.data
    return ops.reshape(grid.data, (1,) + grid.data.shape)


def _unbatched(kind: str, x: Tensor) -> FeatureGrid:
    if kind == "triplane":
        return FeatureGrid(kind, x)
    return FeatureGrid(kind, ops.reshape(x, x.shape[1:]))


def pointnet_encode(cloud, params: Params, cfg: EncoderConfig, prefix: str = "encoder") -> Tensor:
    """Per-point features from local coordinates with scatter-max pooling after each block."""
    if not isinstance(cloud, CloudIndex):
        cloud = CloudIndex(cloud, cfg.mode, cfg.resolution)
    w = params.get(f"{prefix}.pointnet.fc_pos.weight")
    if w is None or w.shape != (3, cfg.feature_dim):
        raise ConfigError(f"pointnet parameters do not match feature_dim={cfg.feature_dim}")
    res = cfg.resolution
    dtype = w.dtype
    x = layers.linear(params, f"{prefix}.pointnet.fc_pos", Tensor(cloud.local_coords(res).astype(dtype)))
    nodes = cloud.nodes(res)
    n = len(cloud)
    for i in range(cfg.pointnet_blocks):
        x = layers.resnet_fc(params, f"{prefix}.pointnet.block{i}", x)
        if cloud.kind == "volume":
            pooled = ops.take_rows(ops.scatter_max(x, nodes, res**3), nodes)
        else:
            stacked = ops.concat([x, x, x], axis=0)
            table = ops.scatter_max(stacked, nodes.T.reshape(-1), 3 * res * res)
            pooled = ops.sum(ops.take_rows(table, nodes), axis=1)
        x = layers.linear(params, f"{prefix}.pointnet.merge{i}", ops.concat([x, pooled], axis=1))
    assert x.shape == (n, cfg.feature_dim)
    return x


def alto_block(
    grid: FeatureGrid,
    cloud: CloudIndex,
    point_skip: Tensor | None,
    params: Params,
    name: str,
    alternate: bool = True,
    padding: str = "zero",
    expected_resolution: int | None = None,
) -> tuple[FeatureGrid, Tensor | None]:
    """Two conv+ReLU layers, then (optionally) grid->point, point MLP, point->grid, residual add."""
    w = params.get(f"{name}.conv1.weight")
    if w is None:
        raise ConfigError(f"missing block parameters {name!r}")
    if w.shape[-2] != grid.channels:
        raise ConfigError(f"{name}: conv expects {w.shape[-2]} channels, grid has {grid.channels}")
    if expected_resolution is not None and grid.resolution != expected_resolution:
        raise ConfigError(f"{name}: grid resolution {grid.resolution} != block resolution {expected_resolution}")
    if cloud.kind != grid.kind:
        raise ConfigError(f"{name}: point index built for {cloud.kind}, grid is {grid.kind}")
    x = _batched(grid)
    x = ops.relu(layers.conv(params, f"{name}.conv1", x, padding=padding))
    x = ops.relu(layers.conv(params, f"{name}.conv2", x, padding=padding))
    conv_grid = _unbatched(grid.kind, x)
    if not alternate:
        return conv_grid, point_skip
    res = grid.resolution
    feats = grid_to_point(conv_grid, cloud.points, cloud.gather(res))
    if point_skip is not None:
        feats = ops.add(feats, point_skip)
    scattered, point_out = point_to_grid(
        cloud.points, feats, params, f"{name}.convert", res, grid.kind, cloud.scatter(res)
    )
    return FeatureGrid(grid.kind, ops.add(conv_grid.data, scattered.data)), point_out


def alto_unet(
    grid: FeatureGrid,
    point_feats: Tensor | None,
    cloud: CloudIndex,
    params: Params,
    cfg: EncoderConfig,
    prefix: str = "encoder",
) -> FeatureGrid:
    if grid.resolution != cfg.resolution or grid.channels != cfg.feature_dim:
        raise ConfigError(
            f"U-Net expects a {cfg.resolution}-node grid with {cfg.feature_dim} channels, "
            f"got {grid.resolution} / {grid.channels}"
        )
    res = cfg.level_resolutions()
    alt = cfg.alternating_blocks()
    pad = cfg.padding
    x, p = grid, point_feats
    skips: list[FeatureGrid] = []
    for level in range(cfg.unet_depth):
        name = f"{prefix}.unet.down{level}"
        if level > 0 and cfg.resamples_into(level):
            b = ops.relu(layers.conv(params, f"{name}.resample", _batched(x), stride=2, padding=pad))
            x = _unbatched(x.kind, b)
        x, p = alto_block(x, cloud, p, params, name, ("down", level) in alt, pad, res[level])
        skips.append(x)
    for level in reversed(range(cfg.unet_depth - 1)):
        name = f"{prefix}.unet.up{level}"
        b = _batched(x)
        if cfg.resamples_into(level + 1):
            b = ops.upsample_nearest(b, cfg.dims)
            b = ops.relu(layers.conv(params, f"{name}.upconv", b, padding=pad))
        b = layers.linear(params, f"{name}.merge", ops.concat([b, _batched(skips[level])], axis=-1))
        x, p = alto_block(_unbatched(x.kind, b), cloud, p, params, name, ("up", level) in alt, pad, res[level])
    return x


def encode(points, params: Params, cfg: EncoderConfig, cloud: CloudIndex | None = None, prefix: str = "encoder") -> FeatureGrid:
    """PointNet -> point-to-grid projection -> alternating U-Net."""
    if cloud is None:
        cloud = CloudIndex(points, cfg.mode, cfg.resolution)
    elif cloud.kind != cfg.mode or cloud.base != cfg.resolution:
        raise ConfigError(f"point index built for {cloud.kind}@{cloud.base}, config is {cfg.mode}@{cfg.resolution}")
    feats = pointnet_encode(cloud, params, cfg, prefix)
    grid0, _ = point_to_grid(
        cloud.points, feats, params, f"{prefix}.project", cfg.resolution, cfg.mode, cloud.scatter(cfg.resolution)
    )
    return alto_unet(grid0, feats, cloud, params, cfg, prefix)


def build_encoder_params(cfg: EncoderConfig, seed: int = 0, dtype=np.float64) -> Params:
    from alto.geometry import make_rng

    builder = ParamBuilder(make_rng(seed), dtype)
    init_encoder(cfg, builder)
    return builder.params
