import numpy as np
import pytest

from alto.ad import Tensor, grad_check, ops
from alto.convert import FeatureGrid, grid_shape
from alto.encoder import (
    CloudIndex,
    EncoderConfig,
    alto_block,
    alto_unet,
    build_encoder_params,
    encode,
    pointnet_encode,
)
from alto.errors import ConfigError
from alto.layers import count


def small(mode="volume", **kw):
    base = dict(mode=mode, resolution=8, feature_dim=4, unet_depth=3, no_resample_top_levels=2)
    base.update(kw)
    return EncoderConfig(**base)


def cloud(n=40, seed=0, lo=0.0, hi=1.0):
    return lo + (hi - lo) * np.random.default_rng(seed).random((n, 3))


# -- config ---------------------------------------------------------------------


def test_default_sizes():
    cfg = EncoderConfig()
    assert (cfg.resolution, cfg.feature_dim, cfg.unet_depth, cfg.no_resample_top_levels) == (64, 32, 4, 2)
    assert cfg.level_resolutions() == [64, 64, 32, 16]
    assert cfg.max_alternations == 6


def test_alternation_fills_top_levels_first():
    cfg = EncoderConfig(alternation_count=3)
    assert cfg.alternating_blocks() == {("down", 0), ("down", 1), ("up", 1)}
    assert EncoderConfig(alternation_count=0).alternating_blocks() == set()
    assert len(EncoderConfig().alternating_blocks()) == 6


@pytest.mark.parametrize(
    "kw",
    [
        dict(resolution=12),
        dict(resolution=4),
        dict(mode="points"),
        dict(alternation_count=7),
        dict(padding="reflect"),
        dict(resolution=8, unet_depth=5, no_resample_top_levels=1),
    ],
)
def test_invalid_configs(kw):
    with pytest.raises(ConfigError):
        EncoderConfig(**kw)


def test_parameter_count_independent_of_alternation():
    counts = {count(build_encoder_params(small(alternation_count=k))) for k in range(5)}
    assert len(counts) == 1


# -- pointnet -------------------------------------------------------------------


@pytest.mark.parametrize("mode", ["volume", "triplane"])
@pytest.mark.parametrize("n", [1, 7, 300])
def test_pointnet_shapes(mode, n):
    cfg = small(mode)
    out = pointnet_encode(cloud(n), build_encoder_params(cfg), cfg)
    assert out.shape == (n, 4)


@pytest.mark.parametrize("mode", ["volume", "triplane"])
def test_pointnet_permutation_equivariant(mode):
    cfg = small(mode)
    params = build_encoder_params(cfg, seed=1)
    pts = cloud(60)
    perm = np.random.default_rng(5).permutation(60)
    a = pointnet_encode(pts, params, cfg).data
    b = pointnet_encode(pts[perm], params, cfg).data
    np.testing.assert_array_equal(a[perm], b)


def test_pointnet_duplicates_identical():
    cfg = small("triplane")
    pts = cloud(10)
    pts[3] = pts[7]
    out = pointnet_encode(pts, build_encoder_params(cfg), cfg).data
    np.testing.assert_array_equal(out[3], out[7])


def test_pointnet_param_mismatch():
    with pytest.raises(ConfigError):
        pointnet_encode(cloud(5), build_encoder_params(small(feature_dim=4)), small(feature_dim=6))


# -- alto block -----------------------------------------------------------------


def _random_grid(kind, R, d, seed):
    return FeatureGrid(kind, Tensor(np.random.default_rng(seed).normal(size=grid_shape(kind, R, d))))


@pytest.mark.parametrize("kind", ["volume", "triplane"])
def test_block_disabled_is_conv_only(kind):
    cfg = small(kind)
    params = build_encoder_params(cfg)
    idx = CloudIndex(cloud(), kind, 8)
    grid = _random_grid(kind, 8, 4, 0)
    skip = Tensor(np.ones((40, 4)))
    out, p = alto_block(grid, idx, skip, params, "encoder.unet.down0", alternate=False)
    assert p is skip
    assert out.data.shape == grid.data.shape
    x = grid.data if kind == "triplane" else ops.reshape(grid.data, (1,) + grid.data.shape)
    w = lambda n: (params[f"encoder.unet.down0.{n}.weight"], params[f"encoder.unet.down0.{n}.bias"])  # noqa: E731
    ref = ops.relu(ops.conv(ops.relu(ops.conv(x, *w("conv1"))), *w("conv2")))
    np.testing.assert_array_equal(out.data.data.reshape(ref.shape), ref.data)


@pytest.mark.parametrize("kind", ["volume", "triplane"])
def test_block_zero_conversion_mlp_leaves_conv_output(kind):
    cfg = small(kind)
    params = build_encoder_params(cfg)
    for k in ("fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias"):
        params[f"encoder.unet.down0.convert.{k}"] = Tensor(np.zeros_like(params[f"encoder.unet.down0.convert.{k}"].data))
    idx = CloudIndex(cloud(), kind, 8)
    grid = _random_grid(kind, 8, 4, 1)
    on, p = alto_block(grid, idx, None, params, "encoder.unet.down0", alternate=True)
    off, _ = alto_block(grid, idx, None, params, "encoder.unet.down0", alternate=False)
    np.testing.assert_array_equal(on.data.data, off.data.data)
    np.testing.assert_array_equal(p.data, 0.0)


def test_block_alternation_changes_grid_and_returns_point_features():
    cfg = small("volume")
    params = build_encoder_params(cfg)
    params["encoder.unet.down0.convert.fc2.weight"] = Tensor(np.random.default_rng(0).normal(size=(4, 4)))
    idx = CloudIndex(cloud(), "volume", 8)
    grid = _random_grid("volume", 8, 4, 2)
    on, p = alto_block(grid, idx, Tensor(np.ones((40, 4))), params, "encoder.unet.down0")
    off, _ = alto_block(grid, idx, None, params, "encoder.unet.down0", alternate=False)
    assert p.shape == (40, 4)
    assert not np.array_equal(on.data.data, off.data.data)


def test_block_mismatches():
    cfg = small("volume")
    params = build_encoder_params(cfg)
    idx = CloudIndex(cloud(), "volume", 8)
    with pytest.raises(ConfigError):
        alto_block(_random_grid("volume", 8, 5, 0), idx, None, params, "encoder.unet.down0")
    with pytest.raises(ConfigError):
        alto_block(_random_grid("volume", 8, 4, 0), idx, None, params, "encoder.unet.down0", expected_resolution=4)
    with pytest.raises(ConfigError):
        alto_block(_random_grid("triplane", 8, 4, 0), idx, None, params, "encoder.unet.down0")


# -- U-Net ----------------------------------------------------------------------


def plain_unet(x, params, depth, resample, padding):
    """Conv-only U-Net written directly against the parameter names."""

    def c(name, t, stride=1):
        return ops.relu(ops.conv(t, params[name + ".weight"], params[name + ".bias"], stride=stride, padding=padding))

    def block(name, t):
        return c(name + ".conv2", c(name + ".conv1", t))

    skips = []
    for level in range(depth):
        if level and resample[level]:
            x = c(f"encoder.unet.down{level}.resample", x, stride=2)
        x = block(f"encoder.unet.down{level}", x)
        skips.append(x)
    for level in range(depth - 2, -1, -1):
        if resample[level + 1]:
            x = c(f"encoder.unet.up{level}.upconv", ops.upsample_nearest(x, x.ndim - 2))
        x = ops.concat([x, skips[level]], axis=-1)
        x = ops.linear(x, params[f"encoder.unet.up{level}.merge.weight"], params[f"encoder.unet.up{level}.merge.bias"])
        x = block(f"encoder.unet.up{level}", x)
    return x


@pytest.mark.parametrize("kind", ["volume", "triplane"])
@pytest.mark.parametrize("ntop", [1, 2])
def test_zero_alternations_is_plain_unet(kind, ntop):
    cfg = small(kind, alternation_count=0, no_resample_top_levels=ntop, padding="circular")
    params = build_encoder_params(cfg, seed=3)
    grid = _random_grid(kind, 8, 4, 3)
    out = alto_unet(grid, None, CloudIndex(cloud(), kind, 8), params, cfg)
    x = grid.data if kind == "triplane" else ops.reshape(grid.data, (1,) + grid.data.shape)
    resample = [cfg.resamples_into(level) for level in range(3)]
    ref = plain_unet(x, params, 3, resample, "circular")
    np.testing.assert_array_equal(out.data.data.reshape(ref.shape), ref.data)


def test_unet_rejects_wrong_grid():
    cfg = small("volume")
    with pytest.raises(ConfigError):
        alto_unet(_random_grid("volume", 16, 4, 0), None, CloudIndex(cloud(), "volume", 8), build_encoder_params(cfg), cfg)


# -- encode ---------------------------------------------------------------------


def test_encode_triplane_default_shape():
    cfg = EncoderConfig(mode="triplane")
    grid = encode(cloud(300), build_encoder_params(cfg), cfg)
    assert grid.data.shape == (3, 64, 64, 32)


def test_encode_volume_default_shape():
    cfg = EncoderConfig(mode="volume")
    grid = encode(cloud(300), build_encoder_params(cfg, dtype=np.float32), cfg)
    assert grid.data.shape == (64, 64, 64, 32)


@pytest.mark.parametrize("mode", ["volume", "triplane"])
def test_encode_permutation_invariant_and_deterministic(mode):
    cfg = small(mode)
    params = build_encoder_params(cfg, seed=2)
    for k in params:
        if k.endswith("convert.fc2.weight"):
            params[k] = Tensor(np.random.default_rng(9).normal(size=params[k].shape))
    pts = cloud(80)
    a = encode(pts, params, cfg).data.data
    np.testing.assert_array_equal(a, encode(pts, params, cfg).data.data)
    perm = np.random.default_rng(1).permutation(80)
    np.testing.assert_allclose(encode(pts[perm], params, cfg).data.data, a, atol=1e-12, rtol=0)


def _roll(data, kind, s):
    axes = (1, 2) if kind == "triplane" else (0, 1, 2)
    return np.roll(data, (s,) * len(axes), axis=axes)


@pytest.mark.parametrize("mode", ["volume", "triplane"])
@pytest.mark.parametrize("ntop,shift", [(2, 2), (1, 4)])
def test_encode_shift_equivariance(mode, ntop, shift):
    R = 16
    cfg = EncoderConfig(mode=mode, resolution=R, feature_dim=4, unet_depth=3, no_resample_top_levels=ntop, padding="circular")
    params = build_encoder_params(cfg, seed=4)
    for k in params:
        if k.endswith("convert.fc2.weight"):
            params[k] = Tensor(np.random.default_rng(5).normal(size=params[k].shape))
    h = 1 / (R - 1)
    pts = cloud(120, seed=6, lo=3 * h, hi=(R - 1 - 3 - shift) * h)
    a = encode(pts, params, cfg).data.data
    b = encode(pts + shift * h, params, cfg).data.data
    assert np.max(np.abs(_roll(a, mode, shift) - b)) < 1e-9


@pytest.mark.parametrize("mode", ["volume", "triplane"])
def test_encode_gradients(mode):
    cfg = small(mode)
    params = build_encoder_params(cfg, seed=7)
    rng = np.random.default_rng(8)
    for k in params:
        # zero biases put empty-region activations exactly on ReLU kinks
        if k.endswith("convert.fc2.weight") or k.endswith(".bias"):
            params[k] = Tensor(rng.normal(size=params[k].shape) * 0.5)
    names = list(params)
    pts = cloud(30, seed=9)
    idx = CloudIndex(pts, mode, 8)
    w = Tensor(np.random.default_rng(10).normal(size=grid_shape(mode, 8, 4)))

    def f(*arrays):
        return (encode(pts, dict(zip(names, arrays)), cfg, cloud=idx).data * w).sum()

    assert grad_check(f, [params[k].data for k in names], max_coords=3) < 1e-3
