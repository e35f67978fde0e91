import itertools

import numpy as np
import pytest

from alto.ad import Tensor, grad_check
from alto.convert import PLANE_AXES, FeatureGrid, grid_shape, interpolate_bilinear, interpolate_trilinear
from alto.decoder import (
    DecoderConfig,
    attention_interpolate,
    build_decoder_params,
    linear_interpolate_feature,
    neighbor_indices,
    neighbor_patch,
    occupancy_head,
    predict_occupancy,
)
from alto.errors import ConfigError
from alto.geometry import QueryBatch
from oracles import attention_loops, bilinear_loops, nearest_index, trilinear_loops


def grid(kind, R=5, d=4, seed=0):
    return FeatureGrid(kind, Tensor(np.random.default_rng(seed).normal(size=grid_shape(kind, R, d))))


def randomized(params, seed=0, scale=0.5):
    rng = np.random.default_rng(seed)
    return {k: Tensor(rng.normal(size=v.shape) * scale, requires_grad=True) for k, v in params.items()}


# -- neighbor patches -----------------------------------------------------------


def test_patch_sizes():
    for kind, m in (("triplane", 9), ("volume", 27)):
        rows, disp = neighbor_indices(np.random.default_rng(0).random((6, 3)), 8, kind)
        assert rows.shape[1] == m
        assert disp.shape[-1] == (2 if kind == "triplane" else 3)


def test_patch_interior_node_displacements():
    R = 9
    q = np.array([[4, 3, 5]]) / (R - 1)
    rows, disp = neighbor_indices(q, R, "volume")
    assert np.any(np.all(np.abs(disp[0, :, 0]) < 1e-12, axis=-1))
    assert np.abs(disp).max() <= 1.0 + 1e-12
    rng = np.random.default_rng(1)
    _, disp = neighbor_indices(rng.random((50, 3)) * 0.8 + 0.1, R, "triplane")
    assert np.abs(disp).max() <= 1.5


@pytest.mark.parametrize("kind", ["triplane", "volume"])
def test_patch_corner_clamped(kind):
    R = 6
    rows, disp = neighbor_indices(np.zeros((1, 3)), R, kind)
    n_nodes = 3 * R * R if kind == "triplane" else R**3
    assert rows.min() >= 0 and rows.max() < n_nodes
    # every clamped node lies at or above the corner query
    assert np.all((disp <= 1e-12) & (disp >= -1 - 1e-12))


def _patch_oracle(q, R, axes):
    """Lexicographic 3^k patch around the nearest node, clamped, with cell displacements."""
    near = [nearest_index(q[a], R) for a in axes]
    nodes, disp = [], []
    for off in itertools.product((-1, 0, 1), repeat=len(axes)):
        node = [min(max(near[i] + off[i], 0), R - 1) for i in range(len(axes))]
        nodes.append(node)
        disp.append([q[a] * (R - 1) - node[i] for i, a in enumerate(axes)])
    return nodes, np.array(disp)


@pytest.mark.parametrize("kind", ["triplane", "volume"])
def test_neighbor_patch_matches_enumeration(kind):
    R = 5
    g = grid(kind, R)
    data = g.data.data
    q = np.random.default_rng(3).random((10, 3))
    q[0] = [1.0, 0.0, 1.0]
    feats, disp = neighbor_patch(g, q)
    for n, p in enumerate(q):
        planes = PLANE_AXES if kind == "triplane" else [(0, 1, 2)]
        for k, axes in enumerate(planes):
            nodes, dd = _patch_oracle(p, R, axes)
            ref = np.stack([data[k][tuple(nd)] if kind == "triplane" else data[tuple(nd)] for nd in nodes])
            np.testing.assert_array_equal(feats.data[n, :, k], ref)
            np.testing.assert_allclose(disp[n, :, k], dd, atol=1e-12)


# -- linear interpolation decode ------------------------------------------------


def test_linear_interp_feature():
    g = grid("triplane", 5, 3)
    q = np.random.default_rng(4).random((7, 3))
    out = linear_interpolate_feature(g, q).data
    want = np.concatenate([interpolate_bilinear(g.data.data[p], q[:, ax]).data for p, ax in enumerate(PLANE_AXES)], 1)
    np.testing.assert_allclose(out, want, atol=1e-14)
    v = grid("volume", 4, 3)
    np.testing.assert_array_equal(linear_interpolate_feature(v, q).data, interpolate_trilinear(v.data.data, q).data)
    const = FeatureGrid("volume", Tensor(np.full((4, 4, 4, 2), 1.5)))
    np.testing.assert_allclose(linear_interpolate_feature(const, q).data, 1.5)
    node = np.array([[1, 2, 3]]) / 3
    np.testing.assert_allclose(linear_interpolate_feature(v, node).data[0], v.data.data[1, 2, 3], atol=1e-14)


# -- attention ------------------------------------------------------------------


def _group_params(params, g):
    t = lambda name: params[f"decoder.attn.{name}"].data[g]  # noqa: E731
    return {
        "wq": t("query.weight"), "bq": t("query.bias"),
        "wk": t("key.weight"), "bk": t("key.bias"),
        "wv": t("value.weight"), "bv": t("value.bias"),
        "wg1": t("pos.fc1.weight"), "bg1": t("pos.fc1.bias"),
        "wg2": t("pos.fc2.weight"), "bg2": t("pos.fc2.bias"),
        "ws1": t("score.fc1.weight"), "bs1": t("score.fc1.bias"),
        "ws2": t("score.fc2.weight"), "bs2": t("score.fc2.bias"),
    }  # fmt: skip


@pytest.mark.parametrize("seed", range(20))
def test_attention_matches_loop_oracle(seed):
    kind = "triplane" if seed % 2 else "volume"
    cfg = DecoderConfig(mode=kind, feature_dim=4, heads=1 + seed % 3)
    params = randomized(build_decoder_params(cfg), seed)
    R = 4
    g = grid(kind, R, 4, seed)
    data = g.data.data
    q = np.random.default_rng(seed + 50).random((5, 3))
    got = attention_interpolate(g, q, params, cfg).data
    for n, p in enumerate(q):
        parts = []
        for grp in range(cfg.groups):
            if kind == "triplane":
                axes = PLANE_AXES[grp]
                psi = bilinear_loops(data[grp], p[axes[0]], p[axes[1]])
                nodes, disp = _patch_oracle(p, R, axes)
                patch = np.stack([data[grp][tuple(nd)] for nd in nodes])
            else:
                psi = trilinear_loops(data, p)
                nodes, disp = _patch_oracle(p, R, (0, 1, 2))
                patch = np.stack([data[tuple(nd)] for nd in nodes])
            parts.append(attention_loops(psi, patch, disp, _group_params(params, grp)))
        np.testing.assert_allclose(got[n], np.concatenate(parts), atol=1e-12)


@pytest.mark.parametrize("kind", ["triplane", "volume"])
def test_uniform_attention_closed_form(kind):
    cfg = DecoderConfig(mode=kind, feature_dim=4, heads=2)
    params = randomized(build_decoder_params(cfg), 1)
    b = np.random.default_rng(2).normal(size=params["decoder.attn.pos.fc2.bias"].shape)
    params["decoder.attn.pos.fc1.weight"] = Tensor(np.zeros_like(params["decoder.attn.pos.fc1.weight"].data))
    params["decoder.attn.pos.fc2.weight"] = Tensor(np.zeros_like(params["decoder.attn.pos.fc2.weight"].data))
    params["decoder.attn.pos.fc2.bias"] = Tensor(b)
    c = np.array([0.3, -1.0, 2.0, 0.5])
    shape = grid_shape(kind, 5, 4)
    g = FeatureGrid(kind, Tensor(np.broadcast_to(c, shape).copy()))
    wv, bv = params["decoder.attn.value.weight"].data, params["decoder.attn.value.bias"].data
    v = np.stack([c @ wv[k] + bv[k] for k in range(cfg.groups)])
    out = attention_interpolate(g, np.random.default_rng(3).random((6, 3)), params, cfg).data
    np.testing.assert_allclose(out, np.tile((v + b).reshape(-1), (6, 1)), atol=1e-12)


@pytest.mark.parametrize("kind", ["triplane", "volume"])
def test_attention_invariant_to_neighbor_order(kind, monkeypatch):
    import alto.decoder as dec

    cfg = DecoderConfig(mode=kind, feature_dim=4, heads=2)
    params = randomized(build_decoder_params(cfg), 4)
    g = grid(kind, 5, 4, 5)
    q = np.random.default_rng(6).random((8, 3))
    base = attention_interpolate(g, q, params, cfg).data
    original = dec.neighbor_indices
    perm = np.random.default_rng(7).permutation(cfg.neighborhood)

    def shuffled(points, resolution, kind):
        rows, disp = original(points, resolution, kind)
        return rows[:, perm], disp[:, perm]

    monkeypatch.setattr(dec, "neighbor_indices", shuffled)
    np.testing.assert_allclose(attention_interpolate(g, q, params, cfg).data, base, atol=1e-13)


def test_attention_weights_normalized():
    from alto.ad import ops

    logits = Tensor(np.random.default_rng(0).normal(size=(10, 27, 2, 4)) * 10)
    a = ops.softmax(logits, axis=1).data
    assert np.all(a > 0)
    np.testing.assert_allclose(a.sum(axis=1), 1.0, atol=1e-12)


def test_attention_param_mismatch():
    cfg = DecoderConfig(mode="volume", feature_dim=4, heads=1)
    params = build_decoder_params(cfg)
    with pytest.raises(ConfigError):
        attention_interpolate(grid("volume", 4, 6), np.zeros((1, 3)), params, DecoderConfig(mode="volume", feature_dim=6, heads=1))
    with pytest.raises(ConfigError):
        attention_interpolate(grid("triplane", 4, 4), np.zeros((1, 3)), params, cfg)


# -- head -----------------------------------------------------------------------


def test_head_range_zero_params_and_batching():
    cfg = DecoderConfig(mode="triplane", feature_dim=4)
    params = randomized(build_decoder_params(cfg), 0)
    F = np.random.default_rng(1).normal(size=(6, 12))
    out = occupancy_head(Tensor(F), params).data
    assert out.shape == (6,) and np.all((out > 0) & (out < 1))
    np.testing.assert_allclose(occupancy_head(Tensor(F[2:3]), params).data[0], out[2], rtol=0, atol=1e-15)
    zeros = {k: Tensor(np.zeros_like(v.data)) for k, v in params.items()}
    np.testing.assert_array_equal(occupancy_head(Tensor(F), zeros).data, 0.5)
    with pytest.raises(ConfigError):
        occupancy_head(Tensor(np.zeros((2, 5))), params)


def test_head_width_is_feature_width():
    for cfg in (
        DecoderConfig(mode="triplane", feature_dim=4),
        DecoderConfig(mode="volume", feature_dim=4, heads=3),
        DecoderConfig(mode="volume", feature_dim=4, decode_mode="linear-interp"),
    ):
        params = build_decoder_params(cfg)
        assert params["decoder.head.out.weight"].shape[0] == cfg.head_width


@pytest.mark.parametrize("kind", ["triplane", "volume"])
def test_decoder_translation_with_circular_shift(kind):
    R = 8
    cfg = DecoderConfig(mode=kind, feature_dim=3, heads=2)
    params = randomized(build_decoder_params(cfg), 8)
    g = grid(kind, R, 3, 9)
    h = 1 / (R - 1)
    q = 2 * h + np.random.default_rng(10).random((10, 3)) * 2 * h
    axes = (1, 2) if kind == "triplane" else (0, 1, 2)
    shifted = FeatureGrid(kind, Tensor(np.roll(g.data.data, (2,) * len(axes), axis=axes)))
    a = predict_occupancy(g, q, params, cfg).data
    b = predict_occupancy(shifted, q + 2 * h, params, cfg).data
    assert np.max(np.abs(a - b)) < 1e-9


# -- end to end -----------------------------------------------------------------


@pytest.mark.parametrize("mode", ["attention", "linear-interp"])
def test_predict_shapes_determinism_and_chunking(mode):
    cfg = DecoderConfig(mode="triplane", feature_dim=4, decode_mode=mode)
    params = randomized(build_decoder_params(cfg), 11)
    g = grid("triplane", 6, 4, 12)
    q = QueryBatch(np.random.default_rng(13).random((25, 3)))
    a = predict_occupancy(g, q, params, cfg).data
    assert a.shape == (25,)
    np.testing.assert_array_equal(a, predict_occupancy(g, q, params, cfg).data)
    np.testing.assert_allclose(predict_occupancy(g, q, params, cfg, chunk_size=7).data, a, atol=1e-15)


@pytest.mark.parametrize("kind", ["triplane", "volume"])
def test_decoder_gradients(kind):
    cfg = DecoderConfig(mode=kind, feature_dim=4, heads=2, occupancy_blocks=2)
    params = randomized(build_decoder_params(cfg), 14)
    names = list(params)
    g0 = np.random.default_rng(15).normal(size=grid_shape(kind, 4, 4))
    q = np.random.default_rng(16).random((6, 3))

    def f(gd, *ws):
        return predict_occupancy(FeatureGrid(kind, gd), q, dict(zip(names, ws)), cfg).sum()

    assert grad_check(f, [g0] + [params[k].data for k in names], max_coords=6) < 1e-4
