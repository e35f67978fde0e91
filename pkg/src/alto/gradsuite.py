"""Finite-difference checks of every differentiable piece of the pipeline.

Each check builds a scalar function of float64 arrays, compares reverse-mode
gradients with central differences and reports the worst relative error.
Smooth kernels must agree to 1e-6; anything routed through a ReLU or a max
gets 1e-4; the full encode -> decode -> loss graph gets 1e-3.

Central differences carry round-off of about ``ulp(f) / eps``. Gradients
smaller than that noise divided by the tolerance cannot be resolved
relatively, so they are held to the noise level in absolute terms instead.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from alto.ad import Tensor, grad_check, no_grad, ops
from alto.convert import FeatureGrid, grid_shape, interpolate_bilinear, interpolate_trilinear, point_to_grid, scatter_mean
from alto.decoder import DecoderConfig, attention_interpolate, build_decoder_params, occupancy_head, predict_occupancy
from alto.encoder import CloudIndex, EncoderConfig, build_encoder_params, encode
from alto.layers import ParamBuilder

SMOOTH_TOL = 1e-6
KINK_TOL = 1e-4
COMPOSITE_TOL = 1e-3
FD_EPS = 1e-6
SCOPES = ("kernels", "encoder", "decoder", "all")


@dataclass
class CheckResult:
    name: str
    scope: str
    max_rel_err: float
    tol: float
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_err < self.tol)


def _rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)


def _cloud(n: int, seed: int, lo: float = 0.05, hi: float = 0.95) -> np.ndarray:
    return _rng(seed).uniform(lo, hi, size=(n, 3))


def _weighted(t: Tensor, seed: int) -> Tensor:
    """Random linear functional of ``t``; makes every output coordinate matter."""
    return ops.sum(ops.mul(t, Tensor(_rng(seed).normal(size=t.shape))))


def _jitter_biases(params: dict, seed: int) -> dict:
    # zero biases park empty-region activations exactly on ReLU kinks,
    # where one-sided and central differences disagree
    rng = _rng(seed)
    out = dict(params)
    for k, v in params.items():
        if k.endswith(".bias") or k.endswith("convert.fc2.weight"):
            out[k] = Tensor(rng.normal(size=v.shape) * 0.5)
    return out


def _kernel_checks() -> list[tuple[str, float, Callable, list, int | None]]:
    r = _rng(0)
    checks = []

    def add(name, tol, f, inputs, max_coords=None):
        checks.append((name, tol, f, inputs, max_coords))

    add("linear", SMOOTH_TOL, lambda x, w, b: _weighted(ops.linear(x, w, b), 1), [r.normal(size=s) for s in [(5, 4), (4, 3), (3,)]])
    add("matmul", SMOOTH_TOL, lambda x, w: _weighted(ops.matmul(x, w), 2), [r.normal(size=s) for s in [(5, 4), (4, 3)]])
    add(
        "grouped_linear",
        SMOOTH_TOL,
        lambda x, w, b: _weighted(ops.grouped_linear(x, w, b), 3),
        [r.normal(size=s) for s in [(4, 3, 2, 5), (2, 5, 3), (2, 3)]],
    )
    add("add_mul", SMOOTH_TOL, lambda a, b: _weighted(ops.mul(ops.add(a, b), b), 4), [r.normal(size=(3, 4)), r.normal(size=(4,))])
    add("sub_scale", SMOOTH_TOL, lambda a, b: _weighted(ops.scale(ops.sub(a, b), 1.7), 5), [r.normal(size=(3, 4)), r.normal(size=(3, 1))])
    add("sigmoid", SMOOTH_TOL, lambda x: _weighted(ops.sigmoid(x), 6), [r.normal(size=(6, 2))])
    add("log", SMOOTH_TOL, lambda x: _weighted(ops.log(x), 7), [r.uniform(0.5, 2.0, size=(6,))])
    # keep inputs away from 0 so no probe crosses the kink
    relu_in = r.normal(size=(5, 4))
    relu_in += np.sign(relu_in) * 0.1
    add("relu", KINK_TOL, lambda x: _weighted(ops.relu(x), 8), [relu_in])
    abs_in = r.normal(size=(5,))
    abs_in += np.sign(abs_in) * 0.1
    add("abs", KINK_TOL, lambda x: _weighted(ops.abs(x), 9), [abs_in])
    add("sum_mean", SMOOTH_TOL, lambda x: ops.add(_weighted(ops.sum(x, axis=1), 10), ops.mean(ops.mul(x, x))), [r.normal(size=(3, 4))])
    add("softmax", SMOOTH_TOL, lambda x: _weighted(ops.softmax(x, axis=1), 11), [r.normal(size=(3, 5, 2))])
    add("concat_transpose", SMOOTH_TOL, lambda a, b: _weighted(ops.transpose(ops.concat([a, b], axis=1), (1, 0)), 12),
        [r.normal(size=(3, 2)), r.normal(size=(3, 4))])
    for dims in (2, 3):
        spatial = (5,) * dims
        for stride in (1, 2):
            for padding in ("zero", "circular"):
                add(
                    f"conv{dims}d_s{stride}_{padding}",
                    SMOOTH_TOL,
                    lambda x, w, b, stride=stride, padding=padding: _weighted(ops.conv(x, w, b, stride=stride, padding=padding), 13),
                    [r.normal(size=(1, *spatial, 2)), r.normal(size=(3,) * dims + (2, 3)), r.normal(size=(3,))],
                    40,
                )
        add(f"upsample{dims}d", SMOOTH_TOL, lambda x, dims=dims: _weighted(ops.upsample_nearest(x, dims), 14), [r.normal(size=(1, *(3,) * dims, 2))])
    uv = r.random((7, 2))
    add("bilinear", SMOOTH_TOL, lambda g: _weighted(interpolate_bilinear(g, uv), 15), [r.normal(size=(4, 5, 3))])
    xyz = r.random((7, 3))
    add("trilinear", SMOOTH_TOL, lambda g: _weighted(interpolate_trilinear(g, xyz), 16), [r.normal(size=(4, 4, 4, 3))])
    pts = r.random((9, 3))
    for kind in ("volume", "triplane"):
        add(f"scatter_mean_{kind}", SMOOTH_TOL, lambda f, kind=kind: _weighted(scatter_mean(pts, f, 4, kind).data, 17), [r.normal(size=(9, 3))])

    b = ParamBuilder(_rng(18))
    b.mlp2("p2g", 3, 4, 3)
    names = list(b.params)
    p2g_params = _jitter_biases(b.params, 19)

    def p2g(f, *ws):
        grid, _ = point_to_grid(pts, f, dict(zip(names, ws)), "p2g", 4, "volume")
        return _weighted(grid.data, 20)

    add("point_to_grid_mlp", KINK_TOL, p2g, [r.normal(size=(9, 3))] + [p2g_params[k].data for k in names])

    y = r.integers(0, 2, size=8).astype(np.float64)
    add("bce", SMOOTH_TOL, lambda p: ops.binary_cross_entropy(p, y), [r.uniform(0.05, 0.95, size=8)])
    return checks


def _attention_checks() -> list:
    checks = []
    for mode in ("triplane", "volume"):
        cfg = DecoderConfig(mode=mode, feature_dim=3, heads=2, occupancy_blocks=1)
        params = _jitter_biases(build_decoder_params(cfg, seed=21), 22)
        names = [k for k in params if ".head." not in k]
        q = _rng(23).random((5, 3))
        g0 = _rng(24).normal(size=grid_shape(mode, 4, 3))

        def att(g, *ws, mode=mode, cfg=cfg, names=names, q=q):
            return _weighted(attention_interpolate(FeatureGrid(mode, g), q, dict(zip(names, ws)), cfg), 25)

        checks.append((f"attention_{mode}", KINK_TOL, att, [g0] + [params[k].data for k in names], 6))

        head_names = [k for k in params if ".head." in k]
        width = cfg.head_width

        def head(x, *ws, head_names=head_names):
            return _weighted(occupancy_head(x, dict(zip(head_names, ws))), 26)

        checks.append((f"occupancy_head_{mode}", KINK_TOL, head, [_rng(27).normal(size=(4, width)) * 0.5] + [params[k].data for k in head_names], 6))
    return checks


def _encoder_checks() -> list:
    checks = []
    for mode in ("triplane", "volume"):
        cfg = EncoderConfig(mode=mode, resolution=8, feature_dim=4, unet_depth=2, no_resample_top_levels=1, pointnet_blocks=2)
        params = _jitter_biases(build_encoder_params(cfg, seed=28), 29)
        names = list(params)
        pts = _cloud(30, 30)
        idx = CloudIndex(pts, mode, 8)

        def f(*ws, cfg=cfg, names=names, pts=pts, idx=idx):
            return _weighted(encode(pts, dict(zip(names, ws)), cfg, cloud=idx).data, 31)

        checks.append((f"encode_{mode}", COMPOSITE_TOL, f, [params[k].data for k in names], 3))
    return checks


def _decoder_checks() -> list:
    checks = []
    for mode in ("triplane", "volume"):
        for decode_mode in ("attention", "linear-interp"):
            cfg = DecoderConfig(mode=mode, feature_dim=3, heads=2, occupancy_blocks=2, decode_mode=decode_mode)
            params = _jitter_biases(build_decoder_params(cfg, seed=32), 33)
            names = list(params)
            q = _rng(34).random((6, 3))
            y = (_rng(35).random(6) < 0.5).astype(np.float64)

            def f(g, *ws, mode=mode, cfg=cfg, names=names, q=q, y=y):
                pred = predict_occupancy(FeatureGrid(mode, g), q, dict(zip(names, ws)), cfg)
                return ops.binary_cross_entropy(pred, y)

            g0 = _rng(36).normal(size=grid_shape(mode, 4, 3))
            checks.append((f"decode_{mode}_{decode_mode}", KINK_TOL, f, [g0] + [params[k].data for k in names], 6))
    return checks


def composite_checks(feature_dim: int = 8, resolution: int = 16) -> list:
    """encode -> decode -> BCE on the full parameter set of a small model."""
    checks = []
    for mode in ("triplane", "volume"):
        enc = EncoderConfig(mode=mode, resolution=resolution, feature_dim=feature_dim, unet_depth=3, no_resample_top_levels=1, pointnet_blocks=2)
        dec = DecoderConfig(mode=mode, feature_dim=feature_dim, heads=2, occupancy_blocks=1)
        params = build_encoder_params(enc, seed=37)
        params.update(build_decoder_params(dec, seed=38))
        params = _jitter_biases(params, 39)
        names = list(params)
        pts = _cloud(60, 40, 0.2, 0.8)
        idx = CloudIndex(pts, mode, resolution)
        q = _rng(41).random((16, 3))
        y = (np.linalg.norm(q - 0.5, axis=1) < 0.3).astype(np.float64)

        def f(*ws, enc=enc, dec=dec, names=names, pts=pts, idx=idx, q=q, y=y):
            p = dict(zip(names, ws))
            grid = encode(pts, p, enc, cloud=idx)
            return ops.binary_cross_entropy(predict_occupancy(grid, q, p, dec), y)

        checks.append((f"composite_{mode}_d{feature_dim}_R{resolution}", COMPOSITE_TOL, f, [params[k].data for k in names], 2))
    return checks


def gradient_suite(scope: str = "all") -> list[CheckResult]:
    if scope not in SCOPES:
        raise ValueError(f"scope must be one of {SCOPES}, got {scope!r}")
    groups: list[tuple[str, list]] = []
    if scope in ("kernels", "all"):
        groups.append(("kernels", _kernel_checks()))
    if scope in ("decoder", "all"):
        groups.append(("decoder", _attention_checks() + _decoder_checks()))
    if scope in ("encoder", "all"):
        groups.append(("encoder", _encoder_checks()))
    if scope == "all":
        groups.append(("composite", composite_checks()))
    results = []
    for group, checks in groups:
        for name, tol, f, inputs, max_coords in checks:
            t0 = time.perf_counter()
            with no_grad():
                value = abs(f(*[Tensor(np.asarray(x)) for x in inputs]).item())
            noise = 8 * np.finfo(np.float64).eps * max(value, 1.0) / (2 * FD_EPS)
            err = grad_check(f, inputs, eps=FD_EPS, max_coords=max_coords, floor=max(1e-8, noise / tol))
            results.append(CheckResult(name, group, float(err), tol, time.perf_counter() - t0))
    return results
