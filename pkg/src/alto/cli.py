"""Command-line entry point: ``alto <command> [options]``.

Commands read an optional JSON run config (see ``alto.config``), apply
``--set section.key=value`` overrides and command flags, and write the
effective config next to their outputs. Exit codes: 0 success, 2 usage or
configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from alto.ad import no_grad
from alto.config import RunConfig, apply_overrides, dump_config, load_config
from alto.errors import CheckpointError, ConfigError, ContractError, NonFiniteError
from alto.geometry import add_noise, labeled_queries, make_rng, normalize_cloud, occupancy_oracle, sample_surface, sample_surface_with_normals
from alto.mesh import evaluate_grid, marching_cubes, refine_vertices
from alto.mesh.io import read_obj, read_xyz, write_obj, write_xyz
from alto.mesh.metrics import (
    chamfer_l1_samples,
    fscore_samples,
    mesh_occupancy,
    metric_iou,
    normal_consistency_samples,
    sample_mesh,
)
from alto.train import DTYPES, Model, checkpoint_load, checkpoint_save, fit, model_from_checkpoint

log = logging.getLogger("alto")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
LOSS_HEADER = ["step", "loss_sum", "loss_mean"]
BENCH_HEADER = ["stage", "size", "seconds"]


class UsageError(Exception):
    pass


# -- shared helpers -------------------------------------------------------------


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    return _with_overrides(cfg, args)


def _with_overrides(cfg: RunConfig, args) -> RunConfig:
    sets = list(getattr(args, "set", None) or [])
    for flag, key in getattr(args, "_flag_keys", []):
        value = getattr(args, flag, None)
        if value is not None:
            sets.append(f"{key}={json.dumps(value)}")
    return apply_overrides(cfg, sets) if sets else cfg


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc}") from None
    if not os.access(out, os.W_OK):
        raise UsageError(f"output directory {out} is not writable")
    return out


def _derived_seeds(seed: int, index: int, n: int) -> list[int]:
    seq = np.random.SeedSequence([seed, index])
    return [int(s) for s in seq.generate_state(n, dtype=np.uint32)]


def _fmt(x: float) -> str:
    return repr(float(x))


# -- generate-data --------------------------------------------------------------


def cmd_generate_data(args) -> int:
    cfg = _run_config(args)
    out = _out_dir(args.out)
    files = []
    for i, spec in enumerate(cfg.shapes):
        s_surface, s_noise, s_query = _derived_seeds(cfg.data.seed, i, 3)
        pts = add_noise(sample_surface(spec, cfg.data.num_points, s_surface), cfg.data.noise_sigma, s_noise)
        xyz = f"{spec.name}.xyz"
        write_xyz(out / xyz, pts, header=f"shape {spec.name}; surface seed {s_surface}; noise seed {s_noise}")
        files.append({"path": xyz, "kind": "points", "shape": spec.name, "seed": s_surface, "noise_seed": s_noise})
        q = labeled_queries(spec, cfg.data.num_queries, s_query)
        qname = f"{spec.name}_queries.csv"
        with open(out / qname, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x", "y", "z", "occupancy"])
            for (x, y, z), label in zip(q.coords.tolist(), q.labels.tolist()):
                w.writerow([_fmt(x), _fmt(y), _fmt(z), int(label)])
        files.append({"path": qname, "kind": "queries", "shape": spec.name, "seed": s_query})
    manifest = {"files": files, "config": cfg.to_dict()}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    dump_config(cfg, out / "config.json")
    print(f"wrote {len(files)} files to {out}")
    return EXIT_OK


# -- train ----------------------------------------------------------------------


def _write_loss_rows(path: Path, rows, append: bool) -> None:
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if not append:
            w.writerow(LOSS_HEADER)
        for r in rows:
            w.writerow([r.step, _fmt(r.loss_sum), _fmt(r.loss_mean)])


def cmd_train(args) -> int:
    cfg = _run_config(args)
    out = _out_dir(args.out)
    dump_config(cfg, out / "config.json")
    ckpt_config = cfg.to_dict()
    start, state = 0, None
    if args.resume:
        ck = checkpoint_load(args.resume)
        if ck.config.get("model") != cfg.model_dict():
            raise ConfigError(f"checkpoint {args.resume} was trained with a different model config")
        if ck.adam is None:
            raise ConfigError(f"checkpoint {args.resume} has no optimizer state to resume from")
        model = model_from_checkpoint(ck)
        if model.dtype != DTYPES[cfg.train.dtype]:
            raise ConfigError(f"checkpoint dtype {model.dtype} differs from train.dtype {cfg.train.dtype}")
        start, state = ck.step, ck.adam
    else:
        model = Model.build(cfg.encoder, cfg.decoder, seed=cfg.train.seed, dtype=DTYPES[cfg.train.dtype])

    loss_path = out / "loss.csv"
    if not (args.resume and loss_path.exists()):
        _write_loss_rows(loss_path, [], append=False)
    interval = cfg.train.checkpoint_interval

    def on_step(record, m, st):
        _write_loss_rows(loss_path, [record], append=True)
        if interval and record.step % interval == 0:
            checkpoint_save(out / f"ckpt_{record.step:06d}.ckpt", m.params, st, ckpt_config, record.step)

    # train.steps is the total step count, so a resumed run only does the rest
    run_cfg = dataclasses.replace(cfg.train, steps=max(0, cfg.train.steps - start))
    result = fit(cfg.shape(), model, run_cfg, state=state, start_step=start, on_step=on_step)
    final = out / "model.ckpt"
    checkpoint_save(final, model.params, result.state, ckpt_config, result.step)
    if result.history:
        print(f"steps {start}..{result.step}; final mean loss {result.history[-1].loss_mean:.6f}; wrote {final}")
    else:
        print(f"no steps to run (at step {result.step}); wrote {final}")
    return EXIT_OK


# -- reconstruct ----------------------------------------------------------------


def reconstruct_mesh(model: Model, raw_points: np.ndarray, mesh_cfg):
    """Encode a raw cloud, extract the threshold surface and map it back to raw coordinates."""
    if mesh_cfg.normalize:
        cloud = normalize_cloud(raw_points, mesh_cfg.padding)
        pts = cloud.points
    else:
        cloud = None
        pts = np.asarray(raw_points, dtype=np.float64)
        if pts.min() < 0.0 or pts.max() > 1.0:
            raise ContractError("without normalization the cloud must lie in [0, 1]^3")
    with no_grad():
        grid = model.encode(pts)
    volume = evaluate_grid(grid, model.params, model.decoder, mesh_cfg.resolution, mesh_cfg.chunk_size, mesh_cfg.threshold)
    mesh = marching_cubes(volume)
    if mesh_cfg.refine_iters > 0 and not mesh.is_empty:

        def predictor(q):
            with no_grad():
                return model.predict(grid, q, chunk_size=mesh_cfg.chunk_size).data

        mesh = refine_vertices(mesh, predictor, mesh_cfg.threshold, mesh_cfg.refine_iters)
    if cloud is not None:
        mesh.vertices = cloud.to_raw(mesh.vertices)
    return mesh


def cmd_reconstruct(args) -> int:
    ck = checkpoint_load(args.checkpoint)
    if args.config:
        cfg = load_config(args.config)
        if cfg.model_dict() != ck.config.get("model"):
            raise ConfigError(f"config {args.config} describes a different model than checkpoint {args.checkpoint}")
    else:
        try:
            cfg = RunConfig.from_dict(ck.config)
        except ConfigError as exc:
            raise ConfigError(f"checkpoint config is not a valid run config: {exc}") from None
    model = model_from_checkpoint(ck)
    cfg = _with_overrides(cfg, args)
    points = read_xyz(args.input)
    mesh = reconstruct_mesh(model, points, cfg.mesh)
    out = Path(args.out)
    _out_dir(out.parent if str(out.parent) else ".")
    write_obj(out, mesh)
    dump_config(cfg, out.with_suffix(".config.json"))
    print(f"wrote {out}: {len(mesh.vertices)} vertices, {len(mesh.faces)} faces")
    return EXIT_OK


# -- eval -----------------------------------------------------------------------


def evaluate_mesh(mesh, reference, cfg: RunConfig) -> dict:
    """Metrics of ``mesh`` against a reference mesh or an analytic shape."""
    n, seed = cfg.eval.samples, cfg.eval.seed
    pa, na = sample_mesh(mesh, n, seed)
    iou = None
    if hasattr(reference, "primitives"):
        pb, nb = sample_surface_with_normals(reference, n, seed)
        coords = make_rng(seed).random((cfg.eval.iou_samples, 3))
        iou = metric_iou(mesh_occupancy(mesh, coords), occupancy_oracle(reference, coords) > 0)
    else:
        pb, nb = sample_mesh(reference, n, seed)
    return {
        "iou": iou,
        "chamfer_l1_x100": chamfer_l1_samples(pa, pb),
        "normal_consistency": normal_consistency_samples(pa, na, pb, nb),
        "fscore_1pct": fscore_samples(pa, pb, cfg.eval.fscore_threshold),
        "n": n,
        "seed": seed,
    }


def cmd_eval(args) -> int:
    cfg = _run_config(args)
    mesh = read_obj(args.mesh)
    if (args.reference is None) == (args.shape is None):
        raise UsageError("give exactly one of --reference MESH or --shape NAME")
    reference = read_obj(args.reference) if args.reference else cfg.shape(args.shape)
    if mesh.is_empty:
        raise ContractError(f"{args.mesh} has no faces to evaluate")
    metrics = evaluate_mesh(mesh, reference, cfg)
    metrics["config"] = cfg.to_dict()
    text = json.dumps(metrics, indent=2, sort_keys=True) + "\n"
    if args.out:
        out = Path(args.out)
        _out_dir(out.parent if str(out.parent) else ".")
        out.write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


# -- gradcheck ------------------------------------------------------------------


def cmd_gradcheck(args) -> int:
    from alto.gradsuite import gradient_suite

    results = gradient_suite(args.scope)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.scope:9s} {r.name:34s} max_rel_err={r.max_rel_err:.3e} tol={r.tol:.0e} ({r.seconds:.2f}s)")
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    if args.out:
        report = [dataclasses.asdict(r) | {"passed": r.passed} for r in results]
        Path(args.out).write_text(json.dumps(report, indent=2) + "\n")
    return EXIT_NUMERIC if failed else EXIT_OK


# -- bench ----------------------------------------------------------------------


def _best_time(fn, repeats: int):
    best, value = float("inf"), None
    for _ in range(repeats):
        t0 = time.perf_counter()
        value = fn()
        best = min(best, time.perf_counter() - t0)
    return best, value


def cmd_bench(args) -> int:
    cfg = _run_config(args)
    if args.checkpoint:
        model = model_from_checkpoint(checkpoint_load(args.checkpoint))
    else:
        model = Model.build(cfg.encoder, cfg.decoder, seed=cfg.train.seed, dtype=DTYPES[cfg.train.dtype])
    s_surface, s_noise, s_query = _derived_seeds(cfg.bench.seed, 0, 3)
    pts = add_noise(sample_surface(cfg.shape(), cfg.data.num_points, s_surface), cfg.data.noise_sigma, s_noise)
    queries = make_rng(s_query).random((cfg.bench.queries, 3))
    reps = cfg.bench.repeats
    R = cfg.mesh.resolution
    rows = []
    with no_grad():
        t, grid = _best_time(lambda: model.encode(pts), reps)
        rows.append(("encode", len(pts), t))
        t, _ = _best_time(lambda: model.predict(grid, queries, chunk_size=cfg.mesh.chunk_size), reps)
        rows.append(("decode", len(queries), t))
        t, volume = _best_time(lambda: evaluate_grid(grid, model.params, model.decoder, R, cfg.mesh.chunk_size, cfg.mesh.threshold), reps)
        rows.append(("evaluate_grid", R**3, t))
        t, mesh = _best_time(lambda: marching_cubes(volume), reps)
        rows.append(("marching_cubes", R**3, t))

        def predictor(q):
            return model.predict(grid, q, chunk_size=cfg.mesh.chunk_size).data

        iters = cfg.mesh.refine_iters
        if mesh.is_empty or iters == 0:
            rows.append(("refine", 0, 0.0))
        else:
            t, _ = _best_time(lambda: refine_vertices(mesh, predictor, cfg.mesh.threshold, iters), reps)
            rows.append(("refine", len(mesh.vertices), t))
    out = Path(args.out)
    _out_dir(out.parent if str(out.parent) else ".")
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BENCH_HEADER)
        for stage, size, secs in rows:
            w.writerow([stage, size, _fmt(secs)])
    dump_config(cfg, out.with_suffix(".config.json"))
    for stage, size, secs in rows:
        print(f"{stage:15s} {size:9d} {secs:9.4f}s")
    return EXIT_OK


# -- argument parsing -----------------------------------------------------------


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run config (defaults apply to missing keys)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field, e.g. train.steps=100")


def _flags(p: argparse.ArgumentParser, spec: list[tuple[str, str, type, str]]) -> None:
    keys = []
    for flag, key, typ, help_ in spec:
        dest = flag.lstrip("-").replace("-", "_")
        p.add_argument(flag, dest=dest, type=typ, help=f"{help_} (config: {key})")
        keys.append((dest, key))
    p.set_defaults(_flag_keys=keys)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="alto", description="Occupancy reconstruction from noisy point clouds.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="write noisy surface clouds and labeled queries for each shape")
    _add_config_args(p)
    p.add_argument("--out", required=True, help="output directory")
    _flags(p, [("--seed", "data.seed", int, "base seed"), ("--num-points", "data.num_points", int, "points per cloud")])
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("train", help="fit a model to an analytic shape")
    _add_config_args(p)
    p.add_argument("--out", required=True, help="output directory for checkpoints and loss.csv")
    p.add_argument("--resume", help="checkpoint to continue from")
    _flags(
        p,
        [
            ("--steps", "train.steps", int, "total optimization steps"),
            ("--seed", "train.seed", int, "training seed"),
            ("--lr", "train.lr", float, "Adam learning rate"),
            ("--checkpoint-interval", "train.checkpoint_interval", int, "steps between checkpoints, 0 = final only"),
        ],
    )
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("reconstruct", help="extract a mesh from a cloud with a trained model")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="XYZ point cloud")
    p.add_argument("--out", required=True, help="output OBJ path")
    p.add_argument("--config", help="run config; its model must match the checkpoint's")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field")
    p.add_argument("--no-normalize", dest="normalize", action="store_const", const=False, help="the cloud is already in [0, 1]^3")
    _flags(
        p,
        [
            ("--resolution", "mesh.resolution", int, "evaluation lattice resolution"),
            ("--threshold", "mesh.threshold", float, "iso-level"),
            ("--refine-iters", "mesh.refine_iters", int, "bisection rounds, 0 = none"),
        ],
    )
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("eval", help="compare a mesh with a reference mesh or an analytic shape")
    _add_config_args(p)
    p.add_argument("mesh", help="OBJ mesh to evaluate")
    p.add_argument("--reference", help="reference OBJ mesh")
    p.add_argument("--shape", help="name of a shape in the config")
    p.add_argument("--out", help="write the metrics JSON here as well as to stdout")
    _flags(p, [("--samples", "eval.samples", int, "surface samples per mesh"), ("--seed", "eval.seed", int, "sampling seed")])
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--scope", choices=["kernels", "encoder", "decoder", "all"], default="all")
    p.add_argument("--out", help="write a JSON report")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("bench", help="time encode, decode, grid evaluation, marching cubes and refinement")
    _add_config_args(p)
    p.add_argument("--checkpoint", help="benchmark a trained model instead of a fresh one")
    p.add_argument("--out", required=True, help="output CSV path")
    _flags(p, [("--resolution", "mesh.resolution", int, "evaluation lattice resolution")])
    p.set_defaults(func=cmd_bench)
    return parser


def _thread_limit():
    raw = os.environ.get("ALTO_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"ALTO_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise UsageError("ALTO_THREADS must be >= 0")
    if n == 0:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "normalize", None) is False:
        args.set = list(args.set or []) + ["mesh.normalize=false"]
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except (UsageError, ConfigError, ContractError, CheckpointError) as exc:
        print(f"alto {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"alto {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteError, FloatingPointError) as exc:
        print(f"alto {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
