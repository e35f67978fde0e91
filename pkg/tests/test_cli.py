import csv
import json

import numpy as np
import pytest

from alto import cli
from alto.config import RunConfig, apply_overrides, load_config
from alto.errors import ConfigError
from alto.geometry import sphere
from alto.mesh import marching_cubes
from alto.mesh.io import read_obj, read_xyz, write_obj
from alto.mesh.marching import OccupancyVolume, lattice_points
from alto.mesh.metrics import metric_chamfer_l1, metric_fscore, metric_normal_consistency
from alto.train import checkpoint_load

TINY = {
    "model": {
        "encoder": {"mode": "triplane", "resolution": 8, "feature_dim": 4, "unet_depth": 2, "no_resample_top_levels": 1, "pointnet_blocks": 2},
        "decoder": {"heads": 2, "occupancy_blocks": 1},
    },
    "train": {"steps": 3, "num_points": 64, "queries_per_step": 32, "lr": 0.001},
    "data": {"num_points": 300, "num_queries": 50},
    "mesh": {"resolution": 8, "refine_iters": 2, "normalize": False},
    "eval": {"samples": 2000, "iou_samples": 200},
}


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(TINY))
    return p


def run(*argv):
    return cli.main([str(a) for a in argv])


def read_csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


# -- config ---------------------------------------------------------------------


def test_defaults_round_trip():
    cfg = RunConfig()
    assert RunConfig.from_dict(cfg.to_dict()).to_dict() == cfg.to_dict()


def test_decoder_inherits_mode_and_width():
    cfg = RunConfig.from_dict(TINY)
    assert cfg.decoder.mode == "triplane" and cfg.decoder.feature_dim == 4


@pytest.mark.parametrize(
    "bad",
    [
        {"bogus": 1},
        {"train": {"stepz": 1}},
        {"model": {"encoder": {"resolution": 12}}},
        {"model": {"encoder": {"mode": "volume"}, "decoder": {"mode": "triplane"}}},
        {"train": {"steps": "ten"}},
        {"train": {"steps": True}},
        {"mesh": {"normalize": 1}},
        {"mesh": {"threshold": 1.5}},
        {"shapes": [{"name": "a", "primitives": [{"type": "cone"}]}]},
        {"shapes": [{"name": "a", "primitives": [{"type": "sphere", "center": [0, 0, 0], "radius": 1, "extra": 2}]}]},
        {"shapes": []},
        {"train_shape": "missing"},
        {"model": []},
    ],
)
def test_config_rejects(bad):
    with pytest.raises(ConfigError):
        RunConfig.from_dict(bad)


def test_overrides():
    cfg = apply_overrides(RunConfig(), ["train.steps=7", "mesh.normalize=false", "model.encoder.feature_dim=8"])
    assert cfg.train.steps == 7 and cfg.mesh.normalize is False
    assert cfg.encoder.feature_dim == 8 and cfg.decoder.feature_dim == 8
    with pytest.raises(ConfigError):
        apply_overrides(RunConfig(), ["train.nope=1"])
    with pytest.raises(ConfigError):
        apply_overrides(RunConfig(), ["no-equals-sign"])


def test_load_config_errors(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(p)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")


# -- generate-data --------------------------------------------------------------


def test_generate_data(cfg_path, tmp_path):
    out = tmp_path / "data"
    assert run("generate-data", "--config", cfg_path, "--out", out) == 0
    pts = read_xyz(out / "sphere.xyz")
    assert pts.shape == (300, 3)
    lines = [ln for ln in (out / "sphere.xyz").read_text().splitlines() if not ln.startswith("#")]
    assert len(lines) == 300 and all(len(ln.split()) == 3 for ln in lines)
    rows = read_csv(out / "sphere_queries.csv")
    assert rows[0] == ["x", "y", "z", "occupancy"] and len(rows) == 51
    manifest = json.loads((out / "manifest.json").read_text())
    assert {f["path"] for f in manifest["files"]} == {"sphere.xyz", "sphere_queries.csv"}
    assert all(isinstance(f["seed"], int) for f in manifest["files"])
    assert json.loads((out / "config.json").read_text())["data"]["num_points"] == 300


def test_generate_data_is_deterministic(cfg_path, tmp_path):
    run("generate-data", "--config", cfg_path, "--out", tmp_path / "a")
    run("generate-data", "--config", cfg_path, "--out", tmp_path / "b")
    for name in ("sphere.xyz", "sphere_queries.csv", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_generate_data_labels_match_oracle(cfg_path, tmp_path):
    run("generate-data", "--config", cfg_path, "--out", tmp_path)
    rows = np.array([[float(v) for v in r] for r in read_csv(tmp_path / "sphere_queries.csv")[1:]])
    inside = np.linalg.norm(rows[:, :3] - 0.5, axis=1) <= 0.3
    assert np.array_equal(inside, rows[:, 3] == 1)


def test_generate_data_unwritable(cfg_path, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert run("generate-data", "--config", cfg_path, "--out", blocker / "sub") == 2


def test_bad_config_exit_code(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps({"unknown": 1}))
    assert run("generate-data", "--config", p, "--out", tmp_path / "o") == 2


def test_usage_error_exit_code():
    with pytest.raises(SystemExit) as exc:
        run("train")
    assert exc.value.code == 2


# -- train ----------------------------------------------------------------------


def test_train_zero_steps_header_only(cfg_path, tmp_path):
    assert run("train", "--config", cfg_path, "--out", tmp_path, "--steps", 0) == 0
    assert read_csv(tmp_path / "loss.csv") == [["step", "loss_sum", "loss_mean"]]
    assert checkpoint_load(tmp_path / "model.ckpt").step == 0


def test_train_writes_log_checkpoints_and_config(cfg_path, tmp_path):
    assert run("train", "--config", cfg_path, "--out", tmp_path, "--checkpoint-interval", 2, "--steps", 4) == 0
    rows = read_csv(tmp_path / "loss.csv")
    assert [r[0] for r in rows[1:]] == ["1", "2", "3", "4"]
    for r in rows[1:]:
        assert float(r[2]) == pytest.approx(float(r[1]) / 32, rel=1e-12)
    assert (tmp_path / "ckpt_000002.ckpt").exists() and (tmp_path / "ckpt_000004.ckpt").exists()
    ck = checkpoint_load(tmp_path / "model.ckpt")
    assert ck.step == 4 and ck.config["train"]["steps"] == 4
    assert json.loads((tmp_path / "config.json").read_text())["train"]["checkpoint_interval"] == 2


def test_train_runs_are_bitwise_identical(cfg_path, tmp_path):
    run("train", "--config", cfg_path, "--out", tmp_path / "a")
    run("train", "--config", cfg_path, "--out", tmp_path / "b")
    for name in ("model.ckpt", "loss.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_train_resume_continues_step_counter(cfg_path, tmp_path):
    run("train", "--config", cfg_path, "--out", tmp_path / "full", "--steps", 4)
    run("train", "--config", cfg_path, "--out", tmp_path / "part", "--steps", 2)
    assert run("train", "--config", cfg_path, "--out", tmp_path / "part", "--steps", 4, "--resume", tmp_path / "part" / "model.ckpt") == 0
    rows = read_csv(tmp_path / "part" / "loss.csv")
    assert [r[0] for r in rows[1:]] == ["1", "2", "3", "4"]
    assert rows == read_csv(tmp_path / "full" / "loss.csv")
    assert (tmp_path / "part" / "model.ckpt").read_bytes() == (tmp_path / "full" / "model.ckpt").read_bytes()


def test_train_resume_with_other_model_is_config_error(cfg_path, tmp_path):
    run("train", "--config", cfg_path, "--out", tmp_path / "a", "--steps", 1)
    code = run(
        "train", "--config", cfg_path, "--out", tmp_path / "b", "--set", "model.encoder.feature_dim=8", "--resume", tmp_path / "a" / "model.ckpt"
    )
    assert code == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_nan_exit_code(cfg_path, tmp_path):
    # a learning rate this large overflows the parameters within a step or two
    assert run("train", "--config", cfg_path, "--out", tmp_path, "--lr", 1e300, "--steps", 3) == 3


# -- reconstruct ----------------------------------------------------------------


@pytest.fixture
def trained(cfg_path, tmp_path):
    run("train", "--config", cfg_path, "--out", tmp_path / "run")
    run("generate-data", "--config", cfg_path, "--out", tmp_path / "data")
    return tmp_path / "run" / "model.ckpt", tmp_path / "data" / "sphere.xyz"


def test_reconstruct_writes_parseable_obj(trained, tmp_path):
    ckpt, xyz = trained
    out = tmp_path / "mesh.obj"
    assert run("reconstruct", "--checkpoint", ckpt, "--input", xyz, "--out", out) == 0
    mesh = read_obj(out)
    for line in out.read_text().splitlines():
        assert line.split()[0] in ("v", "f")
    assert out.with_suffix(".config.json").exists()
    if not mesh.is_empty:
        write_obj(tmp_path / "again.obj", mesh)
        assert (tmp_path / "again.obj").read_text() == out.read_text()


def test_reconstruct_matches_library_pipeline(trained, tmp_path):
    ckpt, xyz = trained
    out = tmp_path / "mesh.obj"
    run("reconstruct", "--checkpoint", ckpt, "--input", xyz, "--out", out, "--refine-iters", 0)
    from alto.train import model_from_checkpoint

    model = model_from_checkpoint(checkpoint_load(ckpt))
    cfg = apply_overrides(RunConfig.from_dict(TINY), ["mesh.refine_iters=0"])
    mesh = cli.reconstruct_mesh(model, read_xyz(xyz), cfg.mesh)
    got = read_obj(out)
    assert np.array_equal(got.faces, mesh.faces) and np.array_equal(got.vertices, mesh.vertices)


def test_reconstruct_normalized_cloud_returns_to_raw_frame(trained, tmp_path):
    ckpt, xyz = trained
    out = tmp_path / "mesh.obj"
    raw = read_xyz(xyz) * 10.0 + 3.0
    (tmp_path / "big.xyz").write_text("\n".join(" ".join(repr(v) for v in p) for p in raw.tolist()))
    run("reconstruct", "--checkpoint", ckpt, "--input", tmp_path / "big.xyz", "--out", out, "--set", "mesh.normalize=true")
    mesh = read_obj(out)
    if not mesh.is_empty:
        lo, hi = raw.min(0), raw.max(0)
        pad = (hi - lo).max() * 0.1
        assert np.all(mesh.vertices >= lo - pad) and np.all(mesh.vertices <= hi + pad)


def test_reconstruct_empty_field_gives_zero_faces(cfg_path, tmp_path):
    # a decoder whose output bias is hugely negative predicts empty space everywhere
    from alto.train import Model, checkpoint_save

    cfg = RunConfig.from_dict(TINY)
    model = Model.build(cfg.encoder, cfg.decoder)
    model.params["decoder.head.out.bias"].data[:] = -1e3
    ckpt = tmp_path / "empty.ckpt"
    checkpoint_save(ckpt, model.params, None, cfg.to_dict(), 0)
    xyz = tmp_path / "c.xyz"
    xyz.write_text("0.5 0.5 0.5\n0.4 0.5 0.5\n")
    out = tmp_path / "empty.obj"
    assert run("reconstruct", "--checkpoint", ckpt, "--input", xyz, "--out", out) == 0
    assert read_obj(out).is_empty


def test_reconstruct_config_mismatch(trained, tmp_path):
    ckpt, xyz = trained
    other = dict(TINY, model={"encoder": dict(TINY["model"]["encoder"], feature_dim=8)})
    p = tmp_path / "other.json"
    p.write_text(json.dumps(other))
    assert run("reconstruct", "--checkpoint", ckpt, "--input", xyz, "--out", tmp_path / "m.obj", "--config", p) == 2


def test_reconstruct_bad_checkpoint(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"garbage")
    (tmp_path / "c.xyz").write_text("0.5 0.5 0.5\n")
    assert run("reconstruct", "--checkpoint", tmp_path / "x.ckpt", "--input", tmp_path / "c.xyz", "--out", tmp_path / "m.obj") == 2


# -- eval -----------------------------------------------------------------------


def sphere_mesh(R=24, radius=0.3):
    d = np.linalg.norm(lattice_points(R) - 0.5, axis=1).reshape(R, R, R)
    return marching_cubes(OccupancyVolume(radius - d + 0.5))


def test_eval_mesh_against_itself(cfg_path, tmp_path, capsys):
    write_obj(tmp_path / "a.obj", sphere_mesh())
    assert run("eval", tmp_path / "a.obj", "--reference", tmp_path / "a.obj", "--config", cfg_path, "--out", tmp_path / "m.json") == 0
    m = json.loads((tmp_path / "m.json").read_text())
    assert m["chamfer_l1_x100"] == 0.0 and m["normal_consistency"] == pytest.approx(1.0) and m["fscore_1pct"] == 1.0
    assert m["iou"] is None and m["n"] == 2000 and m["seed"] == 0
    assert json.loads(capsys.readouterr().out) == m


def test_eval_matches_library_metrics(cfg_path, tmp_path):
    a, b = sphere_mesh(20, 0.3), sphere_mesh(28, 0.28)
    write_obj(tmp_path / "a.obj", a)
    write_obj(tmp_path / "b.obj", b)
    run("eval", tmp_path / "a.obj", "--reference", tmp_path / "b.obj", "--config", cfg_path, "--out", tmp_path / "m.json")
    m = json.loads((tmp_path / "m.json").read_text())
    a, b = read_obj(tmp_path / "a.obj"), read_obj(tmp_path / "b.obj")
    assert m["chamfer_l1_x100"] == metric_chamfer_l1(a, b, 2000, 0)
    assert m["normal_consistency"] == metric_normal_consistency(a, b, 2000, 0)
    assert m["fscore_1pct"] == metric_fscore(a, b, 0.01, 2000, 0)


def test_eval_against_shape_has_iou(cfg_path, tmp_path):
    write_obj(tmp_path / "a.obj", sphere_mesh(32))
    run("eval", tmp_path / "a.obj", "--shape", "sphere", "--config", cfg_path, "--out", tmp_path / "m.json")
    m = json.loads((tmp_path / "m.json").read_text())
    # with 2000 samples the sample spacing alone gives chamfer x100 near 1
    assert m["iou"] > 0.95 and m["chamfer_l1_x100"] < 2.0 and m["config"]["shapes"][0] == sphere().to_dict()


def test_eval_needs_exactly_one_reference(cfg_path, tmp_path):
    write_obj(tmp_path / "a.obj", sphere_mesh())
    assert run("eval", tmp_path / "a.obj", "--config", cfg_path) == 2
    assert run("eval", tmp_path / "a.obj", "--shape", "nope", "--config", cfg_path) == 2


# -- gradcheck / bench ----------------------------------------------------------


def test_gradcheck_kernels(tmp_path, capsys):
    assert run("gradcheck", "--scope", "kernels", "--out", tmp_path / "g.json") == 0
    out = capsys.readouterr().out
    assert "max_rel_err=" in out and "FAIL" not in out
    report = json.loads((tmp_path / "g.json").read_text())
    assert {"conv3d_s1_zero", "bilinear", "bce"} <= {r["name"] for r in report}


def test_gradcheck_failure_exit(monkeypatch):
    from alto import gradsuite

    def broken(scope):
        return [gradsuite.CheckResult("x", "kernels", 1.0, 1e-6, 0.0)]

    monkeypatch.setattr(gradsuite, "gradient_suite", broken)
    assert run("gradcheck", "--scope", "kernels") == 3


def test_bench(cfg_path, tmp_path):
    out = tmp_path / "bench.csv"
    assert run("bench", "--config", cfg_path, "--out", out) == 0
    rows = read_csv(out)
    assert rows[0] == ["stage", "size", "seconds"]
    assert [r[0] for r in rows[1:]] == ["encode", "decode", "evaluate_grid", "marching_cubes", "refine"]
    assert rows[2][1] == str(RunConfig().bench.queries)
    assert all(float(r[2]) >= 0 for r in rows[1:])
    assert all(float(r[2]) > 0 for r in rows[1:5])


def test_threads_env(cfg_path, tmp_path, monkeypatch):
    monkeypatch.setenv("ALTO_THREADS", "1")
    assert run("generate-data", "--config", cfg_path, "--out", tmp_path) == 0
    monkeypatch.setenv("ALTO_THREADS", "many")
    assert run("generate-data", "--config", cfg_path, "--out", tmp_path) == 2
