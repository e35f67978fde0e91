"""Run configuration: one strict JSON document covering every command.

Layout::

    {
      "model":  {"encoder": {...EncoderConfig}, "decoder": {...DecoderConfig}},
      "train":  {...TrainConfig},
      "train_shape": null,                 # shape name; null picks the first
      "shapes": [{...ShapeSpec}, ...],
      "data":   {"num_points", "num_queries", "noise_sigma", "seed"},
      "mesh":   {"resolution", "threshold", "refine_iters", "chunk_size", "normalize", "padding"},
      "eval":   {"samples", "seed", "fscore_threshold", "iou_samples"},
      "bench":  {"queries", "repeats", "seed"}
    }

Missing keys take defaults, unknown keys are errors. A decoder section that
omits ``mode`` or ``feature_dim`` inherits them from the encoder.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from alto.decoder import DecoderConfig
from alto.encoder import EncoderConfig
from alto.errors import ConfigError
from alto.geometry import ShapeSpec, sphere
from alto.train import TrainConfig


@dataclass
class DataConfig:
    num_points: int = 2000
    num_queries: int = 10000
    noise_sigma: float = 0.005
    seed: int = 0

    def __post_init__(self):
        if self.num_points < 1 or self.num_queries < 0 or self.noise_sigma < 0:
            raise ConfigError("data: num_points >= 1, num_queries >= 0 and noise_sigma >= 0 required")


@dataclass
class MeshConfig:
    resolution: int = 64
    threshold: float = 0.5
    refine_iters: int = 10
    chunk_size: int = 16384
    normalize: bool = True
    padding: float = 0.1

    def __post_init__(self):
        if self.resolution < 8:
            raise ConfigError("mesh.resolution must be >= 8")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError("mesh.threshold must lie in (0, 1)")
        if self.refine_iters < 0 or self.chunk_size < 1:
            raise ConfigError("mesh.refine_iters >= 0 and mesh.chunk_size >= 1 required")
        if not 0.0 <= self.padding < 1.0:
            raise ConfigError("mesh.padding must lie in [0, 1)")


@dataclass
class EvalConfig:
    samples: int = 100_000
    seed: int = 0
    fscore_threshold: float = 0.01
    iou_samples: int = 10_000

    def __post_init__(self):
        if self.samples < 1 or self.iou_samples < 1 or self.fscore_threshold <= 0:
            raise ConfigError("eval: samples, iou_samples >= 1 and fscore_threshold > 0 required")


@dataclass
class BenchConfig:
    queries: int = 10_000
    repeats: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.queries < 1 or self.repeats < 1:
            raise ConfigError("bench: queries and repeats must be >= 1")


def _default_shapes() -> list[ShapeSpec]:
    return [sphere()]


@dataclass
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    train_shape: str | None = None
    shapes: list[ShapeSpec] = field(default_factory=_default_shapes)
    data: DataConfig = field(default_factory=DataConfig)
    mesh: MeshConfig = field(default_factory=MeshConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)

    def __post_init__(self):
        if self.encoder.mode != self.decoder.mode or self.encoder.feature_dim != self.decoder.feature_dim:
            raise ConfigError("model.encoder and model.decoder disagree on mode or feature_dim")
        names = [s.name for s in self.shapes]
        if not names:
            raise ConfigError("shapes must list at least one shape")
        if len(set(names)) != len(names):
            raise ConfigError(f"shape names must be unique, got {names}")
        if self.train_shape is not None and self.train_shape not in names:
            raise ConfigError(f"train_shape {self.train_shape!r} is not one of {names}")

    def shape(self, name: str | None = None) -> ShapeSpec:
        name = self.train_shape if name is None else name
        if name is None:
            return self.shapes[0]
        for s in self.shapes:
            if s.name == name:
                return s
        raise ConfigError(f"no shape named {name!r}")

    def model_dict(self) -> dict:
        return {"encoder": self.encoder.to_dict(), "decoder": self.decoder.to_dict()}

    def to_dict(self) -> dict:
        return {
            "model": self.model_dict(),
            "train": self.train.to_dict(),
            "train_shape": self.train_shape,
            "shapes": [s.to_dict() for s in self.shapes],
            "data": asdict(self.data),
            "mesh": asdict(self.mesh),
            "eval": asdict(self.eval),
            "bench": asdict(self.bench),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        _reject_unknown(d, {"model", "train", "train_shape", "shapes", "data", "mesh", "eval", "bench"}, "config")
        model = d.get("model", {})
        _require_object(model, "model")
        _reject_unknown(model, {"encoder", "decoder"}, "model")
        enc_d = model.get("encoder", {})
        dec_d = dict(model.get("decoder", {}))
        _require_object(enc_d, "model.encoder")
        _require_object(dec_d, "model.decoder")
        enc = _build(EncoderConfig, enc_d, "model.encoder")
        dec_d.setdefault("mode", enc.mode)
        dec_d.setdefault("feature_dim", enc.feature_dim)
        dec = _build(DecoderConfig, dec_d, "model.decoder")
        shapes_d = d.get("shapes")
        if shapes_d is None:
            shapes = _default_shapes()
        else:
            if not isinstance(shapes_d, list):
                raise ConfigError("shapes must be a list")
            shapes = [_shape(s, i) for i, s in enumerate(shapes_d)]
        return cls(
            encoder=enc,
            decoder=dec,
            train=_build(TrainConfig, d.get("train", {}), "train"),
            train_shape=d.get("train_shape"),
            shapes=shapes,
            data=_build(DataConfig, d.get("data", {}), "data"),
            mesh=_build(MeshConfig, d.get("mesh", {}), "mesh"),
            eval=_build(EvalConfig, d.get("eval", {}), "eval"),
            bench=_build(BenchConfig, d.get("bench", {}), "bench"),
        )


def _require_object(d, where: str) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be a JSON object")


def _reject_unknown(d: dict, allowed: set, where: str) -> None:
    extra = sorted(set(d) - allowed)
    if extra:
        raise ConfigError(f"unknown key(s) in {where}: {extra}")


def _build(cls, d: dict, where: str):
    _require_object(d, where)
    names = {f.name for f in fields(cls)}
    _reject_unknown(d, names, where)
    types = {f.name: f.default for f in fields(cls)}
    for k, v in d.items():
        default = types[k]
        # bool is an int subclass, so check it first
        if isinstance(default, bool) and not isinstance(v, bool):
            raise ConfigError(f"{where}.{k} must be a boolean, got {v!r}")
        if isinstance(default, int) and not isinstance(default, bool) and (isinstance(v, bool) or not isinstance(v, int)):
            raise ConfigError(f"{where}.{k} must be an integer, got {v!r}")
        if isinstance(default, float) and (isinstance(v, bool) or not isinstance(v, (int, float))):
            raise ConfigError(f"{where}.{k} must be a number, got {v!r}")
        if isinstance(default, str) and not isinstance(v, str):
            raise ConfigError(f"{where}.{k} must be a string, got {v!r}")
    d = {k: float(v) if isinstance(types[k], float) else v for k, v in d.items()}
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _shape(d, i: int) -> ShapeSpec:
    _require_object(d, f"shapes[{i}]")
    _reject_unknown(d, {"name", "primitives"}, f"shapes[{i}]")
    try:
        return ShapeSpec.from_dict(d)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"shapes[{i}]: {exc}") from None


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    return RunConfig.from_dict(d)


def apply_overrides(cfg: RunConfig, assignments: list[str]) -> RunConfig:
    """Apply ``section.key=value`` assignments; values are parsed as JSON when possible."""
    d = copy.deepcopy(cfg.to_dict())
    explicit = {a.partition("=")[0] for a in assignments}
    for item in assignments:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        path = key.split(".")
        node = d
        for part in path[:-1]:
            if not isinstance(node, dict) or part not in node:
                raise ConfigError(f"override {key!r}: unknown section {part!r}")
            node = node[part]
        if not isinstance(node, dict) or path[-1] not in node:
            raise ConfigError(f"override {key!r}: unknown key")
        node[path[-1]] = value
        shared = path[-1] in ("mode", "feature_dim") and path[:2] == ["model", "encoder"]
        if shared and f"model.decoder.{path[-1]}" not in explicit:
            d["model"]["decoder"][path[-1]] = value
    return RunConfig.from_dict(d)


def dump_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
