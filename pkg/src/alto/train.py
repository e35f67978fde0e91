"""Model bundle, BCE loss, the training loop and checkpoint persistence."""

from __future__ import annotations

import io
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from alto.ad import AdamState, Tensor, adam_step, backward, no_grad, ops
from alto.convert import FeatureGrid
from alto.decoder import DecoderConfig, init_decoder, predict_occupancy
from alto.encoder import CloudIndex, EncoderConfig, encode, init_encoder
from alto.errors import CheckpointError, ConfigError, NonFiniteError
from alto.geometry import QueryBatch, ShapeSpec, add_noise, make_rng, occupancy_oracle, sample_surface
from alto.layers import ParamBuilder, Params

log = logging.getLogger(__name__)

DTYPES = {"float32": np.float32, "float64": np.float64}


# -- model ----------------------------------------------------------------------


@dataclass
class Model:
    encoder: EncoderConfig
    decoder: DecoderConfig
    params: Params

    def __post_init__(self):
        if self.encoder.mode != self.decoder.mode or self.encoder.feature_dim != self.decoder.feature_dim:
            raise ConfigError(
                f"encoder ({self.encoder.mode}, d={self.encoder.feature_dim}) and decoder "
                f"({self.decoder.mode}, d={self.decoder.feature_dim}) disagree"
            )

    @classmethod
    def build(cls, encoder: EncoderConfig, decoder: DecoderConfig, seed: int = 0, dtype=np.float64) -> "Model":
        builder = ParamBuilder(make_rng(seed), dtype)
        init_encoder(encoder, builder)
        init_decoder(decoder, builder)
        return cls(encoder, decoder, builder.params)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def index(self, points) -> CloudIndex:
        return CloudIndex(points, self.encoder.mode, self.encoder.resolution)

    def encode(self, points, cloud: CloudIndex | None = None) -> FeatureGrid:
        return encode(points, self.params, self.encoder, cloud=cloud)

    def predict(self, grid: FeatureGrid, queries, chunk_size: int | None = None) -> Tensor:
        return predict_occupancy(grid, queries, self.params, self.decoder, chunk_size=chunk_size)

    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def config_dict(self) -> dict:
        return {"encoder": self.encoder.to_dict(), "decoder": self.decoder.to_dict()}


# -- loss -----------------------------------------------------------------------


def bce_loss(pred, target, eps: float = 1e-7) -> tuple[Tensor, float]:
    """Summed binary cross-entropy (the optimized quantity) and its per-query mean."""
    total = ops.binary_cross_entropy(pred, target, eps)
    return total, float(total.item()) / max(1, int(np.size(target)))


# -- training -------------------------------------------------------------------


@dataclass
class TrainConfig:
    steps: int = 500
    num_points: int = 2000
    queries_per_step: int = 1024
    lr: float = 1e-4
    seed: int = 0
    clamp_eps: float = 1e-7
    checkpoint_interval: int = 0  # 0 disables periodic checkpoints
    noise_sigma: float = 0.005
    fresh_queries: bool = True
    resample_points: bool = False
    dtype: str = "float64"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.num_points < 1 or self.queries_per_step < 1:
            raise ConfigError("num_points and queries_per_step must be >= 1")
        if not 0 < self.clamp_eps < 0.5:
            raise ConfigError("clamp_eps must lie in (0, 0.5)")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.noise_sigma < 0 or self.checkpoint_interval < 0:
            raise ConfigError("noise_sigma and checkpoint_interval must be >= 0")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(DTYPES)}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LabeledData:
    """A fixed input cloud with a labeled query pool."""

    points: np.ndarray
    queries: QueryBatch


@dataclass
class LossRecord:
    step: int
    loss_sum: float
    loss_mean: float


@dataclass
class FitResult:
    history: list[LossRecord]
    state: AdamState
    step: int
    points: np.ndarray = field(repr=False)


def _stream(seed: int, tag: int, step: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, tag, step])))


def training_cloud(shape: ShapeSpec, cfg: TrainConfig, step: int = 0) -> np.ndarray:
    """Noisy surface samples used as encoder input; fixed per run unless resampling."""
    k = step if cfg.resample_points else 0
    sample_seed, noise_seed = (int(s) for s in _stream(cfg.seed, 1, k).integers(0, 2**31, size=2))
    return add_noise(sample_surface(shape, cfg.num_points, sample_seed), cfg.noise_sigma, noise_seed)


def _queries(source, cfg: TrainConfig, step: int) -> tuple[np.ndarray, np.ndarray]:
    k = step if cfg.fresh_queries else 0
    rng = _stream(cfg.seed, 2, k)
    if isinstance(source, LabeledData):
        pool = source.queries
        n = min(cfg.queries_per_step, len(pool))
        sel = np.sort(rng.choice(len(pool), size=n, replace=False)) if n < len(pool) else np.arange(n)
        return pool.coords[sel], pool.labels[sel]
    coords = rng.random((cfg.queries_per_step, 3))
    return coords, occupancy_oracle(source, coords)


def fit(
    source: ShapeSpec | LabeledData,
    model: Model,
    cfg: TrainConfig,
    state: AdamState | None = None,
    start_step: int = 0,
    on_step: Callable[[LossRecord, Model, AdamState], None] | None = None,
) -> FitResult:
    """Adam on summed BCE for ``cfg.steps`` steps, continuing from ``start_step``.

    ``on_step`` sees each step's loss record after the parameter update.
    """
    names = list(model.params)
    tensors = [model.params[k] for k in names]
    if state is None:
        state = AdamState.zeros_like(tensors, lr=cfg.lr)
    if isinstance(source, LabeledData):
        if source.queries.labels is None:
            raise ConfigError("labeled training data needs query labels")
        points = np.asarray(source.points, dtype=np.float64)
    else:
        points = training_cloud(source, cfg, start_step)
    cloud = model.index(points)
    history: list[LossRecord] = []
    step = start_step
    for _ in range(cfg.steps):
        if cfg.resample_points and not isinstance(source, LabeledData) and step != start_step:
            points = training_cloud(source, cfg, step)
            cloud = model.index(points)
        coords, labels = _queries(source, cfg, step)
        grid = model.encode(points, cloud)
        pred = model.predict(grid, coords)
        loss, mean = bce_loss(pred, labels, cfg.clamp_eps)
        total = float(loss.item())
        if not np.isfinite(total):
            raise NonFiniteError(f"non-finite loss {total} at step {step} (Adam t={state.t})")
        grads = backward(loss, tensors)
        adam_step([t.data for t in tensors], grads, state, names)
        step += 1
        record = LossRecord(step, total, mean)
        history.append(record)
        if step % 50 == 0:
            log.info("step %d  loss %.6f  mean %.6f", step, total, mean)
        if on_step is not None:
            on_step(record, model, state)
    return FitResult(history, state, step, points)


def heldout_iou(model: Model, points: np.ndarray, shape: ShapeSpec, n: int = 10_000, seed: int = 12345, tau: float = 0.5) -> float:
    """Volumetric IoU of the thresholded prediction against the analytic oracle."""
    from alto.mesh.metrics import metric_iou

    coords = make_rng(seed).random((n, 3))
    with no_grad():
        grid = model.encode(points)
        pred = model.predict(grid, coords, chunk_size=4096).data
    return metric_iou(pred >= tau, occupancy_oracle(shape, coords) > 0)


# -- checkpoints ----------------------------------------------------------------

MAGIC = b"ALTO\x00CKP"
VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


@dataclass
class Checkpoint:
    config: dict
    params: dict[str, np.ndarray]
    adam: AdamState | None
    step: int


def checkpoint_bytes(params: dict, state: AdamState | None, config: dict, step: int) -> bytes:
    names = list(params)
    arrays = {k: (v.data if isinstance(v, Tensor) else np.asarray(v)) for k, v in params.items()}
    meta = {"config": config, "step": int(step), "params": names, "adam": None}
    if state is not None:
        if len(state.m) != len(names):
            raise CheckpointError(f"Adam state has {len(state.m)} slots for {len(names)} parameters")
        meta["adam"] = {"t": state.t, "lr": state.lr, "beta1": state.beta1, "beta2": state.beta2, "eps": state.eps}
        for k, m, v in zip(names, state.m, state.v):
            arrays[f"adam.m.{k}"] = m
            arrays[f"adam.v.{k}"] = v
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<I", VERSION))
    out.write(struct.pack("<Q", len(blob)))
    out.write(blob)
    out.write(struct.pack("<Q", len(arrays)))
    for name, a in arrays.items():
        a = np.asarray(a)
        if a.dtype not in _DTYPE_CODES:
            raise CheckpointError(f"tensor {name!r} has unsupported dtype {a.dtype}")
        raw = name.encode("utf-8")
        out.write(struct.pack("<H", len(raw)))
        out.write(raw)
        out.write(struct.pack("<BB", _DTYPE_CODES[a.dtype], a.ndim))
        out.write(struct.pack(f"<{a.ndim}Q", *a.shape))
        out.write(np.ascontiguousarray(a, dtype=a.dtype.newbyteorder("<")).tobytes())
    return out.getvalue()


def checkpoint_save(path, params: dict, state: AdamState | None, config: dict, step: int) -> None:
    data = checkpoint_bytes(params, state, config, step)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint while reading {what} at byte {self.pos}")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def checkpoint_parse(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointError("bad magic: not an ALTO checkpoint")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    (n_meta,) = r.unpack("<Q", "config length")
    try:
        meta = json.loads(r.take(n_meta, "config blob").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt config blob: {exc}") from None
    if not isinstance(meta, dict) or not {"config", "step", "params", "adam"} <= set(meta):
        raise CheckpointError("config blob is missing required fields")
    (count,) = r.unpack("<Q", "tensor count")
    tensors: dict[str, np.ndarray] = {}
    for i in range(count):
        (n_name,) = r.unpack("<H", f"name length of tensor {i}")
        try:
            name = r.take(n_name, f"name of tensor {i}").decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"tensor {i} name is not UTF-8") from None
        code, rank = r.unpack("<BB", f"dtype/rank of {name!r}")
        if code not in _CODE_DTYPES:
            raise CheckpointError(f"tensor {name!r} has unknown dtype code {code}")
        dims = r.unpack(f"<{rank}Q", f"dims of {name!r}")
        dtype = _CODE_DTYPES[code].newbyteorder("<")
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        arr = np.frombuffer(r.take(nbytes, f"values of {name!r}"), dtype=dtype).reshape(dims)
        if name in tensors:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        tensors[name] = arr.astype(_CODE_DTYPES[code])
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after the last tensor")
    names = meta["params"]
    missing = [k for k in names if k not in tensors]
    if missing:
        raise CheckpointError(f"checkpoint lists parameters with no tensor: {missing[:3]}")
    params = {k: tensors[k] for k in names}
    adam = None
    if meta["adam"] is not None:
        h = meta["adam"]
        try:
            adam = AdamState(
                m=[tensors[f"adam.m.{k}"] for k in names],
                v=[tensors[f"adam.v.{k}"] for k in names],
                t=int(h["t"]),
                lr=float(h["lr"]),
                beta1=float(h["beta1"]),
                beta2=float(h["beta2"]),
                eps=float(h["eps"]),
            )
        except KeyError as exc:
            raise CheckpointError(f"Adam state incomplete: missing {exc}") from None
    return Checkpoint(meta["config"], params, adam, int(meta["step"]))


def checkpoint_load(path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    return checkpoint_parse(data)


def model_from_checkpoint(ckpt: Checkpoint) -> Model:
    cfg = ckpt.config
    try:
        enc = EncoderConfig(**cfg["model"]["encoder"])
        dec = DecoderConfig(**cfg["model"]["decoder"])
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"checkpoint config does not describe a model: {exc}") from None
    template = Model.build(enc, dec, dtype=next(iter(ckpt.params.values())).dtype)
    if list(template.params) != list(ckpt.params):
        raise ConfigError("checkpoint parameters do not match the model described by its config")
    for k, t in template.params.items():
        if t.shape != ckpt.params[k].shape:
            raise ConfigError(f"parameter {k!r}: checkpoint shape {ckpt.params[k].shape} vs model {t.shape}")
    params = {k: Tensor(v.copy(), requires_grad=True) for k, v in ckpt.params.items()}
    return Model(enc, dec, params)
