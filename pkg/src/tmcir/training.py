"""Two-stage training pipeline.

Stage 1 aligns pooled image and instruction features with InfoNCE and a
learnable temperature; stage 2 trains the fusion head (and, by default, the
encoders) to align composed queries with target features.  Optimization is
AdamW with decoupled weight decay and a cosine learning-rate schedule.  All
randomness flows from the config seed; gradient accumulation order is fixed,
so runs are bit-reproducible.
"""

from __future__ import annotations

import json
import math
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import Tape, concat_rows
from .encoders import (
    ModelSpec,
    encode_text,
    encode_visual,
    init_encoder_store,
    pooled_text_batch,
    pooled_visual_batch,
)
from .errors import CheckpointError, ConfigError, TrainingError
from .fusion import FusionConfig, compose_query, compose_query_no_fusion
from .losses import DEFAULT_TEMPERATURE, LossConfig, infonce
from .params import ParameterStore
from .world import Dataset

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# the learnable temperature must never be shrunk by decoupled decay
NO_DECAY = frozenset({"log_temperature"})

CKPT_MAGIC = b"TMC1"
CKPT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    epochs: int = 8
    base_lr: float = 3e-3
    weight_decay: float = 0.05
    seed: int = 0
    supervision: str = "pseudo"      # stage 1: "pseudo" or "real"
    train_encoders: bool = True      # stage 2
    use_fusion: bool = True          # stage 2; False reproduces the ablation
    loss: LossConfig = field(default_factory=LossConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.epochs > 0 and self.batch_size < 2:
            raise ConfigError(
                f"contrastive training needs batch_size >= 2, got {self.batch_size}")
        if self.base_lr <= 0 or self.weight_decay < 0:
            raise ConfigError("base_lr must be positive and weight_decay >= 0")
        if self.supervision not in ("pseudo", "real"):
            raise ConfigError(f"supervision must be pseudo|real, got {self.supervision}")

    def to_dict(self) -> dict:
        return {"batch_size": self.batch_size, "epochs": self.epochs,
                "base_lr": self.base_lr, "weight_decay": self.weight_decay,
                "seed": self.seed, "supervision": self.supervision,
                "train_encoders": self.train_encoders, "use_fusion": self.use_fusion,
                "loss": {"temperature": self.loss.temperature,
                         "learnable": self.loss.learnable},
                "fusion": {"threshold": self.fusion.threshold,
                           "epsilon": self.fusion.epsilon, "d": self.fusion.d}}


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """Half-cosine from base_lr (step 0) to 0 (final step); clamps past the end."""
    if total_steps <= 0:
        return base_lr
    step = min(max(step, 0), total_steps)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adamw_step(store: ParameterStore, grads: dict[str, np.ndarray],
               state: AdamState, lr: float, weight_decay: float,
               update_names=None) -> None:
    """One decoupled-decay Adam update: p <- p - lr*(m^/(sqrt(v^)+eps) + wd*p)."""
    names = store.names() if update_names is None else [n for n in store.names()
                                                        if n in update_names]
    state.t += 1
    bc1 = 1.0 - ADAM_BETA1 ** state.t
    bc2 = 1.0 - ADAM_BETA2 ** state.t
    for name in names:
        p = store[name]
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        wd = 0.0 if name in NO_DECAY else weight_decay
        p -= lr * ((m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS) + wd * p)


# -- checkpoint serialization --


@dataclass
class Checkpoint:
    store: ParameterStore
    adam: AdamState
    step: int
    config: dict


def save_checkpoint(path, ckpt: Checkpoint) -> int:
    """Binary, checksum-terminated, written atomically.  Returns the CRC-32."""
    blob = bytearray()
    blob += CKPT_MAGIC
    blob += struct.pack("<I", CKPT_VERSION)
    cfg_bytes = json.dumps(ckpt.config, separators=(",", ":"), sort_keys=True).encode()
    blob += struct.pack("<I", len(cfg_bytes))
    blob += cfg_bytes

    arrays: list[tuple[str, np.ndarray]] = []
    for name in ckpt.store.names():
        arrays.append((f"param/{name}", ckpt.store[name]))
    for name in sorted(ckpt.adam.m):
        arrays.append((f"adam_m/{name}", ckpt.adam.m[name]))
        arrays.append((f"adam_v/{name}", ckpt.adam.v[name]))
    arrays.append(("adam_t", np.array([[float(ckpt.adam.t)]])))
    arrays.append(("step", np.array([[float(ckpt.step)]])))

    blob += struct.pack("<I", len(arrays))
    for name, arr in arrays:
        nb = name.encode()
        blob += struct.pack("<I", len(nb))
        blob += nb
        blob += struct.pack("<II", arr.shape[0], arr.shape[1])
        blob += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    crc = zlib.crc32(bytes(blob))
    blob += struct.pack("<I", crc)

    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(bytes(blob))
    os.replace(tmp, path)
    return crc


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"missing checkpoint file {path}")
    blob = path.read_bytes()
    if len(blob) < 16 or blob[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path.name}: bad magic")
    stored_crc = struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(blob[:-4]) != stored_crc:
        raise CheckpointError(f"{path.name}: checksum mismatch")
    off = 4
    (version,) = struct.unpack_from("<I", blob, off)
    off += 4
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path.name}: unsupported version {version}")
    (cfg_len,) = struct.unpack_from("<I", blob, off)
    off += 4
    config = json.loads(blob[off:off + cfg_len].decode())
    off += cfg_len
    (n_arrays,) = struct.unpack_from("<I", blob, off)
    off += 4
    arrays: dict[str, np.ndarray] = {}
    for _ in range(n_arrays):
        (name_len,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + name_len].decode()
        off += name_len
        rows, cols = struct.unpack_from("<II", blob, off)
        off += 8
        count = rows * cols
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(rows, cols)
        arrays[name] = np.array(arr, dtype=np.float64)
        off += 8 * count
    if off != len(blob) - 4:
        raise CheckpointError(f"{path.name}: trailing bytes")

    store = ParameterStore()
    adam = AdamState()
    step = 0
    for name, arr in arrays.items():
        if name.startswith("param/"):
            store.add(name[len("param/"):], arr)
        elif name.startswith("adam_m/"):
            adam.m[name[len("adam_m/"):]] = arr
        elif name.startswith("adam_v/"):
            adam.v[name[len("adam_v/"):]] = arr
        elif name == "adam_t":
            adam.t = int(arr[0, 0])
        elif name == "step":
            step = int(arr[0, 0])
        else:
            raise CheckpointError(f"{path.name}: unknown array {name!r}")
    return Checkpoint(store=store, adam=adam, step=step, config=config)


def expected_shapes(spec: ModelSpec, with_projection: bool,
                    with_temperature: bool) -> dict[str, tuple[int, int]]:
    d = spec.d
    shapes = {
        "visual.cell_embedding": (spec.n_shapes * spec.n_colors, d),
        "visual.mix_w": (d, d), "visual.mix_b": (1, d),
        "text.vocab_embedding": (spec.vocab_size, d),
        "text.mix_w": (d, d), "text.mix_b": (1, d),
    }
    if with_temperature:
        shapes["log_temperature"] = (1, 1)
    if with_projection:
        shapes["projection.w"] = (d, d)
        shapes["projection.b"] = (1, d)
    return shapes


def verify_store_shapes(store: ParameterStore, spec: ModelSpec,
                        require_projection: bool = False) -> None:
    shapes = expected_shapes(spec, with_projection=require_projection,
                             with_temperature=False)
    for name, want in shapes.items():
        if name not in store:
            raise CheckpointError(f"checkpoint is missing array {name!r}")
        got = store[name].shape
        if got != want:
            raise CheckpointError(
                f"checkpoint array {name!r} has shape {got}, expected {want}")


@dataclass
class StepRecord:
    step: int
    stage: str
    loss: float
    lr: float
    temp: float

    def to_json(self) -> str:
        return json.dumps({"step": self.step, "stage": self.stage,
                           "loss": self.loss, "lr": self.lr, "temp": self.temp},
                          separators=(",", ":"))


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator):
    """Seeded permutation, last partial batch dropped."""
    order = rng.permutation(n)
    for start in range(0, n - batch_size + 1, batch_size):
        yield order[start:start + batch_size]


def _checkpoint_config(stage: str, spec: ModelSpec, cfg: TrainConfig,
                       dataset: Dataset) -> dict:
    return {"stage": stage, "spec": spec.to_dict(), "train": cfg.to_dict(),
            "world": dataset.config.to_dict(), "data_seed": dataset.seed}


def train_alignment(dataset: Dataset, cfg: TrainConfig, spec: ModelSpec,
                    store: ParameterStore | None = None,
                    checkpoint_path=None) -> tuple[Checkpoint, list[StepRecord]]:
    """Stage 1: contrastive alignment of pooled target-image and instruction
    features over the train split; supervision selects pseudo or noisy grids.
    """
    train = dataset.split("train")
    if not train:
        raise TrainingError("alignment: empty train split")
    rng = np.random.default_rng(cfg.seed)
    if store is None:
        store = init_encoder_store(spec, rng)
    if "log_temperature" not in store:
        store.add("log_temperature", [[math.log(cfg.loss.temperature)]])
    verify_store_shapes(store, spec)

    adam = AdamState()
    log: list[StepRecord] = []
    steps_per_epoch = len(train) // cfg.batch_size
    total_steps = cfg.epochs * steps_per_epoch
    step = 0
    ckpt = Checkpoint(store=store, adam=adam, step=step,
                      config=_checkpoint_config("align", spec, cfg, dataset))
    for _ in range(cfg.epochs):
        for batch_idx in _epoch_batches(len(train), cfg.batch_size, rng):
            lr = cosine_lr(step, total_steps, cfg.base_lr)
            batch = [train[i] for i in batch_idx]
            grids = [s.pseudo_target if cfg.supervision == "pseudo" else s.noisy_target
                     for s in batch]
            tape = Tape()
            tracked = store.tracked(tape)
            v_hat = pooled_visual_batch(grids, tracked, spec)
            t_hat = pooled_text_batch([s.token_ids for s in batch], tracked, spec)
            if cfg.loss.learnable:
                temp = dc.exp(tracked["log_temperature"])
            else:
                temp = cfg.loss.temperature
            if np.ptp(v_hat.data, axis=0).max() < 1e-12:
                log.append(StepRecord(step, "align", float("nan"), lr,
                                      _temp_value(store, cfg)))
                step += 1
                continue     # degenerate batch: all features identical
            loss = infonce(v_hat, t_hat, temp)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(f"alignment: non-finite loss at step {step}")
            tape.backward(loss)
            adamw_step(store, store.gradients(tracked), adam, lr, cfg.weight_decay)
            log.append(StepRecord(step, "align", value, lr, _temp_value(store, cfg)))
            step += 1
        ckpt.step = step
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, ckpt)
    ckpt.step = step
    return ckpt, log


def _temp_value(store: ParameterStore, cfg: TrainConfig) -> float:
    if "log_temperature" in store:
        return float(math.exp(store["log_temperature"][0, 0]))
    return cfg.loss.temperature


def add_projection(store: ParameterStore, spec: ModelSpec,
                   rng: np.random.Generator) -> None:
    if "projection.w" not in store:
        store.add("projection.w",
                  np.eye(spec.d) + rng.uniform(-0.01, 0.01, size=(spec.d, spec.d)))
        store.add("projection.b", np.zeros((1, spec.d)))


def train_fusion(dataset: Dataset, cfg: TrainConfig, spec: ModelSpec,
                 init: Checkpoint | None = None,
                 checkpoint_path=None) -> tuple[Checkpoint, list[StepRecord]]:
    """Stage 2: align composed queries with pooled target features.

    ``init`` is normally the stage-1 checkpoint; None trains from a fresh
    seeded initialization (the from-scratch ablation arm).  The projection
    layer is created here if absent.
    """
    train = dataset.split("train")
    if not train:
        raise TrainingError("fusion: empty train split")
    rng = np.random.default_rng(cfg.seed)
    store = init.store.copy() if init is not None else init_encoder_store(spec, rng)
    add_projection(store, spec, rng)
    verify_store_shapes(store, spec, require_projection=True)

    trainable = set(store.names()) - {"log_temperature"}
    if not cfg.train_encoders:
        trainable = {"projection.w", "projection.b"}

    adam = AdamState()
    log: list[StepRecord] = []
    steps_per_epoch = len(train) // cfg.batch_size
    total_steps = cfg.epochs * steps_per_epoch
    step = 0
    ckpt = Checkpoint(store=store, adam=adam, step=step,
                      config=_checkpoint_config("fuse", spec, cfg, dataset))
    for _ in range(cfg.epochs):
        for batch_idx in _epoch_batches(len(train), cfg.batch_size, rng):
            lr = cosine_lr(step, total_steps, cfg.base_lr)
            batch = [train[i] for i in batch_idx]
            tape = Tape()
            tracked = store.tracked(tape)
            projection = (tracked["projection.w"], tracked["projection.b"])
            queries = []
            for s in batch:
                V = encode_visual(s.reference, tracked, spec)
                T = encode_text(s.token_ids, tracked, spec)
                if cfg.use_fusion:
                    queries.append(compose_query(V, T, cfg.fusion, projection))
                else:
                    queries.append(compose_query_no_fusion(V, T, projection))
            Q = concat_rows(queries)
            Tgt = pooled_visual_batch([s.target for s in batch], tracked, spec)
            loss = infonce(Q, Tgt, cfg.loss.temperature)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(
                    f"fusion: non-finite loss at step {step} "
                    f"(lr={lr:.3e}, batch ids={[s.id for s in batch]})")
            tape.backward(loss)
            adamw_step(store, store.gradients(tracked), adam, lr,
                       cfg.weight_decay, update_names=trainable)
            log.append(StepRecord(step, "fuse", value, lr, cfg.loss.temperature))
            step += 1
        ckpt.step = step
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path, ckpt)
    ckpt.step = step
    return ckpt, log


def write_log(path, records: list[StepRecord]) -> None:
    Path(path).write_text("".join(r.to_json() + "\n" for r in records),
                          encoding="utf-8")
