"""Self-supervised optimization: Adam, cosine schedule, checkpoints, loss logs."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import os
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import numerics as nx
from .featurestore import FeatureStore
from .losses import LossReport, total_loss
from .model import ModelConfig, ModelParams, encode_set, init_params
from .numerics import Tensor
from .sampler import BatchSpec, assemble_batch, epoch_batches

log = logging.getLogger(__name__)

CKPT_MAGIC = b"SCKP"
CKPT_VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class TrainingError(RuntimeError):
    pass


class CheckpointError(Exception):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    lr_max: float = 1e-3
    lr_min: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05
    seed: int = 0
    use_mcm: bool = True
    use_set: bool = True
    checkpoint_every: int = 0
    precision: str = "float32"

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not (self.use_mcm or self.use_set):
            raise ValueError("at least one of use_mcm / use_set must be on")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 for contrastive losses")
        if not 0 <= self.lr_min <= self.lr_max:
            raise ValueError("need 0 <= lr_min <= lr_max")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.eps <= 0:
            raise ValueError("invalid Adam hyperparameters")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")

    def canonical(self) -> str:
        return ";".join(f"{f.name}={getattr(self, f.name)!r}" for f in fields(self))


def config_hash(model_config: ModelConfig, train_config: TrainConfig) -> bytes:
    return hashlib.sha256((model_config.canonical() + "|" + train_config.canonical()).encode()).digest()


def cosine_lr(step: int, total_steps: int, lr_max: float, lr_min: float) -> float:
    if total_steps <= 0 or step >= total_steps:
        return lr_min
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> AdamState:
        return cls({k: np.zeros_like(t.data) for k, t in params.items()},
                   {k: np.zeros_like(t.data) for k, t in params.items()})


def adam_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, step: int,
              lr: float, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
              weight_decay: float = 0.0) -> None:
    """In-place Adam update with bias correction and decoupled weight decay."""
    if step < 1:
        raise ValueError("Adam step counter starts at 1")
    if not np.all(np.isfinite(grad)):
        raise TrainingError("non-finite gradient")
    b1, b2 = betas
    m *= b1
    m += (1 - b1) * grad
    v *= b2
    v += (1 - b2) * grad * grad
    if weight_decay:
        param *= 1 - lr * weight_decay
    m_hat = m / (1 - b1 ** step)
    v_hat = v / (1 - b2 ** step)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig
    params: ModelParams
    adam: AdamState
    epoch: int
    rng_state: dict
    config_hash: bytes = b""

    def __post_init__(self):
        if not self.config_hash:
            self.config_hash = config_hash(self.model_config, self.train_config)


@dataclass
class EpochLog:
    epoch: int
    mcm: float
    set: float
    total: float
    lr: float


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list[EpochLog] = field(default_factory=list)
    reports: list[LossReport] = field(default_factory=list)
    lr_trace: list[float] = field(default_factory=list)


# ------------------------------------------------------------------ config text


def config_to_text(cfg) -> str:
    return "".join(f"{f.name}={_fmt(getattr(cfg, f.name))}\n" for f in fields(cfg))


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "on" if value else "off"
    return repr(value) if isinstance(value, float) else str(value)


def parse_value(raw: str, kind):
    raw = raw.strip()
    if kind in (bool, "bool"):
        low = raw.lower()
        if low in ("1", "true", "on", "yes"):
            return True
        if low in ("0", "false", "off", "no"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind in (int, "int"):
        return int(raw)
    if kind in (float, "float"):
        return float(raw)
    return raw


def config_from_text(cls, text: str):
    types = {f.name: f.type for f in fields(cls)}
    values = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, _, raw = line.partition("=")
        key = key.strip()
        if key not in types:
            raise CheckpointError(f"unknown {cls.__name__} key {key!r}")
        values[key] = parse_value(raw, types[key])
    return cls(**values)


# ------------------------------------------------------------------ checkpoints


def _pack_text(text: str) -> bytes:
    raw = text.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    parts = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION), ckpt.config_hash,
             struct.pack("<QI", ckpt.adam.step, ckpt.epoch),
             _pack_text(config_to_text(ckpt.model_config)),
             _pack_text(config_to_text(ckpt.train_config)),
             _pack_text(json.dumps(ckpt.rng_state, sort_keys=True))]
    blocks = [(f"param/{k}", t.data) for k, t in ckpt.params.items()]
    blocks += [(f"adam_m/{k}", a) for k, a in ckpt.adam.m.items()]
    blocks += [(f"adam_v/{k}", a) for k, a in ckpt.adam.v.items()]
    parts.append(struct.pack("<I", len(blocks)))
    for name, arr in blocks:
        arr = np.ascontiguousarray(arr)
        dt = arr.dtype.newbyteorder("<")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)) + raw_name)
        parts.append(struct.pack("<BI", _DTYPE_CODES[dt], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype(dt, copy=False).tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def decode_checkpoint(blob: bytes, expected_hash: bytes | None = None) -> Checkpoint:
    if len(blob) < 4 + 4 + 32 + 32:
        raise CheckpointError("checkpoint file too short")
    if blob[:4] != CKPT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {blob[:4]!r}")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint checksum mismatch (file corrupted)")
    (version,) = struct.unpack_from("<I", body, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    stored_hash = body[8:40]
    step, epoch = struct.unpack_from("<QI", body, 40)
    off = 52

    def text() -> str:
        nonlocal off
        (n,) = struct.unpack_from("<I", body, off)
        off += 4
        s = body[off:off + n].decode("utf-8")
        off += n
        return s

    model_config = config_from_text(ModelConfig, text())
    train_config = config_from_text(TrainConfig, text())
    rng_state = json.loads(text())
    if config_hash(model_config, train_config) != stored_hash:
        raise CheckpointError("stored config hash does not match stored configs")
    if expected_hash is not None and stored_hash != expected_hash:
        raise CheckpointError("checkpoint config hash does not match the requested configuration")
    (count,) = struct.unpack_from("<I", body, off)
    off += 4
    params, m, v = ModelParams(), {}, {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", body, off)
        off += 4
        name = body[off:off + n].decode("utf-8")
        off += n
        code, ndim = struct.unpack_from("<BI", body, off)
        off += 5
        shape = struct.unpack_from(f"<{ndim}I", body, off)
        off += 4 * ndim
        dt = _CODE_DTYPES[code]
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(body, dtype=dt, count=size, offset=off).reshape(shape).astype(dt.newbyteorder("="))
        off += size * dt.itemsize
        kind, _, key = name.partition("/")
        if kind == "param":
            params[key] = Tensor(arr, requires_grad=True, dtype=arr.dtype)
        elif kind == "adam_m":
            m[key] = arr
        elif kind == "adam_v":
            v[key] = arr
        else:
            raise CheckpointError(f"unknown block {name!r}")
    if off != len(body):
        raise CheckpointError("trailing bytes in checkpoint")
    return Checkpoint(model_config, train_config, params, AdamState(m, v, step), epoch, rng_state, stored_hash)


def save_checkpoint(ckpt: Checkpoint, path) -> int:
    """Write atomically (temp file + rename); returns bytes written."""
    blob = encode_checkpoint(ckpt)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(blob)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)
    return len(blob)


def load_checkpoint(path, expected_hash: bytes | None = None) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes(), expected_hash)


def write_loss_log(entries: list[EpochLog], path) -> None:
    lines = ["epoch,mcm,set,total,lr"]
    lines += [f"{e.epoch},{e.mcm!r},{e.set!r},{e.total!r},{e.lr!r}" for e in entries]
    Path(path).write_text("\n".join(lines) + "\n")


# ------------------------------------------------------------------ training


def _rngs(seed: int) -> tuple[np.random.SeedSequence, np.random.Generator]:
    init_seq, data_seq = np.random.SeedSequence(seed).spawn(2)
    return init_seq, np.random.Generator(np.random.PCG64(data_seq))


def _decay_mask(params: ModelParams) -> dict[str, bool]:
    # only matrices decay; biases, norm gains and learned tokens do not
    return {k: t.data.ndim >= 2 for k, t in params.items()}


def train(store: FeatureStore, train_config: TrainConfig, model_config: ModelConfig,
          resume: Checkpoint | None = None, checkpoint_path=None, log_path=None,
          stop_after_epoch: int | None = None) -> TrainResult:
    """Run (or continue) self-supervised training on ``store``.

    ``stop_after_epoch`` ends the run early without changing the schedule,
    which is how an interrupted run is simulated.
    """
    train_config.validate()
    model_config.validate()
    if model_config.d_in != store.feature_dim:
        raise ValueError(f"model d_in={model_config.d_in} but store feature_dim={store.feature_dim}")
    spec = BatchSpec(train_config.batch_size, model_config.K, model_config.mask_ratio)
    spec.validate()
    short = [v.id for v in store.videos if v.clip_count < 2 * spec.K]
    if short:
        raise ValueError(f"{len(short)} videos have fewer than 2K={2 * spec.K} clips (first: {short[0]!r})")

    with nx.precision(train_config.precision):
        dtype = nx.get_dtype()
        init_seq, rng = _rngs(train_config.seed)
        if resume is None:
            params = init_params(model_config, init_seq, dtype=dtype)
            adam = AdamState.zeros_like(params)
            start_epoch = 0
        else:
            expected = config_hash(model_config, train_config)
            if resume.config_hash != expected:
                raise CheckpointError("resume checkpoint was written with a different configuration")
            params = resume.params.copy()
            adam = AdamState({k: a.copy() for k, a in resume.adam.m.items()},
                             {k: a.copy() for k, a in resume.adam.v.items()}, resume.adam.step)
            start_epoch = resume.epoch
            rng.bit_generator.state = resume.rng_state

        n = len(store)
        steps_per_epoch = len(epoch_batches(n, spec.B, np.random.default_rng(0)))
        if steps_per_epoch == 0:
            raise ValueError(f"store of {n} videos yields no batch of >= 2")
        total_steps = train_config.epochs * steps_per_epoch
        decay = _decay_mask(params)
        betas = (train_config.beta1, train_config.beta2)
        result = TrainResult(checkpoint=None)  # type: ignore[arg-type]
        end_epoch = train_config.epochs if stop_after_epoch is None else min(stop_after_epoch, train_config.epochs)
        n_params = params.count()

        def snapshot(epoch: int) -> Checkpoint:
            return Checkpoint(model_config, train_config, params.copy(),
                              AdamState({k: a.copy() for k, a in adam.m.items()},
                                        {k: a.copy() for k, a in adam.v.items()}, adam.step),
                              epoch, rng.bit_generator.state)

        for epoch in range(start_epoch, end_epoch):
            sums = [0.0, 0.0]
            batches = epoch_batches(n, spec.B, rng)
            lr = train_config.lr_max
            for video_idx in batches:
                batch = assemble_batch(store, video_idx, spec, rng)
                lr = cosine_lr(adam.step, total_steps, train_config.lr_max, train_config.lr_min)
                params.zero_grad()
                enc = encode_set(batch.features, batch.coords, batch.mask, params, model_config)
                loss, report = total_loss(enc, batch.features, batch.mask, params, model_config.tau,
                                          train_config.use_mcm, train_config.use_set)
                if not math.isfinite(report.total):
                    raise TrainingError(f"non-finite loss at epoch {epoch}, step {adam.step}")
                loss.backward()
                adam.step += 1
                for k, t in params.items():
                    adam_step(t.data, t.grad, adam.m[k], adam.v[k], adam.step, lr, betas,
                              train_config.eps, train_config.weight_decay if decay[k] else 0.0)
                sums[0] += report.mcm
                sums[1] += report.set
                result.reports.append(report)
                result.lr_trace.append(lr)
            mcm, st = sums[0] / len(batches), sums[1] / len(batches)
            entry = EpochLog(epoch, mcm, st, mcm + st, lr)
            result.log.append(entry)
            log.info("epoch %d mcm=%.4f set=%.4f total=%.4f lr=%.2e", epoch, mcm, st, mcm + st, lr)
            every = train_config.checkpoint_every
            if checkpoint_path is not None and every and (epoch + 1) % every == 0 and epoch + 1 < end_epoch:
                save_checkpoint(snapshot(epoch + 1), checkpoint_path)
            if params.count() != n_params:
                raise TrainingError("parameter count changed during training")

        result.checkpoint = snapshot(end_epoch if end_epoch > start_epoch else start_epoch)
        if checkpoint_path is not None:
            save_checkpoint(result.checkpoint, checkpoint_path)
        if log_path is not None:
            write_loss_log(result.log, log_path)
    return result


def replace_config(cfg, **changes):
    return dataclasses.replace(cfg, **changes)
