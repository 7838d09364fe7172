"""Adam training loop with best-validation checkpointing, and the checkpoint file."""

from __future__ import annotations

import logging
import math
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numcore as nc
from .datapipe import DatasetSplit, Sample
from .seqmodel import ModelConfig, count_parameters, cross_entropy, init_parameters, model_forward, param_shapes

__all__ = [
    "TrainConfig",
    "AdamState",
    "Checkpoint",
    "CheckpointError",
    "BadMagicError",
    "TruncatedCheckpointError",
    "ShapeMismatchError",
    "TrainingDivergedError",
    "adam_step",
    "clip_grad_norm",
    "train",
    "dataset_loss",
    "save_checkpoint",
    "load_checkpoint",
]

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"ECSSCK01"


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 10
    grad_clip_norm: float = 1.0
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.patience < 0 or self.max_epochs < 0:
            raise ValueError("patience and max_epochs must be >= 0")


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


class TrainingDivergedError(FloatingPointError):
    pass


def clip_grad_norm(params: dict[str, nc.Tensor], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params.values()))
    if total > max_norm:
        scale = max_norm / total
        for p in params.values():
            p.grad = p.grad * scale
    return total


def adam_step(params: dict[str, nc.Tensor], state: AdamState, cfg: TrainConfig) -> AdamState:
    """One in-place Adam update from ``.grad`` after global-norm clipping."""
    for name, p in params.items():
        if not np.isfinite(p.grad).all():
            raise TrainingDivergedError(f"non-finite gradient in parameter {name}")
    clip_grad_norm(params, cfg.grad_clip_norm)
    state.step += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
    return state


# ------------------------------------------------------------------ training


def _stack(samples: list[Sample]) -> tuple[np.ndarray, np.ndarray]:
    X = np.stack([s.X for s in samples]).astype(np.float64)
    Y = np.stack([s.y for s in samples])
    return X, Y


def dataset_loss(samples: list[Sample], params, cfg: ModelConfig, batch_size: int = 64) -> float:
    """Mean per-sample cross-entropy, summed in sample order."""
    frozen = {k: nc.tensor(v.data) for k, v in params.items()}
    total = 0.0
    for i in range(0, len(samples), batch_size):
        X, Y = _stack(samples[i:i + batch_size])
        total += float(cross_entropy(Y, model_forward(X, frozen, cfg)).data)
    return total / len(samples)


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def tensors(self) -> dict[str, nc.Tensor]:
        return {k: nc.parameter(v) for k, v in self.params.items()}


def train(dataset: DatasetSplit, model_cfg: ModelConfig, train_cfg: TrainConfig = TrainConfig(),
          on_epoch=None) -> tuple[Checkpoint, list[str]]:
    """Fit on ``dataset.train``; keep the parameters with the lowest validation loss.

    Epoch 0 is the untrained model, evaluated so the returned checkpoint is
    never worse on validation than any logged epoch. Each later epoch
    shuffles the training samples with the seeded generator and takes one
    Adam step per minibatch on the batch-summed cross-entropy.
    """
    if not dataset.train or not dataset.validation:
        raise ValueError("train and validation splits must be non-empty")
    rng = nc.seeded_rng(train_cfg.seed)
    params = init_parameters(model_cfg, seed=train_cfg.seed)
    state = AdamState()
    lines: list[str] = []

    def emit(epoch, tr, va):
        line = f"epoch={epoch} train_loss={tr!r} val_loss={va!r}"
        lines.append(line)
        log.info(line)
        if on_epoch is not None:
            on_epoch(line)

    best_val = dataset_loss(dataset.validation, params, model_cfg)
    emit(0, dataset_loss(dataset.train, params, model_cfg), best_val)
    best = {k: p.data.copy() for k, p in params.items()}
    best_epoch, stale, epochs_run = 0, 0, 0
    n = len(dataset.train)
    for epoch in range(1, train_cfg.max_epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for i in range(0, n, train_cfg.batch_size):
            batch = [dataset.train[j] for j in order[i:i + train_cfg.batch_size]]
            X, Y = _stack(batch)
            nc.zero_grad(params.values())
            loss = cross_entropy(Y, model_forward(X, params, model_cfg))
            if not np.isfinite(loss.data):
                raise TrainingDivergedError(f"non-finite training loss at epoch {epoch}")
            nc.backward(loss)
            try:
                adam_step(params, state, train_cfg)
            except TrainingDivergedError as exc:
                raise TrainingDivergedError(f"epoch {epoch}: {exc}") from None
            total += float(loss.data)
        val = dataset_loss(dataset.validation, params, model_cfg)
        if not np.isfinite(val):
            raise TrainingDivergedError(f"non-finite validation loss at epoch {epoch}")
        epochs_run = epoch
        emit(epoch, total / n, val)
        if val < best_val:
            best_val, best_epoch, stale = val, epoch, 0
            best = {k: p.data.copy() for k, p in params.items()}
        else:
            stale += 1
            if stale >= train_cfg.patience:
                break
    meta = {"epochs_run": epochs_run, "best_epoch": best_epoch, "best_val_loss": best_val,
            "seed": train_cfg.seed, "learning_rate": train_cfg.learning_rate,
            "batch_size": train_cfg.batch_size}
    return Checkpoint(model_cfg, best, meta), lines


# ---------------------------------------------------------------- checkpoint


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


def _checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    header = {f"model.{k}": v for k, v in asdict(ckpt.config).items()}
    header.update({f"meta.{k}": (repr(v) if isinstance(v, float) else v) for k, v in ckpt.meta.items()})
    head = "".join(f"{k}={v}\n" for k, v in header.items()).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", len(head)), head]
    shapes = param_shapes(ckpt.config)
    for name in shapes:
        arr = np.ascontiguousarray(ckpt.params[name], dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    shapes = param_shapes(ckpt.config)
    if set(shapes) != set(ckpt.params):
        raise ShapeMismatchError("checkpoint tensors do not match the model configuration")
    for name, shape in shapes.items():
        if tuple(ckpt.params[name].shape) != shape:
            raise ShapeMismatchError(f"{name}: shape {ckpt.params[name].shape} != {shape}")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(_checkpoint_bytes(ckpt))
    os.replace(tmp, path)


def _meta_value(v: str):
    for cast in (int, float):
        try:
            return cast(v)
        except ValueError:
            pass
    return v


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise BadMagicError(f"{path}: bad magic")
    pos = 8

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise TruncatedCheckpointError(f"{path}: truncated at byte {pos}")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    (hlen,) = struct.unpack("<I", take(4))
    model, meta = {}, {}
    for line in take(hlen).decode("utf-8").splitlines():
        key, _, val = line.partition("=")
        scope, _, name = key.partition(".")
        (model if scope == "model" else meta)[name] = val
    cfg = ModelConfig.from_dict(model)
    params = {}
    while pos < len(raw):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        params[name] = np.frombuffer(take(8 * count), dtype="<f8").reshape(dims).astype(np.float64)
    expected = param_shapes(cfg)
    if set(expected) != set(params):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise ShapeMismatchError(f"{path}: tensors do not match config (missing {missing}, extra {extra})")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise ShapeMismatchError(f"{path}: {name} has shape {params[name].shape}, config expects {shape}")
    total, _ = count_parameters(cfg)
    assert total == sum(p.size for p in params.values())
    return Checkpoint(cfg, params, {k: _meta_value(v) for k, v in meta.items()})
