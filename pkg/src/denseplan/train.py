"""Momentum SGD, learning-rate schedules, datasets, checkpoints and the training loop."""
from __future__ import annotations

import enum
import math
import os
import struct
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from . import ops
from .densenet import DenseNetConfig
from .errors import ConfigError, CorruptCheckpointError, FormatError, RangeError, ShapeError
from .graph import ExecutionStrategy, GraphPlan, build_plan, step_trace
from .tensor import resolve_dtype

# --------------------------------------------------------------------------
# schedules


class ScheduleKind(str, enum.Enum):
    STEP = "step"
    COSINE = "cosine"


@dataclass(frozen=True)
class LrSchedule:
    """Per-epoch learning rate.

    Cosine: ``0.5 * base_lr * (cos(pi * t / T) + 1)``, which with the default
    base of 0.1 is ``0.05 * (cos(pi * t / T) + 1)``, clipped below at
    ``floor``.  Step: ``base_lr * factor ** (milestones passed)``.
    """

    kind: ScheduleKind
    base_lr: float = 0.1
    total_epochs: int = 100
    milestones: tuple = ()
    factor: float = 0.1
    floor: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", ScheduleKind(self.kind))
        if self.total_epochs < 1:
            raise ConfigError("total_epochs must be >= 1")
        if not self.base_lr > 0:
            raise ConfigError("base_lr must be positive")
        if self.floor < 0:
            raise ConfigError("cosine floor must be >= 0")
        if not 0 < self.factor <= 1:
            raise ConfigError("step factor must be in (0, 1]")

    @classmethod
    def cosine(cls, total_epochs: int, base_lr: float = 0.1, floor: float = 0.0) -> "LrSchedule":
        return cls(ScheduleKind.COSINE, base_lr, total_epochs, floor=floor)

    @classmethod
    def step(cls, total_epochs: int, base_lr: float = 0.1, factor: float = 0.1) -> "LrSchedule":
        """Drops by ``factor`` at 50% and 75% of training."""
        milestones = (total_epochs // 2, (3 * total_epochs) // 4)
        return cls(ScheduleKind.STEP, base_lr, total_epochs, milestones, factor)


def lr_at(schedule: LrSchedule, t: float) -> float:
    if not 0 <= t < schedule.total_epochs:
        raise RangeError(f"epoch {t} outside [0, {schedule.total_epochs})")
    if schedule.kind is ScheduleKind.COSINE:
        lr = 0.5 * schedule.base_lr * (math.cos(math.pi * t / schedule.total_epochs) + 1.0)
        return max(lr, schedule.floor)
    passed = sum(1 for m in schedule.milestones if t >= m)
    return schedule.base_lr * schedule.factor**passed


# --------------------------------------------------------------------------
# optimiser


@dataclass
class OptimizerState:
    velocity: dict
    momentum: float = 0.9
    weight_decay: float = 1e-4
    nesterov: bool = False

    @classmethod
    def create(cls, params: dict, momentum=0.9, weight_decay=1e-4, nesterov=False) -> "OptimizerState":
        if not 0 <= momentum < 1:
            raise ConfigError("momentum must be in [0, 1)")
        if weight_decay < 0:
            raise ConfigError("weight decay must be >= 0")
        velocity = {name: np.zeros_like(np.asarray(p)) for name, p in params.items()}
        return cls(velocity, momentum, weight_decay, nesterov)


def sgd_step(params: dict, grads: dict, opt: OptimizerState, lr: float) -> None:
    """In-place update: ``v = mu*v + g + wd*p``; ``p -= lr*v``.

    With ``nesterov`` the step uses ``g + wd*p + mu*v`` instead of ``v``.
    """
    for name, p in params.items():
        g = grads[name]
        v = opt.velocity.get(name)
        if v is None or g.shape != p.shape or v.shape != p.shape:
            raise ShapeError(f"{name}: parameter, gradient and velocity shapes disagree")
        d = g + opt.weight_decay * p
        v *= opt.momentum
        v += d
        if opt.nesterov:
            p -= lr * (d + opt.momentum * v)
        else:
            p -= lr * v


# --------------------------------------------------------------------------
# data

CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2470, 0.2435, 0.2616)
CIFAR_RECORD = 3073


@dataclass
class DataSource:
    kind: str
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    seed: int = 0
    stratified: bool = False

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise FormatError("image and label counts differ")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise FormatError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def sample_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def batches(self, batch_size: int, epoch: int, shuffle: bool = True) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        """Full batches in a per-epoch deterministic order; a trailing partial batch is dropped.

        A stratified source deals the classes round-robin before cutting
        batches, so every batch has (nearly) the same label mix.  That keeps
        train-mode batch statistics from drifting with batch composition.
        """
        if batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        order = np.arange(len(self))
        if shuffle:
            rng = np.random.Generator(np.random.PCG64([self.seed, epoch]))
            order = rng.permutation(len(self))
            if self.stratified:
                labels = self.labels[order]
                rank = np.zeros(len(order), dtype=np.int64)
                for c in range(self.num_classes):
                    members = labels == c
                    rank[members] = np.arange(int(members.sum()))
                class_order = rng.permutation(self.num_classes)[labels]
                order = order[np.lexsort((class_order, rank))]
                for start in range(0, len(order), batch_size):
                    chunk = order[start:start + batch_size]
                    order[start:start + batch_size] = chunk[rng.permutation(len(chunk))]
        for start in range(0, len(self) - batch_size + 1, batch_size):
            idx = order[start:start + batch_size]
            yield self.images[idx], self.labels[idx]


def synth_dataset(seed: int, n: int, shape, classes: int, noise: float = 0.5) -> DataSource:
    """Class-conditional Gaussian blobs: class ``c`` is centred at ``c / classes``.

    Labels cycle through the classes (so every class appears when
    ``n >= classes``) and are then shuffled.
    """
    if classes < 1:
        raise ConfigError("classes must be >= 1")
    if n < classes:
        raise ConfigError(f"need n >= classes, got n={n}, classes={classes}")
    shape = tuple(int(d) for d in shape)
    rng = np.random.Generator(np.random.PCG64(seed))
    labels = rng.permutation(np.arange(n) % classes).astype(np.int64)
    images = rng.standard_normal((n,) + shape) * noise
    images += (labels / classes).reshape((n,) + (1,) * len(shape))
    return DataSource("synth", images, labels, classes, seed, stratified=True)


def load_cifar10_batch(path, mean=CIFAR_MEAN, std=CIFAR_STD) -> tuple[np.ndarray, np.ndarray]:
    """Parse one CIFAR-10 binary batch file into normalised (N,3,32,32) images and labels."""
    raw = Path(path).read_bytes()
    if len(raw) % CIFAR_RECORD:
        raise FormatError(f"{path}: {len(raw)} bytes is not a whole number of {CIFAR_RECORD}-byte records")
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise FormatError(f"{path}: record {bad} has label byte {labels[bad]} > 9")
    mean = np.asarray(mean, dtype=np.float64).reshape(1, 3, 1, 1)
    std = np.asarray(std, dtype=np.float64).reshape(1, 3, 1, 1)
    if np.any(std <= 0):
        raise ConfigError("normalisation std must be positive")
    images = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return (images - mean) / std, labels


def load_cifar10_dir(directory, mean=CIFAR_MEAN, std=CIFAR_STD, seed: int = 0, pattern="data_batch_*.bin") -> DataSource:
    files = sorted(Path(directory).glob(pattern))
    if not files:
        raise FormatError(f"no files matching {pattern!r} in {directory}")
    parts = [load_cifar10_batch(f, mean, std) for f in files]
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    return DataSource("cifar10", images, labels, 10, seed)


# --------------------------------------------------------------------------
# checkpoints
#
# little-endian layout:
#   b"DPLN" | u32 version | u8 dtype tag | u32 epoch
#   f64 momentum | f64 weight_decay | u8 nesterov | u32 tensor count
#   per tensor: u32 name length | utf-8 name | u32 ndim | u64 dims... | raw elements
#   u32 crc32 of everything above

MAGIC = b"DPLN"
FORMAT_VERSION = 1
_DTYPE_TAGS = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


def save_checkpoint(path, params: dict, opt: OptimizerState | None, epoch: int) -> None:
    """Write parameters (and optimizer velocities, if given) atomically."""
    tensors = [(f"param/{k}", np.asarray(v)) for k, v in params.items()]
    if opt is not None:
        tensors += [(f"velocity/{k}", np.asarray(v)) for k, v in opt.velocity.items()]
    dtypes = {a.dtype.newbyteorder("<") for _, a in tensors}
    if len(dtypes) > 1:
        raise ShapeError(f"checkpoint tensors must share one element type, got {sorted(map(str, dtypes))}")
    dt = dtypes.pop() if dtypes else np.dtype("<f8")
    if dt not in _DTYPE_TAGS:
        raise ShapeError(f"unsupported checkpoint element type {dt}")
    momentum, wd, nesterov = (opt.momentum, opt.weight_decay, opt.nesterov) if opt else (0.0, 0.0, False)
    chunks = [
        MAGIC,
        struct.pack("<IBI", FORMAT_VERSION, _DTYPE_TAGS[dt], epoch),
        struct.pack("<ddBI", momentum, wd, int(nesterov), len(tensors)),
    ]
    for name, arr in tensors:
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)) + encoded)
        chunks.append(struct.pack(f"<I{arr.ndim}Q", arr.ndim, *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    body = b"".join(chunks)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(body + struct.pack("<I", zlib.crc32(body)))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.buf):
            raise CorruptCheckpointError("checkpoint truncated")
        out = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return out

    def raw(self, size: int) -> bytes:
        if self.pos + size > len(self.buf):
            raise CorruptCheckpointError("checkpoint truncated")
        out = self.buf[self.pos:self.pos + size]
        self.pos += size
        return out


def load_checkpoint(path) -> tuple[dict, OptimizerState, int]:
    data = Path(path).read_bytes()
    if len(data) < 8 or data[:4] != MAGIC:
        raise CorruptCheckpointError(f"{path}: bad magic {data[:4]!r}")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CorruptCheckpointError(f"{path}: checksum mismatch")
    r = _Reader(body)
    r.raw(4)
    version, tag, epoch = r.take("<IBI")
    if version != FORMAT_VERSION:
        raise CorruptCheckpointError(f"{path}: unsupported format version {version}")
    if tag not in _TAG_DTYPES:
        raise CorruptCheckpointError(f"{path}: unknown element type tag {tag}")
    dt = _TAG_DTYPES[tag]
    momentum, wd, nesterov, count = r.take("<ddBI")
    params, velocity = {}, {}
    for _ in range(count):
        (nlen,) = r.take("<I")
        name = r.raw(nlen).decode("utf-8")
        (ndim,) = r.take("<I")
        dims = r.take(f"<{ndim}Q")
        size = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        arr = np.frombuffer(r.raw(size), dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
        group, _, key = name.partition("/")
        {"param": params, "velocity": velocity}.get(group, params)[key] = arr
    if r.pos != len(body):
        raise CorruptCheckpointError(f"{path}: trailing bytes after tensors")
    return params, OptimizerState(velocity, momentum, wd, bool(nesterov)), epoch


# --------------------------------------------------------------------------
# training loop


@dataclass
class TrainConfig:
    epochs: int = 30
    batch: int = 32
    seed: int = 0
    strategy: str = "shared-all"
    dtype: str = "f64"
    schedule: str = "cosine"
    base_lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    nesterov: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch < 1:
            raise ConfigError("batch must be >= 1")
        try:
            ExecutionStrategy.parse(self.strategy)
            ScheduleKind(self.schedule)
            resolve_dtype(self.dtype)
        except (ValueError, ShapeError) as exc:
            raise ConfigError(str(exc)) from None

    def lr_schedule(self) -> LrSchedule:
        if ScheduleKind(self.schedule) is ScheduleKind.COSINE:
            return LrSchedule.cosine(self.epochs, self.base_lr)
        return LrSchedule.step(self.epochs, self.base_lr)


@dataclass
class EpochRow:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    feature_peak_bytes: int
    param_bytes: int
    step_ms: float


@dataclass
class TrainResult:
    rows: list
    plan: GraphPlan
    opt: OptimizerState
    history: list = field(default_factory=list)


def train(
    model: DenseNetConfig,
    data: DataSource,
    tc: TrainConfig,
    on_epoch: Callable[[EpochRow], None] | None = None,
) -> TrainResult:
    """Train ``model`` on ``data`` and return one row per epoch.

    Loss and accuracy are averaged over the epoch's batches as seen during
    the train-mode step.  Everything except ``step_ms`` is deterministic.
    """
    if len(data) == 0:
        raise ConfigError("dataset is empty")
    if data.num_classes != model.num_classes:
        raise ConfigError(f"model has {model.num_classes} classes, data has {data.num_classes}")
    if data.sample_shape[0] != model.in_channels:
        raise ConfigError(f"model expects {model.in_channels} channels, data has {data.sample_shape[0]}")
    batch = min(tc.batch, len(data))
    dtype = resolve_dtype(tc.dtype)
    plan = build_plan(model, tc.strategy, batch, data.sample_shape, seed=tc.seed, dtype=dtype)
    params = {name: plan.params[name].data for name in plan.trainable}
    opt = OptimizerState.create(params, tc.momentum, tc.weight_decay, tc.nesterov)
    schedule = tc.lr_schedule()
    rows = []
    for epoch in range(tc.epochs):
        lr = lr_at(schedule, epoch)
        losses, correct, seen, peak, elapsed = [], 0, 0, 0, 0.0
        for x, y in data.batches(batch, epoch):
            t0 = time.perf_counter()
            res = step_trace(plan, x.astype(dtype, copy=False), y)
            sgd_step(params, res.grads, opt, lr)
            elapsed += time.perf_counter() - t0
            losses.append(res.loss)
            correct += int(np.sum(np.argmax(res.logits, axis=1) == y))
            seen += len(y)
            peak = max(peak, res.stats.total_feature_peak_bytes)
        steps = len(losses)
        row = EpochRow(
            epoch=epoch,
            lr=lr,
            train_loss=float(np.mean(losses)),
            train_acc=correct / seen,
            feature_peak_bytes=peak,
            param_bytes=plan.param_bytes,
            step_ms=1000.0 * elapsed / steps,
        )
        rows.append(row)
        if on_epoch is not None:
            on_epoch(row)
    return TrainResult(rows, plan, opt)


def evaluate(plan: GraphPlan, data: DataSource) -> float:
    """Eval-mode accuracy over the full batches of ``data``."""
    from .graph import forward

    correct = seen = 0
    for x, y in data.batches(plan.batch, 0, shuffle=False):
        fwd = forward(plan, x.astype(plan.dtype, copy=False), ops.Mode.EVAL)
        correct += int(np.sum(np.argmax(fwd.logits.data.reshape(len(y), -1), axis=1) == y))
        seen += len(y)
        fwd.state.release()
    return correct / seen if seen else 0.0
