"""Siamese momentum training loop with a FIFO memory queue.

Randomness is derived from ``(seed, purpose, step, sample)`` tuples rather
than from a shared stream, so a run resumed from a checkpoint replays exactly
the draws of an uninterrupted run and runs differing only in a loss
hyperparameter see identical augmentations.
"""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .augment import apply_clip_pipeline, apply_image_pipeline, center_clip
from .config import TrainConfig, serialize_config
from .data import Dataset
from .losses import average_breakdowns, log_clamps, one_sided
from .model import (
    SiameseModel,
    ema_update,
    forward_online,
    forward_target,
    init,
    load_checkpoint,
    save_checkpoint,
)
from .tensor import Tensor, backward

# stream tags for derived generators
_ONLINE_VIEW, _TARGET_VIEW, _SHUFFLE, _WARM_START = 1, 2, 3, 4
SGD_MOMENTUM = 0.9


class TrainingDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class RunPlan:
    steps_per_epoch: int
    total_epochs: int
    warmup_epochs: int

    @classmethod
    def for_dataset(cls, config: TrainConfig, n_items: int) -> RunPlan:
        return cls(math.ceil(n_items / config.batch_size), config.total_epochs, config.warmup_epochs)

    @property
    def total_steps(self) -> int:
        return self.steps_per_epoch * self.total_epochs

    @property
    def warmup_steps(self) -> int:
        return self.steps_per_epoch * self.warmup_epochs


def lr_schedule(step: int, config: TrainConfig, plan: RunPlan) -> float:
    """Linear warmup from 0, then cosine decay reaching 0 on the final step."""
    base = config.base_lr
    warm = plan.warmup_steps
    if step < warm:
        return base * step / warm
    span = max(1, plan.total_steps - 1 - warm)
    progress = min(1.0, (step - warm) / span)
    return base * 0.5 * (1.0 + math.cos(math.pi * progress))


def momentum_schedule(step: int, config: TrainConfig, plan: RunPlan) -> float:
    """Cosine increase of the EMA keep rate from ``momentum_init`` to exactly 1."""
    progress = min(1.0, step / max(1, plan.total_steps - 1))
    return 1.0 - (1.0 - config.momentum_init) * 0.5 * (1.0 + math.cos(math.pi * progress))


class MemoryQueue:
    """Fixed-capacity FIFO ring of unit-norm target embeddings."""

    def __init__(self, capacity: int, dim: int):
        if capacity < 1:
            raise ValueError("queue capacity must be >= 1")
        self.capacity = capacity
        self.dim = dim
        self.rows = np.zeros((capacity, dim))
        self.cursor = 0
        self.fill = 0

    def push(self, rows) -> None:
        rows = rows.data if isinstance(rows, Tensor) else np.asarray(rows, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[1] != self.dim:
            raise ValueError(f"queue rows must be n×{self.dim}, got {rows.shape}")
        norms = np.sqrt((rows * rows).sum(axis=1))
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ValueError("queue rows must be unit-norm")
        if len(rows) >= self.capacity:
            rows = rows[-self.capacity:]
        n = len(rows)
        first = min(n, self.capacity - self.cursor)
        self.rows[self.cursor:self.cursor + first] = rows[:first]
        self.rows[:n - first] = rows[first:]
        self.cursor = (self.cursor + n) % self.capacity
        self.fill = min(self.capacity, self.fill + n)

    def contents(self) -> np.ndarray:
        """Stored rows, oldest first."""
        if self.fill < self.capacity:
            return self.rows[:self.fill].copy()
        return np.concatenate([self.rows[self.cursor:], self.rows[:self.cursor]])

    def negatives(self) -> np.ndarray:
        """Stored rows in slot order (cheaper than :meth:`contents`, order is irrelevant)."""
        return self.rows if self.fill == self.capacity else self.rows[:self.fill]


class SGD:
    """Heavy-ball SGD with uniform L2 weight decay, online parameters only."""

    def __init__(self, params: dict[str, Tensor], momentum: float = SGD_MOMENTUM, weight_decay: float = 0.0):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data
            v = self.velocity[name]
            v *= self.momentum
            v += g
            p.data -= lr * v


@dataclass
class MetricsRecord:
    step: int
    epoch: int
    loss: float
    loss_infonce: float
    loss_ressl: float
    loss_ceil: float
    decomposition_residual: float
    lr: float
    momentum: float
    feature_std: float
    clamp_count: int


METRICS_HEADER = [f.name for f in fields(MetricsRecord)]


def format_metrics_row(rec: MetricsRecord) -> list[str]:
    return [repr(v) if isinstance(v, float) else str(v) for v in asdict(rec).values()]


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != METRICS_HEADER:
            raise ValueError(f"{path}: unexpected metrics header {reader.fieldnames}")
        rows = []
        for row in reader:
            rows.append({k: (int(v) if k in ("step", "epoch", "clamp_count") else float(v))
                         for k, v in row.items()})
        return rows


# inputs ----------------------------------------------------------------------

def input_shape(dataset: Dataset, config: TrainConfig) -> tuple[int, ...]:
    if dataset.is_video:
        _, _, h, w, c = dataset.items.shape
        return (h, w, c * config.frames_per_clip)
    return tuple(dataset.items.shape[1:])


def clips_to_input(frames: np.ndarray) -> np.ndarray:
    """Stack a batch of B×T×H×W×3 clips along channels: B×H×W×(3T)."""
    b, t, h, w, c = frames.shape
    return frames.transpose(0, 2, 3, 1, 4).reshape(b, h, w, t * c)


def _sample_rng(seed: int, tag: int, step: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, tag, step, index])


def augment_batch(dataset: Dataset, indices: np.ndarray, config: TrainConfig, branch: str,
                  tag: int, step: int) -> np.ndarray:
    spec = config.augmentation(branch)
    seed = config.seed
    if dataset.is_video:
        temporal = config.temporal_spec()
        clips = [apply_clip_pipeline(dataset.video(i), spec, temporal, _sample_rng(seed, tag, step, k))
                 for k, i in enumerate(indices)]
        return clips_to_input(np.stack(clips))
    return np.stack([apply_image_pipeline(dataset.items[i], spec, _sample_rng(seed, tag, step, k))
                     for k, i in enumerate(indices)])


def plain_inputs(dataset: Dataset, indices, config: TrainConfig) -> np.ndarray:
    """Un-augmented network inputs (centre clip for videos)."""
    if dataset.is_video:
        temporal = config.temporal_spec()
        clips = [center_clip(dataset.video(i), temporal).frames for i in indices]
        return clips_to_input(np.stack(clips))
    return dataset.items[np.asarray(indices)]


# steps ------------------------------------------------------------------------

def warm_start_queue(model: SiameseModel, queue: MemoryQueue, dataset: Dataset, config: TrainConfig) -> None:
    """Fill the queue with target embeddings of randomly drawn, target-augmented samples."""
    rng = np.random.default_rng([config.seed, _WARM_START])
    picks = rng.integers(0, len(dataset), size=queue.capacity)
    for start in range(0, queue.capacity, config.batch_size):
        idx = picks[start:start + config.batch_size]
        x = augment_batch(dataset, idx, config, "target", _WARM_START, start)
        queue.push(forward_target(model, x))


def _logit_stats(z_online: Tensor, queue: np.ndarray) -> str:
    sims = z_online.data @ queue.T if len(queue) else np.zeros(1)
    return (f"online finite={np.isfinite(z_online.data).all()} "
            f"sim min={np.nanmin(sims):.4g} max={np.nanmax(sims):.4g} mean={np.nanmean(sims):.4g}")


def train_step(model: SiameseModel, optimizer: SGD, queue: MemoryQueue, dataset: Dataset,
               indices: np.ndarray, config: TrainConfig, plan: RunPlan, step: int) -> MetricsRecord:
    """One optimisation step: augment, forward, loss, backward, SGD, EMA, enqueue."""
    epoch = step // plan.steps_per_epoch
    x1 = augment_batch(dataset, indices, config, "online", _ONLINE_VIEW, step)
    x2 = augment_batch(dataset, indices, config, "target", _TARGET_VIEW, step)
    lr = lr_schedule(step, config, plan)
    m = momentum_schedule(step, config, plan)
    negatives = queue.negatives()
    log_clamps.reset()

    z1_s = forward_online(model, x1)
    z2_t = forward_target(model, x2)
    parts = one_sided(z1_s, z2_t, negatives, config.lam, config.tau, config.tau_m, config.relational_mode)
    z1_t = None
    if config.symmetrize:
        z2_s = forward_online(model, x2)
        z1_t = forward_target(model, x1)
        second = one_sided(z2_s, z1_t, negatives, config.lam, config.tau, config.tau_m,
                           config.relational_mode)
        parts = average_breakdowns(parts, second)

    loss_value = parts.sce.item()
    if not math.isfinite(loss_value):
        raise TrainingDiverged(f"non-finite loss at step {step}: {_logit_stats(z1_s, negatives)}")

    model.zero_grad()
    backward(parts.sce)
    assert optimizer.params is model.online and not any(
        t is p.data for t, p in zip(model.target.values(), model.online.values())
    ), "target parameters must stay outside the optimizer"
    optimizer.step(lr)
    ema_update(model, m)

    queue.push(z2_t)
    if z1_t is not None:
        queue.push(z1_t)

    return MetricsRecord(
        step=step,
        epoch=epoch,
        loss=loss_value,
        loss_infonce=parts.infonce,
        loss_ressl=parts.ressl,
        loss_ceil=parts.ceil,
        decomposition_residual=parts.residual,
        lr=lr,
        momentum=m,
        feature_std=float(z1_s.data.std(axis=0).mean()),
        clamp_count=log_clamps.reset(),
    )


# runs -------------------------------------------------------------------------

@dataclass
class RunResult:
    model: SiameseModel
    metrics: list[MetricsRecord]
    checkpoint: Path
    metrics_path: Path
    manifest_path: Path


def _save_state(path: Path, model: SiameseModel, optimizer: SGD, queue: MemoryQueue, next_epoch: int,
                config: TrainConfig) -> None:
    extra = {f"opt/{k}": v for k, v in optimizer.velocity.items()}
    extra["queue/rows"] = queue.rows
    meta = {"next_epoch": next_epoch, "queue_cursor": queue.cursor, "queue_fill": queue.fill,
            "version": __version__, "config": serialize_config(config)}
    save_checkpoint(path, model, extra, meta)


def write_manifest(path: Path, config: TrainConfig, outputs: dict[str, str], started: float) -> None:
    manifest = {
        "config": serialize_config(config),
        "code_version": __version__,
        "seed": config.seed,
        "outputs": outputs,
        "started_at": time.strftime("%Y-%m-%dT%H:%M:%S%z", time.localtime(started)),
    }
    path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")


def train_run(config: TrainConfig, dataset: Dataset, out_dir, resume_from=None, progress=None) -> RunResult:
    """Pretrain on ``dataset``; writes manifest.json, metrics.csv and checkpoint.bin to ``out_dir``.

    With ``checkpoint_every = k`` an extra ``checkpoint_epoch{e}.bin`` is kept
    after every k-th epoch; passing one of those as ``resume_from`` continues
    the run and logs only the remaining steps.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    metrics_path, ckpt_path, manifest_path = out / "metrics.csv", out / "checkpoint.bin", out / "manifest.json"
    write_manifest(manifest_path, config, {"metrics": str(metrics_path), "checkpoint": str(ckpt_path)},
                   time.time())

    plan = RunPlan.for_dataset(config, len(dataset))
    with threadpool_limits(limits=1):
        if resume_from is None:
            model = init(config.network_spec(input_shape(dataset, config)), config.seed)
            optimizer = SGD(model.online, weight_decay=config.weight_decay)
            queue = MemoryQueue(config.queue_size, model.spec.projector.out_dim)
            warm_start_queue(model, queue, dataset, config)
            first_epoch = 0
        else:
            model, extra, meta = load_checkpoint(resume_from)
            optimizer = SGD(model.online, weight_decay=config.weight_decay)
            for k in optimizer.velocity:
                optimizer.velocity[k] = extra[f"opt/{k}"].copy()
            queue = MemoryQueue(config.queue_size, model.spec.projector.out_dim)
            queue.rows[...] = extra["queue/rows"]
            queue.cursor, queue.fill = meta["queue_cursor"], meta["queue_fill"]
            first_epoch = meta["next_epoch"]

        records: list[MetricsRecord] = []
        try:
            fh = open(metrics_path, "w", newline="", encoding="utf-8")
        except OSError as exc:
            raise OSError(f"cannot write metrics to {metrics_path}: {exc}") from exc
        with fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(METRICS_HEADER)
            for epoch in range(first_epoch, config.total_epochs):
                order = np.random.default_rng([config.seed, _SHUFFLE, epoch]).permutation(len(dataset))
                for b in range(plan.steps_per_epoch):
                    step = epoch * plan.steps_per_epoch + b
                    idx = order[b * config.batch_size:(b + 1) * config.batch_size]
                    rec = train_step(model, optimizer, queue, dataset, idx, config, plan, step)
                    records.append(rec)
                    writer.writerow(format_metrics_row(rec))
                fh.flush()
                if progress is not None:
                    progress(epoch, records[-1])
                if config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
                    _save_state(out / f"checkpoint_epoch{epoch + 1}.bin", model, optimizer, queue, epoch + 1, config)
        _save_state(ckpt_path, model, optimizer, queue, config.total_epochs, config)
    return RunResult(model, records, ckpt_path, metrics_path, manifest_path)
