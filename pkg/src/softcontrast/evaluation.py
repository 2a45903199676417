"""Frozen-feature evaluation: kNN, linear probe, retrieval recall, collapse check, sweeps."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .augment import TemporalSpec, center_clip
from .config import TrainConfig, with_value
from .data import Dataset
from .model import SiameseModel, encode
from .tensor import Tensor, add, backward, log_softmax_rows, matmul, mean, mul, scale, tsum
from .trainer import clips_to_input, train_run

COLLAPSE_THRESHOLD = 0.01
SWEEP_HEADER = ["value", "knn_acc", "probe_acc", "feature_std"]
SWEEP_AXES = ("lambda", "tau", "tau_m", "augmentation")


class EvaluationError(ValueError):
    pass


class ProbeDiverged(FloatingPointError):
    pass


@dataclass
class FeatureBank:
    features: np.ndarray  # S×D, unit rows
    labels: np.ndarray

    def __post_init__(self):
        if len(self.features) != len(self.labels):
            raise EvaluationError("feature and label counts differ")

    def __len__(self) -> int:
        return len(self.labels)


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.where(norms > 1e-12, norms, 1.0)


def extract_features(model: SiameseModel, dataset: Dataset, branch: str = "online",
                     temporal: TemporalSpec | None = None, batch_size: int = 256) -> FeatureBank:
    """L2-normalised encoder outputs (before the projector), no augmentation."""
    temporal = temporal or TemporalSpec()
    chunks = []
    for start in range(0, len(dataset), batch_size):
        idx = np.arange(start, min(start + batch_size, len(dataset)))
        if dataset.is_video:
            x = clips_to_input(np.stack([center_clip(dataset.video(i), temporal).frames for i in idx]))
        else:
            x = dataset.items[idx]
        chunks.append(encode(model, x, branch))
    return FeatureBank(_unit_rows(np.concatenate(chunks)), np.asarray(dataset.labels).copy())


def _check_banks(train: FeatureBank, test: FeatureBank) -> None:
    if len(train) == 0 or len(test) == 0:
        raise EvaluationError("feature banks must be non-empty")
    if train.features.shape[1] != test.features.shape[1]:
        raise EvaluationError("feature dimensions differ between banks")


def knn_predict(train: FeatureBank, test: FeatureBank, k: int = 10, exclude_self: bool = False) -> np.ndarray:
    """Majority vote of the k most cosine-similar training items.

    Vote ties go to the class with the larger summed similarity, then the
    smaller label. ``exclude_self`` drops the diagonal when both banks are
    the same items (leave-one-out).
    """
    _check_banks(train, test)
    n_train = len(train) - (1 if exclude_self else 0)
    if not 1 <= k <= n_train:
        raise EvaluationError(f"k={k} must lie in [1, {n_train}]")
    sims = test.features @ train.features.T
    if exclude_self:
        if len(train) != len(test):
            raise EvaluationError("exclude_self needs identical banks")
        np.fill_diagonal(sims, -np.inf)
    n_cls = int(max(train.labels.max(), test.labels.max())) + 1
    top = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    preds = np.empty(len(test), dtype=np.int64)
    for i, row in enumerate(top):
        votes = np.bincount(train.labels[row], minlength=n_cls)
        weight = np.bincount(train.labels[row], weights=sims[i, row], minlength=n_cls)
        best = np.flatnonzero(votes == votes.max())
        preds[i] = best[np.argmax(weight[best])]
    return preds


def knn_classify(train: FeatureBank, test: FeatureBank, k: int = 10, exclude_self: bool = False) -> float:
    return float(np.mean(knn_predict(train, test, k, exclude_self) == test.labels))


def linear_probe(train: FeatureBank, test: FeatureBank, epochs: int = 100, lr: float = 0.1,
                 batch_size: int = 256, momentum: float = 0.9, seed: int = 0) -> float:
    """Softmax regression on frozen features, SGD with cosine-decayed lr; returns test accuracy.

    The head starts at zero, so ``epochs=0`` predicts class 0 everywhere.
    """
    _check_banks(train, test)
    n_cls = int(max(train.labels.max(), test.labels.max())) + 1
    d = train.features.shape[1]
    w = Tensor(np.zeros((d, n_cls)), requires_grad=True)
    b = Tensor(np.zeros(n_cls), requires_grad=True)
    vel = [np.zeros_like(w.data), np.zeros_like(b.data)]
    onehot = np.eye(n_cls)[train.labels]
    rng = np.random.default_rng([seed, 0x9B0BE])
    steps_per_epoch = math.ceil(len(train) / batch_size)
    total = max(1, epochs * steps_per_epoch)
    step = 0
    for _ in range(epochs):
        order = rng.permutation(len(train))
        for s in range(steps_per_epoch):
            idx = order[s * batch_size:(s + 1) * batch_size]
            logits = add(matmul(Tensor(train.features[idx]), w), b)
            loss = scale(mean(tsum(mul(log_softmax_rows(logits), Tensor(onehot[idx])), axis=1)), -1.0)
            if not math.isfinite(loss.item()):
                raise ProbeDiverged(f"linear probe loss became {loss.item()} at step {step}")
            w.grad = b.grad = None
            backward(loss)
            cur = lr * 0.5 * (1 + math.cos(math.pi * step / total))
            for p, v in zip((w, b), vel):
                v *= momentum
                v += p.grad
                p.data -= cur * v
            step += 1
    preds = np.argmax(test.features @ w.data + b.data, axis=1)
    return float(np.mean(preds == test.labels))


def retrieval_recall(train: FeatureBank, test: FeatureBank, n_values: Iterable[int] = (1, 5, 10)) -> dict[int, float]:
    """Fraction of test items whose top-N training neighbours include a same-label item."""
    _check_banks(train, test)
    n_values = sorted(set(int(n) for n in n_values))
    if n_values[0] < 1 or n_values[-1] > len(train):
        raise EvaluationError(f"N values must lie in [1, {len(train)}]")
    sims = test.features @ train.features.T
    order = np.argsort(-sims, axis=1, kind="stable")[:, :n_values[-1]]
    hits = train.labels[order] == test.labels[:, None]
    first_hit = np.where(hits.any(axis=1), hits.argmax(axis=1), np.iinfo(np.int64).max)
    return {n: float(np.mean(first_hit < n)) for n in n_values}


def feature_std(bank) -> float:
    """Mean over dimensions of the per-dimension standard deviation."""
    x = bank.features if isinstance(bank, FeatureBank) else np.asarray(bank)
    if len(x) == 0:
        raise EvaluationError("feature_std of an empty bank")
    return float(x.std(axis=0).mean())


def is_collapsed(bank, threshold: float = COLLAPSE_THRESHOLD) -> bool:
    return feature_std(bank) < threshold


# sweeps -------------------------------------------------------------------------

def apply_axis(config: TrainConfig, axis: str, value: str) -> TrainConfig:
    if axis not in SWEEP_AXES:
        raise EvaluationError(f"sweep axis must be one of {SWEEP_AXES}, got {axis!r}")
    if axis == "augmentation":
        online, sep, target = str(value).partition("/")
        if not sep:
            raise EvaluationError("augmentation values look like 'online-preset/target-preset'")
        return with_value(with_value(config, "online_aug", online), "target_aug", target)
    return with_value(config, axis, str(value))


@dataclass
class SweepRow:
    value: str
    knn_acc: float
    probe_acc: float
    feature_std: float


def sweep(template: TrainConfig, axis: str, values: Sequence, train_data: Dataset, test_data: Dataset,
          out_dir, k: int = 10, probe_epochs: int = 100, probe_lr: float = 0.1,
          progress=None) -> list[SweepRow]:
    """One pretrain + probe per value with the template's seed; writes sweep.csv.

    Per-run outputs go to ``out_dir/run{i}``.
    """
    if not values:
        raise EvaluationError("sweep needs at least one value")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, value in enumerate(values):
        cfg = apply_axis(template, axis, value)
        result = train_run(cfg, train_data, out / f"run{i}")
        temporal = cfg.temporal_spec()
        tr = extract_features(result.model, train_data, temporal=temporal)
        te = extract_features(result.model, test_data, temporal=temporal)
        row = SweepRow(str(value), knn_classify(tr, te, k),
                       linear_probe(tr, te, probe_epochs, probe_lr, seed=cfg.seed), feature_std(te))
        rows.append(row)
        if progress is not None:
            progress(row)
    write_sweep_csv(out / "sweep.csv", rows)
    return rows


def write_sweep_csv(path, rows: Sequence[SweepRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SWEEP_HEADER)
        for r in rows:
            writer.writerow([r.value, repr(r.knn_acc), repr(r.probe_acc), repr(r.feature_std)])


def read_sweep_csv(path) -> list[SweepRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != SWEEP_HEADER:
            raise EvaluationError(f"{path}: unexpected header {reader.fieldnames}")
        return [SweepRow(r["value"], float(r["knn_acc"]), float(r["probe_acc"]), float(r["feature_std"]))
                for r in reader]
