"""Soft contrastive objectives over a positive column plus a memory queue.

All logits matrices are laid out as ``B×(1+M)``: column 0 holds the positive
pair's cosine similarity, columns ``1..M`` the similarities to queued target
embeddings. Two relational modes are supported:

``strict``
    The positive slot of the relational target gets probability zero and the
    softmax runs over the queue columns only. This is the form under which
    ``sce = λ·infonce + (1-λ)·(ressl + ceil)`` holds exactly.
``pseudo-code``
    The positive slot enters the target softmax with logit 0, so it receives
    some relational mass of its own.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    Tensor,
    concat_columns,
    gather_columns,
    log,
    log_softmax_rows,
    logsumexp_rows,
    matmul,
    mean,
    mul,
    no_grad,
    rowwise_dot,
    scale,
    slice_columns,
    softmax_rows,
    tsum,
)

STRICT = "strict"
PSEUDO_CODE = "pseudo-code"
MODES = (STRICT, PSEUDO_CODE)

LOG_FLOOR = 1e-30
UNIT_TOL = 1e-6


class ContractError(ValueError):
    """An argument violates a documented precondition."""


class UnsupportedModeError(ValueError):
    pass


class ClampCounter:
    """Counts probabilities clamped to ``LOG_FLOOR`` inside :func:`sce_loss`."""

    def __init__(self) -> None:
        self.count = 0

    def reset(self) -> int:
        n, self.count = self.count, 0
        return n


log_clamps = ClampCounter()


@dataclass(frozen=True)
class Temperatures:
    tau: float = 0.1
    tau_m: float = 0.07

    def __post_init__(self):
        if not (self.tau > 0 and self.tau_m > 0):
            raise ContractError(f"temperatures must be positive, got tau={self.tau}, tau_m={self.tau_m}")


@dataclass
class SimilarityLogits:
    """Cosine similarities before temperature scaling, ``B×(1+M)``."""

    values: Tensor
    mode: str = STRICT

    def __post_init__(self):
        if self.mode not in MODES:
            raise UnsupportedModeError(f"unknown relational mode {self.mode!r}")
        if self.values.ndim != 2 or self.values.shape[1] < 2:
            raise ContractError(f"logits must be B×(1+M) with M >= 1, got {self.values.shape}")

    @property
    def queue_size(self) -> int:
        return self.values.shape[1] - 1


@dataclass
class TargetDistribution:
    w: Tensor
    lam: float


def _check_unit_rows(x: np.ndarray, what: str) -> None:
    norms = np.sqrt((x * x).sum(axis=1))
    if np.any(np.abs(norms - 1.0) > UNIT_TOL):
        raise ContractError(f"{what}: rows must be unit-norm (max deviation {np.abs(norms - 1).max():.3g})")


def cosine_similarity(queries: Tensor, keys) -> Tensor:
    """``B×K`` dot products of unit rows; gradients flow into ``queries`` only."""
    keys_data = keys.data if isinstance(keys, Tensor) else np.asarray(keys, dtype=np.float64)
    _check_unit_rows(queries.data, "queries")
    _check_unit_rows(keys_data, "keys")
    return matmul(queries, Tensor(keys_data.T))


def similarity_logits(queries: Tensor, positives, queue, mode: str = STRICT) -> SimilarityLogits:
    """Build the positive-plus-queue logits for a batch of queries.

    ``positives`` and ``queue`` are treated as constants (stop-gradient).
    """
    pos = positives.data if isinstance(positives, Tensor) else np.asarray(positives, dtype=np.float64)
    _check_unit_rows(pos, "positives")
    pos_col = rowwise_dot(queries, Tensor(pos))
    neg = cosine_similarity(queries, queue)
    return SimilarityLogits(concat_columns([pos_col, neg]), mode)


def target_logits(targets, queue, mode: str = STRICT) -> SimilarityLogits:
    """Relational logits of detached target embeddings against the queue.

    Column 0 carries 0; it is either masked (strict) or used as the
    pseudo-code's zero positive logit.
    """
    t = targets.data if isinstance(targets, Tensor) else np.asarray(targets, dtype=np.float64)
    q = queue.data if isinstance(queue, Tensor) else np.asarray(queue, dtype=np.float64)
    _check_unit_rows(t, "targets")
    _check_unit_rows(q, "queue")
    values = np.concatenate([np.zeros((t.shape[0], 1)), t @ q.T], axis=1)
    return SimilarityLogits(Tensor(values), mode)


def batch_logits(online: Tensor, target, mode: str = STRICT) -> tuple[SimilarityLogits, SimilarityLogits]:
    """In-batch form: for row i the positive is target i, negatives are targets j != i.

    Returns ``(online_logits, target_logits)`` both ``N×N``, with each row's
    remaining N-1 columns ordered by ascending j.
    """
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    n = t.shape[0]
    if n < 2:
        raise ContractError("batch form needs at least two instances")
    _check_unit_rows(online.data, "online")
    _check_unit_rows(t, "target")
    order = np.array([[i] + [j for j in range(n) if j != i] for i in range(n)])
    online_logits = gather_columns(matmul(online, Tensor(t.T)), order)
    tt = t @ t.T
    target_vals = np.take_along_axis(tt, order, axis=1).copy()
    target_vals[:, 0] = 0.0
    return SimilarityLogits(online_logits, mode), SimilarityLogits(Tensor(target_vals), mode)


def relational_distribution(target: SimilarityLogits, tau_m: float) -> Tensor:
    """Sharpened similarity distribution of the targets over the queue."""
    v = target.values.data
    with no_grad():
        if target.mode == STRICT:
            queue_part = softmax_rows(Tensor(v[:, 1:] / tau_m)).data
            out = np.concatenate([np.zeros((v.shape[0], 1)), queue_part], axis=1)
        else:
            logits = v.copy()
            logits[:, 0] = 0.0
            out = softmax_rows(Tensor(logits / tau_m)).data
    return Tensor(out)


def build_target(s2: Tensor, lam: float) -> TargetDistribution:
    """Mix a one-hot on the positive column with the relational distribution."""
    if not 0.0 <= lam <= 1.0:
        raise ContractError(f"lambda must lie in [0, 1], got {lam}")
    s = s2.data if isinstance(s2, Tensor) else np.asarray(s2, dtype=np.float64)
    w = (1.0 - lam) * s
    w[:, 0] += lam
    return TargetDistribution(Tensor(w), lam)


def online_distribution(online: SimilarityLogits, tau: float) -> Tensor:
    return softmax_rows(scale(online.values, 1.0 / tau))


def sce_loss(target: TargetDistribution, p1: Tensor) -> Tensor:
    """Cross-entropy ``-(1/B) Σ_i Σ_k w_ik log p1_ik``.

    Probabilities below ``LOG_FLOOR`` are clamped; each clamped entry that
    carries target mass increments :data:`log_clamps`.
    """
    w = target.w.data
    if w.shape != p1.shape:
        raise ContractError(f"target {w.shape} and prediction {p1.shape} differ in shape")
    clamped = (p1.data < LOG_FLOOR) & (w > 0)
    if clamped.any():
        log_clamps.count += int(clamped.sum())
    logp = log(p1, floor=LOG_FLOOR)
    b = w.shape[0]
    return scale(tsum(mul(logp, Tensor(w))), -1.0 / b)


def infonce_loss(online: SimilarityLogits, tau: float) -> Tensor:
    logp = log_softmax_rows(scale(online.values, 1.0 / tau))
    return scale(mean(slice_columns(logp, 0, 1)), -1.0)


def ressl_loss(target: SimilarityLogits, online: SimilarityLogits, tau: float, tau_m: float) -> Tensor:
    """Relational cross-entropy with the positive excluded on both sides."""
    if target.mode != STRICT or online.mode != STRICT:
        raise UnsupportedModeError("ressl_loss is only defined for the strict relational mode")
    s2 = relational_distribution(target, tau_m).data[:, 1:]
    logq = log_softmax_rows(scale(slice_columns(online.values, 1), 1.0 / tau))
    b = s2.shape[0]
    return scale(tsum(mul(logq, Tensor(s2))), -1.0 / b)


def ceil_loss(online: SimilarityLogits, tau: float) -> Tensor:
    """``-(1/B) Σ_i log(Σ_queue exp(l/τ) / Σ_all exp(l/τ))``; never negative."""
    scaled = scale(online.values, 1.0 / tau)
    neg = logsumexp_rows(slice_columns(scaled, 1))
    full = logsumexp_rows(scaled)
    return scale(mean(neg - full), -1.0)


@dataclass
class LossBreakdown:
    sce: Tensor
    infonce: float
    ressl: float
    ceil: float
    lam: float

    @property
    def residual(self) -> float:
        """``|sce - λ·infonce - (1-λ)·(ressl + ceil)|``."""
        recon = self.lam * self.infonce + (1.0 - self.lam) * (self.ressl + self.ceil)
        return abs(self.sce.item() - recon)


def one_sided(online_z: Tensor, target_z, queue, lam: float, tau: float, tau_m: float,
              mode: str = STRICT) -> LossBreakdown:
    """Full loss for one direction plus its decomposed terms (terms detached)."""
    online = similarity_logits(online_z, target_z, queue, mode)
    target = target_logits(target_z, queue, mode)
    return _breakdown(online, target, lam, tau, tau_m)


def _breakdown(online: SimilarityLogits, target: SimilarityLogits, lam, tau, tau_m) -> LossBreakdown:
    w = build_target(relational_distribution(target, tau_m), lam)
    loss = sce_loss(w, online_distribution(online, tau))
    with no_grad():
        detached = SimilarityLogits(Tensor(online.values.data), online.mode)
        info = infonce_loss(detached, tau).item()
        cl = ceil_loss(detached, tau).item()
        if target.mode == STRICT:
            rs = ressl_loss(target, detached, tau, tau_m).item()
        else:
            rs = float("nan")
    return LossBreakdown(loss, info, rs, cl, lam)


def decompose_check(online_z: Tensor, target_z, queue, lam: float, tau: float, tau_m: float) -> float:
    """Residual of the λ-decomposition on a strict-mode instance."""
    online_z = online_z if isinstance(online_z, Tensor) else Tensor(online_z)
    with no_grad():
        parts = one_sided(online_z, target_z, queue, lam, tau, tau_m, STRICT)
    return parts.residual


def symmetrized_sce(view1, view2, model, queue, lam: float, tau: float, tau_m: float,
                    mode: str = STRICT) -> tuple[LossBreakdown, Tensor, Tensor]:
    """Average of the two directional losses.

    Online(view1) is matched against target(view2) and online(view2) against
    target(view1). Returns the combined breakdown and both detached target
    embeddings (view2 first) for the queue update.
    """
    from .model import forward_online, forward_target

    z1_s = forward_online(model, view1)
    z2_t = forward_target(model, view2)
    first = one_sided(z1_s, z2_t, queue, lam, tau, tau_m, mode)
    z2_s = forward_online(model, view2)
    z1_t = forward_target(model, view1)
    second = one_sided(z2_s, z1_t, queue, lam, tau, tau_m, mode)
    return average_breakdowns(first, second), z2_t, z1_t


def average_breakdowns(a: LossBreakdown, b: LossBreakdown) -> LossBreakdown:
    return LossBreakdown(
        scale(a.sce + b.sce, 0.5),
        0.5 * (a.infonce + b.infonce),
        0.5 * (a.ressl + b.ressl),
        0.5 * (a.ceil + b.ceil),
        a.lam,
    )
