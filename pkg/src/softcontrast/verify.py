"""Self-checks behind ``softcontrast verify``: loss decomposition, gradients, distribution laws."""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .losses import (STRICT, Temperatures, build_target, decompose_check, online_distribution,
                     relational_distribution, similarity_logits, symmetrized_sce, target_logits)
from .model import EncoderSpec, HeadSpec, NetworkSpec, SiameseModel, init
from .tensor import Tensor, backward, l2_normalize_rows, no_grad

DECOMPOSITION_TOL = 1e-9
GRADIENT_TOL = 1e-5
# Below this gradient norm the error is taken as absolute. A bias feeding
# straight into batch norm has an exactly zero gradient, and comparing
# rounding noise against rounding noise relatively is meaningless.
GRADIENT_NORM_FLOOR = 1e-4
ROW_SUM_TOL = 1e-12

# the grid the decomposition instances cycle through
DECOMPOSITION_GRID = list(itertools.product((2, 8), (4, 64), (0.0, 0.25, 0.5, 1.0), (0.05, 0.07, 0.1)))


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: {self.detail}"


def _unit(rng: np.random.Generator, rows: int, dim: int) -> np.ndarray:
    x = rng.normal(size=(rows, dim))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def decomposition_residuals(instances: int = 100, seed: int = 0, dim: int = 16, tau: float = 0.1) -> np.ndarray:
    """Residuals of the λ-decomposition over random strict-mode instances."""
    rng = np.random.default_rng([seed, 0xDEC0])
    out = np.empty(instances)
    for i in range(instances):
        batch, m, lam, tau_m = DECOMPOSITION_GRID[i % len(DECOMPOSITION_GRID)]
        out[i] = decompose_check(Tensor(_unit(rng, batch, dim)), Tensor(_unit(rng, batch, dim)),
                                 _unit(rng, m, dim), lam, tau, tau_m)
    return out


def toy_spec(predictor: bool = False) -> NetworkSpec:
    """A small MLP network cheap enough for element-wise finite differences."""
    pred = HeadSpec(2, 8, 4, "hidden") if predictor else None
    return NetworkSpec(EncoderSpec("mlp", (6,), (8,)), HeadSpec(2, 8, 4, "hidden"), pred)


def _toy_problem(seed: int, batch: int, queue_size: int, predictor: bool):
    rng = np.random.default_rng([seed, 0x6C4E])
    model: SiameseModel = init(toy_spec(predictor), seed)
    # decouple the target from the online weights so both directions are generic
    for arr in model.target.values():
        arr += 0.1 * rng.normal(size=arr.shape)
    x1 = rng.normal(size=(batch, 6))
    x2 = rng.normal(size=(batch, 6))
    return model, x1, x2, _unit(rng, queue_size, 4)


def gradient_errors(seed: int, lam: float = 0.5, tau: float = 0.1, tau_m: float = 0.07, step: float = 1e-5,
                    batch: int = 4, queue_size: int = 16, predictor: bool = False,
                    mode: str = STRICT) -> dict[str, float]:
    """Relative error of analytic vs central-difference gradients, per parameter tensor.

    The error for a tensor is ``|g_analytic - g_numeric| / max(|g_analytic|, |g_numeric|, floor)``
    in the Euclidean norm, on the symmetrized loss (``floor`` is ``GRADIENT_NORM_FLOOR``).
    """
    model, x1, x2, queue = _toy_problem(seed, batch, queue_size, predictor)

    def value() -> float:
        with no_grad():
            return symmetrized_sce(x1, x2, model, queue, lam, tau, tau_m, mode)[0].sce.item()

    model.zero_grad()
    loss = symmetrized_sce(x1, x2, model, queue, lam, tau, tau_m, mode)[0].sce
    backward(loss)
    errors = {}
    for name, p in model.online.items():
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = value()
            flat[i] = orig - step
            down = value()
            flat[i] = orig
            numeric.reshape(-1)[i] = (up - down) / (2 * step)
        denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), GRADIENT_NORM_FLOOR)
        errors[name] = float(np.linalg.norm(analytic - numeric) / denom)
    return errors


def distribution_row_error(seed: int = 0, trials: int = 20) -> float:
    """Largest deviation from 1 of any row sum among p1, s2 and the mixed target."""
    rng = np.random.default_rng([seed, 0x5033])
    worst = 0.0
    for t in range(trials):
        batch, m = int(rng.integers(1, 9)), int(rng.integers(1, 65))
        online, target, queue = _unit(rng, batch, 8), _unit(rng, batch, 8), _unit(rng, m, 8)
        temps = Temperatures(float(rng.uniform(0.02, 1.0)), float(rng.uniform(0.02, 1.0)))
        with no_grad():
            p1 = online_distribution(similarity_logits(Tensor(online), Tensor(target), queue), temps.tau)
            s2 = relational_distribution(target_logits(Tensor(target), queue), temps.tau_m)
            w = build_target(s2, float(rng.uniform()))
        for arr in (p1.data, s2.data, w.w.data):
            worst = max(worst, float(np.max(np.abs(arr.sum(axis=1) - 1.0))))
    return worst


def normalize_error(seed: int = 0) -> float:
    rng = np.random.default_rng([seed, 0x4E52])
    x = rng.normal(size=(64, 16)) * rng.uniform(1e-3, 1e3, size=(64, 1))
    return float(np.max(np.abs(np.linalg.norm(l2_normalize_rows(Tensor(x)).data, axis=1) - 1.0)))


def run_checks(seeds: int = 5) -> list[CheckResult]:
    results = []
    res = decomposition_residuals()
    results.append(CheckResult("decomposition", bool(res.max() <= DECOMPOSITION_TOL),
                               f"max residual {res.max():.3e} over {len(res)} instances (tol {DECOMPOSITION_TOL:g})"))
    worst = 0.0
    worst_name = ""
    for seed in range(seeds):
        for name, err in gradient_errors(seed).items():
            if err >= worst:
                worst, worst_name = err, f"{name}, seed {seed}"
    results.append(CheckResult("gradients", worst <= GRADIENT_TOL,
                               f"max relative error {worst:.3e} ({worst_name}) over {seeds} seeds (tol {GRADIENT_TOL:g})"))
    row = distribution_row_error()
    results.append(CheckResult("row sums", row <= ROW_SUM_TOL, f"max |row sum - 1| {row:.3e}"))
    norm = normalize_error()
    results.append(CheckResult("unit norm", norm <= 1e-12, f"max |norm - 1| {norm:.3e}"))
    return results
