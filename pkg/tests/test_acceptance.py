"""Acceptance criteria 1-9. Criteria 5-8 pretrain full desk-scale models and take about 40 minutes in total.

Every test records a one-line verdict that is printed in the "acceptance
criteria" section at the end of the pytest run.
"""
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from threadpoolctl import threadpool_limits

from softcontrast.config import parse_config
from softcontrast.data import synth_shapes, synth_video
from softcontrast.evaluation import extract_features, feature_std, knn_classify, retrieval_recall
from softcontrast.model import init
from softcontrast.trainer import (MemoryQueue, RunPlan, SGD, input_shape, momentum_schedule, read_metrics,
                                  train_run, train_step, warm_start_queue)
from softcontrast.verify import (DECOMPOSITION_TOL, GRADIENT_TOL, decomposition_residuals,
                                 distribution_row_error, gradient_errors)
from conftest import report_criterion, unit_rows

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
SHAPES_CFG = CONFIGS / "desk_shapes.cfg"
VIDEO_CFG = CONFIGS / "desk_video.cfg"


@pytest.fixture(scope="module")
def shapes():
    return synth_shapes(2000, 24, seed=0), synth_shapes(500, 24, seed=1)


class ShapeRuns:
    """Desk-scale pretraining runs, cached so criteria 5-7 share them."""

    def __init__(self, root: Path, data):
        self.root, self.data, self.cache = root, data, {}

    def get(self, lam: float, tau_m: float, seed: int):
        key = (lam, tau_m, seed)
        if key not in self.cache:
            train, test = self.data
            cfg = replace(parse_config(SHAPES_CFG), lam=lam, tau_m=tau_m, seed=seed)
            start = time.perf_counter()
            result = train_run(cfg, train, self.root / f"lam{lam}_taum{tau_m}_seed{seed}")
            seconds = time.perf_counter() - start
            tr, te = extract_features(result.model, train), extract_features(result.model, test)
            self.cache[key] = {"seconds": seconds, "knn": knn_classify(tr, te, k=10), "std": feature_std(te),
                               "metrics": read_metrics(result.metrics_path), "result": result}
        return self.cache[key]


@pytest.fixture(scope="module")
def shape_runs(tmp_path_factory, shapes):
    return ShapeRuns(tmp_path_factory.mktemp("acceptance_shapes"), shapes)


def test_criterion_1_decomposition_identity():
    start = time.perf_counter()
    worst = float(decomposition_residuals(100).max())
    seconds = time.perf_counter() - start
    passed = worst <= DECOMPOSITION_TOL and seconds < 1.0
    report_criterion(1, passed, f"max residual {worst:.2e} (tol 1e-9) over 100 instances in {seconds:.2f} s")
    assert passed


def test_criterion_2_gradient_correctness():
    start = time.perf_counter()
    worst = max(max(gradient_errors(seed).values()) for seed in range(5))
    seconds = time.perf_counter() - start
    passed = worst <= GRADIENT_TOL and seconds < 30.0
    report_criterion(2, passed, f"max relative gradient error {worst:.2e} (tol 1e-5), 5 seeds in {seconds:.1f} s")
    assert passed


def test_criterion_3_reductions(tmp_path):
    data = synth_shapes(256, 24, seed=0)
    base = replace(parse_config(SHAPES_CFG), total_epochs=2, warmup_epochs=1, seed=0)
    one = read_metrics(train_run(replace(base, lam=1.0), data, tmp_path / "lam1").metrics_path)
    zero = read_metrics(train_run(replace(base, lam=0.0), data, tmp_path / "lam0").metrics_path)
    err_one = max(abs(r["loss"] - r["loss_infonce"]) for r in one)
    err_zero = max(abs(r["loss"] - (r["loss_ressl"] + r["loss_ceil"])) for r in zero)
    passed = err_one <= 1e-12 and err_zero <= 1e-9
    report_criterion(3, passed, f"lambda=1 max |loss-InfoNCE| {err_one:.1e} (tol 1e-12), "
                                f"lambda=0 max |loss-(ReSSL+Ceil)| {err_zero:.1e} (tol 1e-9), "
                                f"{len(one)}+{len(zero)} steps")
    assert passed


def _fifo_property_cases() -> int:
    count = 0

    @given(st.integers(1, 16), st.lists(st.integers(1, 20), max_size=10), st.integers(0, 2**31))
    @settings(max_examples=1000, deadline=None, database=None)
    def fifo(capacity, sizes, seed):
        nonlocal count
        count += 1
        rng = np.random.default_rng(seed)
        q, ref = MemoryQueue(capacity, 4), []
        for n in sizes:
            rows = unit_rows(rng, n, 4)
            q.push(rows)
            ref = (ref + list(rows))[-capacity:]
            assert np.array_equal(q.contents(), np.array(ref).reshape(-1, 4))

    fifo()
    return count


def test_criterion_4_structural_invariants():
    row_err = distribution_row_error(seed=0, trials=50)
    cases = _fifo_property_cases()

    cfg = replace(parse_config(SHAPES_CFG), total_epochs=2, warmup_epochs=1, batch_size=32, queue_size=64)
    data = synth_shapes(96, 24, seed=0)
    plan = RunPlan.for_dataset(cfg, len(data))
    m_first = momentum_schedule(0, cfg, plan)
    m_last = momentum_schedule(plan.total_steps - 1, cfg, plan)

    # the target may change only through the EMA rule, never through an optimizer update
    ema_err = 0.0
    with threadpool_limits(limits=1):
        model = init(cfg.network_spec(input_shape(data, cfg)), cfg.seed)
        optimizer = SGD(model.online, weight_decay=cfg.weight_decay)
        queue = MemoryQueue(cfg.queue_size, model.spec.projector.out_dim)
        warm_start_queue(model, queue, data, cfg)
        target_ids = {id(v) for v in model.target.values()}
        assert not target_ids & {id(p.data) for p in optimizer.params.values()}
        for step in range(plan.total_steps):
            before = {k: v.copy() for k, v in model.target.items()}
            idx = np.arange(step * cfg.batch_size, (step + 1) * cfg.batch_size) % len(data)
            rec = train_step(model, optimizer, queue, data, idx, cfg, plan, step)
            for k, v in model.target.items():
                expected = rec.momentum * before[k] + (1 - rec.momentum) * model.online[k].data
                ema_err = max(ema_err, float(np.max(np.abs(v - expected))))
    passed = (row_err <= 1e-12 and cases >= 1000 and m_first == cfg.momentum_init and m_last == 1.0
              and ema_err <= 1e-15)
    report_criterion(4, passed, f"row sums off by {row_err:.1e}; FIFO law held on {cases} cases; "
                                f"m(0)={m_first} m(last)={m_last}; target vs EMA rule {ema_err:.1e} "
                                f"over {plan.total_steps} steps")
    assert passed


def test_criterion_5_desk_scale_learning(shape_runs):
    run = shape_runs.get(0.5, 0.07, 0)
    passed = run["knn"] >= 0.70 and run["std"] >= 0.01 and run["seconds"] <= 600
    report_criterion(5, passed, f"kNN(k=10) {run['knn']:.3f} (need 0.70), feature_std {run['std']:.4f} "
                                f"(need 0.01), pretrain {run['seconds']:.0f} s (limit 600)")
    assert passed


def test_criterion_6_lambda_trend(shape_runs):
    per_seed = {lam: [shape_runs.get(lam, 0.07, seed)["knn"] for seed in range(3)] for lam in (0.0, 0.5, 1.0)}
    mean = {lam: float(np.mean(v)) for lam, v in per_seed.items()}
    passed = mean[0.5] >= mean[1.0] - 0.02 and mean[0.5] >= mean[0.0] - 0.02
    detail = "; ".join(f"lambda={lam}: mean {mean[lam]:.3f} seeds {[round(v, 3) for v in vals]}"
                       for lam, vals in per_seed.items())
    report_criterion(6, passed, detail)
    assert passed


def test_criterion_7_no_collapse_when_temperatures_match(shape_runs):
    run = shape_runs.get(0.5, 0.1, 0)
    model = run["result"].model
    train, test = shape_runs.data
    # the spread logged at the end of every epoch, then the final encoder features
    epoch_end = {r["epoch"]: r["feature_std"] for r in run["metrics"]}
    worst_logged = min(epoch_end.values())
    final = feature_std(extract_features(model, test))
    passed = worst_logged >= 0.01 and final >= 0.01
    report_criterion(7, passed, f"tau_m=tau=0.1: min logged embedding std {worst_logged:.4f}, "
                                f"final feature_std {final:.4f} (need 0.01)")
    assert passed


def test_criterion_8_temporal_pipeline(tmp_path):
    cfg = parse_config(VIDEO_CFG)
    train = synth_video(800, frames=16, image_size=16, seed=0)
    test = synth_video(200, frames=16, image_size=16, seed=1)
    start = time.perf_counter()
    result = train_run(cfg, train, tmp_path)
    seconds = time.perf_counter() - start
    temporal = cfg.temporal_spec()
    tr = extract_features(result.model, train, temporal=temporal)
    te = extract_features(result.model, test, temporal=temporal)
    recall = retrieval_recall(tr, te, (1, 5, 10))
    passed = (cfg.rgb_diff_prob == 0.2 and cfg.frames_per_clip == 8 and recall[1] >= 0.5
              and recall[1] <= recall[5] <= recall[10] and seconds <= 900)
    report_criterion(8, passed, f"R@1 {recall[1]:.3f} (need 0.5) R@5 {recall[5]:.3f} R@10 {recall[10]:.3f}, "
                                f"pretrain {seconds:.0f} s (limit 900)")
    assert passed


def test_criterion_9_determinism(tmp_path, shapes):
    cfg = replace(parse_config(SHAPES_CFG), total_epochs=2, warmup_epochs=1)
    train = shapes[0].subset(np.arange(512))
    a = train_run(cfg, train, tmp_path / "a").metrics_path.read_bytes()
    b = train_run(cfg, train, tmp_path / "b").metrics_path.read_bytes()
    passed = a == b
    report_criterion(9, passed, f"two runs wrote {'identical' if passed else 'different'} metrics CSVs "
                                f"({len(a)} bytes)")
    assert passed
