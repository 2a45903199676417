"""Command-line entry point: pretrain, eval, sweep, verify, plot."""
from __future__ import annotations

import argparse
import sys

import numpy as np

from .config import ConfigError, parse_config, parse_config_text
from .data import DatasetError, load_data_spec
from .evaluation import (EvaluationError, ProbeDiverged, extract_features, feature_std, knn_classify,
                         linear_probe, retrieval_recall, sweep)
from .model import CheckpointError, load_checkpoint
from .plot import PlotError, plot_csv
from .trainer import TrainingDiverged, train_run
from .verify import run_checks

HOLDOUT_FRACTION = 0.2


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="softcontrast", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="pretrain a model and write manifest, metrics and checkpoint")
    p.add_argument("--config", required=True, help="key = value config file")
    p.add_argument("--data", required=True, help="data spec, e.g. synth-shapes:n=2000,size=24,seed=0")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("eval", help="probe a checkpoint's frozen encoder")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="training-side data spec")
    p.add_argument("--test-data", help="test data spec; without it a seeded 80/20 split of --data is used")
    p.add_argument("--probe", required=True, choices=("knn", "linear", "retrieval"))
    p.add_argument("--branch", default="online", choices=("online", "target"))
    p.add_argument("--k", type=int, default=10, help="neighbours for the kNN probe")
    p.add_argument("--epochs", type=int, default=100, help="linear probe epochs")
    p.add_argument("--lr", type=float, default=0.1, help="linear probe learning rate")

    p = sub.add_parser("sweep", help="pretrain and probe once per value of one config key")
    p.add_argument("--config", required=True)
    p.add_argument("--axis", required=True, choices=("lambda", "tau", "tau_m", "augmentation"))
    p.add_argument("--values", required=True,
                   help="comma separated values; augmentation pairs look like strong-alpha/strong-beta")
    p.add_argument("--data", default="synth-shapes:n=2000,size=24,seed=0")
    p.add_argument("--test-data", default="synth-shapes:n=500,size=24,seed=1")
    p.add_argument("--out", default="sweep_out")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--probe-epochs", type=int, default=100)

    p = sub.add_parser("verify", help="decomposition, gradient and distribution self-checks")
    p.add_argument("--seeds", type=int, default=5, help="seeds for the gradient check")

    p = sub.add_parser("plot", help="render a metrics or sweep CSV as SVG")
    p.add_argument("--metrics", required=True)
    p.add_argument("--out", required=True)
    return parser


def _split(dataset, seed: int):
    order = np.random.default_rng([seed, 0x5B17]).permutation(len(dataset))
    cut = len(dataset) - max(1, int(round(HOLDOUT_FRACTION * len(dataset))))
    if cut < 1:
        raise DatasetError("dataset too small to split; pass --test-data")
    return dataset.subset(np.sort(order[:cut])), dataset.subset(np.sort(order[cut:]))


def _pretrain(args) -> int:
    cfg = parse_config(args.config)
    data = load_data_spec(args.data)

    def progress(epoch, rec):
        print(f"epoch {epoch + 1}/{cfg.total_epochs}  loss {rec.loss:.4f}  feature_std {rec.feature_std:.4f}",
              flush=True)

    result = train_run(cfg, data, args.out, resume_from=args.resume, progress=progress)
    print(f"wrote {result.manifest_path}, {result.metrics_path}, {result.checkpoint}")
    return 0


def _eval(args) -> int:
    model, _, meta = load_checkpoint(args.checkpoint)
    cfg = parse_config_text(meta.get("config", ""), f"{args.checkpoint} metadata")
    data = load_data_spec(args.data)
    if args.test_data:
        train, test = data, load_data_spec(args.test_data)
    else:
        train, test = _split(data, cfg.seed)
    temporal = cfg.temporal_spec()
    tr = extract_features(model, train, args.branch, temporal)
    te = extract_features(model, test, args.branch, temporal)
    if args.probe == "knn":
        print(f"knn_acc (k={args.k}) {knn_classify(tr, te, args.k):.4f}")
    elif args.probe == "linear":
        print(f"probe_acc {linear_probe(tr, te, args.epochs, args.lr, seed=cfg.seed):.4f}")
    else:
        for n, r in retrieval_recall(tr, te).items():
            print(f"R@{n} {r:.4f}")
    print(f"feature_std {feature_std(te):.4f}")
    return 0


def _sweep(args) -> int:
    cfg = parse_config(args.config)
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    rows = sweep(cfg, args.axis, values, load_data_spec(args.data), load_data_spec(args.test_data), args.out,
                 k=args.k, probe_epochs=args.probe_epochs,
                 progress=lambda r: print(f"{args.axis}={r.value}  knn {r.knn_acc:.4f}  probe {r.probe_acc:.4f}  "
                                          f"feature_std {r.feature_std:.4f}", flush=True))
    print(f"wrote {len(rows)} rows to {args.out}/sweep.csv")
    return 0


def _verify(args) -> int:
    results = run_checks(args.seeds)
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else 1


def _plot(args) -> int:
    plot_csv(args.metrics, args.out)
    print(f"wrote {args.out}")
    return 0


_COMMANDS = {"pretrain": _pretrain, "eval": _eval, "sweep": _sweep, "verify": _verify, "plot": _plot}
_EXPECTED = (ConfigError, DatasetError, EvaluationError, ProbeDiverged, CheckpointError, PlotError,
             TrainingDiverged, OSError, ValueError)


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)  # exits 2 on usage errors
    try:
        return _COMMANDS[args.command](args)
    except _EXPECTED as exc:
        print(f"softcontrast {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
