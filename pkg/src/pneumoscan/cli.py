"""Command-line entry point: ``pneumoscan <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

from . import dataset as ds
from . import experiment, report, synthetic
from .activations import LAYER_ALIASES
from .config import ExperimentConfig
from .imageops import ConfigError, ImageError
from .metrics import MetricsError
from .modelzoo import ARCHITECTURES, ModelError
from .trainer import TrainingError

log = logging.getLogger("pneumoscan")

RUNTIME_ERRORS = (ds.DatasetError, ImageError, ConfigError, ModelError, TrainingError, MetricsError,
                  experiment.PipelineError, report.ReportError, ValueError, OSError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _experiment_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    S = argparse.SUPPRESS
    g = p.add_argument_group("experiment")
    g.add_argument("--config", help="JSON experiment config (flags override it)")
    g.add_argument("--workdir", dest="workdir", default=S)
    g.add_argument("--scheme", dest="scheme", choices=[s.value for s in ds.Scheme], default=S)
    g.add_argument("--weights", dest="weights_source", choices=["imagenet", "none"], default=S,
                   help="backbone initialisation; 'none' trains from random init (offline)")
    g.add_argument("--freeze-backbone", dest="freeze_backbone", action="store_true", default=S)
    g.add_argument("--work-size", dest="work_size", type=int, default=S,
                   help="resolution of the augmentation cache")
    g.add_argument("--validation-fraction", dest="validation_fraction", type=float, default=S)
    g.add_argument("--mean", dest="channel_mean", type=float, nargs=3, default=S)
    g.add_argument("--std", dest="channel_std", type=float, nargs=3, default=S)
    s = p.add_argument_group("seeds")
    for name in ("split", "fold", "augment", "head"):
        s.add_argument(f"--{name}-seed", dest=f"seeds.{name}", type=int, default=S)
    s.add_argument("--seed", dest="seeds.train", type=int, default=S, help="training seed")
    t = p.add_argument_group("training")
    t.add_argument("--learning-rate", dest="train.learning_rate", type=float, default=S)
    t.add_argument("--momentum", dest="train.momentum", type=float, default=S)
    t.add_argument("--batch-size", dest="train.batch_size", type=int, default=S)
    t.add_argument("--max-epochs", dest="train.max_epochs", type=int, default=S)
    t.add_argument("--patience", dest="train.early_stop_patience", type=int, default=S)
    t.add_argument("--deterministic", dest="train.deterministic", action=argparse.BooleanOptionalAction,
                   default=S)
    t.add_argument("--num-workers", dest="train.num_workers", type=int, default=S)
    t.add_argument("--train-metrics", dest="train.train_metrics", choices=["eval", "running"], default=S)
    t.add_argument("--stop-at-train-accuracy", dest="train.stop_at_train_accuracy", type=float, default=S)
    return p


def build_parser() -> argparse.ArgumentParser:
    exp = _experiment_flags()
    parser = _Parser(prog="pneumoscan", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("scan", parents=[exp], help="catalogue and checksum the dataset")
    p.add_argument("--root", dest="dataset_root", default=argparse.SUPPRESS)

    p = sub.add_parser("verify", parents=[exp], help="re-hash files listed in the manifest")

    p = sub.add_parser("split", parents=[exp], help="stratified train/test split")
    p.add_argument("--test-fraction", dest="test_fraction", type=float, default=argparse.SUPPRESS)
    p.add_argument("--pin-test-counts", dest="pin_test_counts", action="store_true", default=argparse.SUPPRESS,
                   help="use the reference per-class test counts (205/214, 199/197/201, 197/201) instead of a fraction")
    p.add_argument("--by-subject", dest="by_subject", action="store_true", default=argparse.SUPPRESS,
                   help="keep all images of one personN together")

    p = sub.add_parser("augment", parents=[exp], help="expand the training set to a per-class target")
    p.add_argument("--target", dest="augmentation.target_per_class", type=int, default=argparse.SUPPRESS)
    p.add_argument("--rotation", dest="augmentation.rotation_degrees", type=float, default=argparse.SUPPRESS)
    p.add_argument("--scale", dest="augmentation.scale_factor", type=float, default=argparse.SUPPRESS)
    p.add_argument("--translate-x", dest="augmentation.translate_x_frac", type=float,
                   default=argparse.SUPPRESS)
    p.add_argument("--translate-y", dest="augmentation.translate_y_frac", type=float,
                   default=argparse.SUPPRESS)
    p.add_argument("--fill", dest="augmentation.fill_value", type=float, default=argparse.SUPPRESS)

    for name, helptext in (("train", "fine-tune one backbone and predict the test set"),
                           ("cv", "k-fold cross-validation on the training pool")):
        p = sub.add_parser(name, parents=[exp], help=helptext)
        p.add_argument("--arch", required=True, choices=sorted(ARCHITECTURES))
        p.add_argument("--run-name", help="run directory name (default: timestamp)")
        if name == "train":
            p.add_argument("--no-epoch-checkpoints", action="store_true")
        else:
            p.add_argument("--k", dest="k", type=int, default=argparse.SUPPRESS)

    p = sub.add_parser("report", help="results.csv and figures from run directories")
    p.add_argument("runs", nargs="*", help="run directories")
    p.add_argument("--out", required=True)

    p = sub.add_parser("activations", help="activation montages for images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", dest="images", action="append", required=True)
    p.add_argument("--layer", default="first_conv",
                   help=f"{' | '.join(LAYER_ALIASES)} | a module name")
    p.add_argument("--grid", type=int, nargs=2, metavar=("ROWS", "COLS"))
    p.add_argument("--out", required=True)

    p = sub.add_parser("pipeline", parents=[exp], help="scan, split, augment, train every arch, report")
    p.add_argument("--root", dest="dataset_root", default=argparse.SUPPRESS)
    p.add_argument("--arch", dest="architectures", action="append", choices=sorted(ARCHITECTURES),
                   default=argparse.SUPPRESS)
    p.add_argument("--run-name", default="pipeline")
    p.add_argument("--target", dest="augmentation.target_per_class", type=int, default=argparse.SUPPRESS)
    p.add_argument("--test-fraction", dest="test_fraction", type=float, default=argparse.SUPPRESS)
    p.add_argument("--pin-test-counts", dest="pin_test_counts", action="store_true", default=argparse.SUPPRESS)

    p = sub.add_parser("synth", help="write a small brightness-separated corpus for smoke tests")
    p.add_argument("--out", required=True)
    p.add_argument("--per-class", type=int, default=12)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    return parser


_NOT_CONFIG = {"command", "verbose", "config", "arch", "run_name", "no_epoch_checkpoints", "runs", "out",
               "checkpoint", "images", "layer", "grid", "per_class", "size", "seed"}


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    """Defaults, then the --config file, then explicit flags."""
    cfg = ExperimentConfig.load(args.config) if getattr(args, "config", None) else ExperimentConfig()
    flat = {k: v for k, v in vars(args).items() if k not in _NOT_CONFIG}
    for key in ("channel_mean", "channel_std", "architectures"):
        if key in flat:
            flat[key] = tuple(flat[key])
    return cfg.override(flat)


def _persist(cfg: ExperimentConfig) -> None:
    cfg.save(Path(cfg.workdir) / "experiment.json")


def _print_counts(manifest: ds.DatasetManifest) -> None:
    c = manifest.class_counts
    print(", ".join(f"{label.value} {c[label]}" for label in ds.ClassLabel))
    print(f"Total {len(manifest.records)}")
    if manifest.label_errors:
        print(f"warning: {len(manifest.label_errors)} file(s) excluded by the labeling rule", file=sys.stderr)


def cmd_scan(args) -> int:
    cfg = resolve_config(args)
    manifest = experiment.scan(cfg)
    _persist(cfg)
    _print_counts(manifest)
    return 0


def cmd_verify(args) -> int:
    cfg = resolve_config(args)
    rep = ds.verify_manifest(experiment.load_manifest(cfg))
    for kind in ("missing", "mismatched", "unreadable"):
        for rid in getattr(rep, kind):
            print(f"{'hash mismatch' if kind == 'mismatched' else kind}: {rid}")
    print(f"checked {rep.checked}: {len(rep.missing)} missing, {len(rep.mismatched)} hash mismatch, "
          f"{len(rep.unreadable)} unreadable")
    return 0 if rep.ok else 2


def cmd_split(args) -> int:
    cfg = resolve_config(args)
    s = experiment.split(cfg)
    _persist(cfg)
    manifest = experiment.load_manifest(cfg)
    by_id = manifest.by_id()
    for part, ids in (("train", s.train_ids), ("test", s.test_ids)):
        counts = {name: 0 for name in s.scheme.class_names}
        for rid in ids:
            counts[s.scheme.class_of(by_id[rid].label)] += 1
        print(f"{part}: " + ", ".join(f"{k} {v}" for k, v in counts.items()))
    return 0


def cmd_augment(args) -> int:
    cfg = resolve_config(args)
    aug = experiment.augment(cfg)
    _persist(cfg)
    print(", ".join(f"{k} {v}" for k, v in aug.class_counts.items()))
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    if cfg.train.max_epochs == 0:
        print("warning: --max-epochs 0, the model is evaluated untrained", file=sys.stderr)
    _persist(cfg)
    run_dir = experiment.train_run(cfg, args.arch, args.run_name,
                                   keep_epoch_checkpoints=not args.no_epoch_checkpoints)
    m = json.loads((run_dir / "metrics.json").read_text())
    print(f"run: {run_dir}")
    print("test " + ", ".join(f"{k}={m[k]}" for k in ("accuracy", "sensitivity", "specificity",
                                                       "precision", "auc", "f1")))
    return 0


def cmd_cv(args) -> int:
    cfg = resolve_config(args)
    if cfg.k < 2:
        raise UsageError(f"--k must be >= 2, got {cfg.k}")
    _persist(cfg)
    run_dir, summary = experiment.cv_run(cfg, args.arch, args.run_name)
    print(f"run: {run_dir}")
    for name in ("accuracy", "sensitivity", "specificity", "precision", "auc", "f1"):
        mean, std = summary[name]["mean"], summary[name]["std"]
        print(f"{name}: " + ("undefined" if mean is None else f"{mean:.4f} ± {std:.4f}"))
    if summary["failed"]:
        print(f"failed folds: {summary['failed']}", file=sys.stderr)
    return 0


def cmd_report(args) -> int:
    if not args.runs:
        raise UsageError("report needs at least one run directory")
    path = report.build_report(args.runs, args.out)
    print(path.read_text(), end="")
    return 0


def cmd_activations(args) -> int:
    outputs = experiment.activations(args.checkpoint, args.images, args.out, args.layer,
                                     tuple(args.grid) if args.grid else None)
    for o in outputs:
        print(o)
    return 0


def cmd_pipeline(args) -> int:
    cfg = resolve_config(args)
    _persist(cfg)
    manifest = experiment.scan(cfg)
    _print_counts(manifest)
    s = experiment.split(cfg, manifest)
    print(f"split: {len(s.train_ids)} train, {len(s.test_ids)} test")
    aug = experiment.augment(cfg, manifest, s)
    print("augmented: " + ", ".join(f"{k} {v}" for k, v in aug.class_counts.items()))
    run_dirs = [experiment.train_run(cfg, arch, args.run_name) for arch in cfg.architectures]
    path = report.build_report(run_dirs, Path(cfg.workdir) / "report" / cfg.scheme)
    print(path.read_text(), end="")
    return 0


def cmd_synth(args) -> int:
    root = synthetic.write_corpus(args.out, args.per_class, args.per_class, args.per_class, args.size,
                                  args.seed)
    print(root)
    return 0


COMMANDS = {
    "scan": cmd_scan, "verify": cmd_verify, "split": cmd_split, "augment": cmd_augment,
    "train": cmd_train, "cv": cmd_cv, "report": cmd_report, "activations": cmd_activations,
    "pipeline": cmd_pipeline, "synth": cmd_synth,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"pneumoscan {args.command}: error: {e}", file=sys.stderr)
        return 1
    except RUNTIME_ERRORS as e:
        print(f"pneumoscan {args.command}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
