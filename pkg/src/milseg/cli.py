"""Command-line driver.

    milseg gen-data  --out DIR [--n-good N --n-bad N]
    milseg train     --dataset DIR --out DIR
    milseg eval      --checkpoint FILE --dataset DIR [--split test] --out DIR
    milseg segment   --checkpoint FILE IMAGE.pgm ... --out DIR
    milseg crossval  --dataset DIR [--k 5] --out DIR
    milseg roc       METRICS_DIR [--out DIR]

Global flags (accepted before or after the subcommand): ``--config``,
``--seed``, ``--out``, ``--profile {desk,paper}``, ``--set key=value``, and
``--multi-thread`` to let BLAS use several threads (by default numeric code
runs single-threaded so outputs are byte-identical across runs).

Exit status is 0 on success, 1 on runtime failures and 2 on invalid
configuration. Diagnostics go to stderr; results go to files.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import logging
import os
import re
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import config as cfgmod
from . import metrics as M
from . import weakseg
from .data import (
    GOOD,
    LABEL_NAMES,
    Dataset,
    generate_synthetic,
    holdout_split,
    kfold_split,
    load_dataset,
    load_image,
    save_dataset,
    save_image,
    to_batch,
    write_folds,
)
from .errors import CheckpointError, ConfigurationError, MilsegError
from .model import build, describe, load_checkpoint, parameter_count, save_checkpoint
from .training import EpochLog, predict, train

logger = logging.getLogger("milseg")

LOG_HEADER = ["epoch", "iteration", "lr", "train_loss", "train_acc"]


class CommandError(MilsegError):
    """A command failed after validation; exit status 1."""


# -- helpers --------------------------------------------------------------------


def _require_dir(path: Path, what: str) -> Path:
    if not path.is_dir():
        raise ConfigurationError(f"{what} {path} is not a directory")
    return path


def _prepare_out(path: Path) -> Path:
    """Check that ``path`` can be created/written without touching the filesystem."""
    if path.exists():
        if not path.is_dir():
            raise ConfigurationError(f"output path {path} exists and is not a directory")
        if not os.access(path, os.W_OK):
            raise ConfigurationError(f"output directory {path} is not writable")
        return path
    parent = path.parent
    while not parent.exists() and parent != parent.parent:
        parent = parent.parent
    if not parent.is_dir() or not os.access(parent, os.W_OK):
        raise ConfigurationError(f"cannot create output directory {path}")
    return path


def _check_image_sizes(ds: Dataset, size: int) -> None:
    for it in ds:
        if it.pixels.shape != (size, size):
            raise ConfigurationError(f"image {it.id} is {it.pixels.shape}, model expects {size}x{size}")


def _fmt(x: float) -> str:
    return repr(float(x))


def _load_dataset(cfg) -> Dataset:
    if not cfg.dataset:
        raise ConfigurationError("--dataset is required")
    root = _require_dir(Path(cfg.dataset), "dataset")
    try:
        return load_dataset(root)
    except (OSError, ValueError) as exc:
        raise ConfigurationError(f"cannot read dataset {root}: {exc}") from exc


def _load_net(path: Optional[str]):
    if not path:
        raise ConfigurationError("--checkpoint is required")
    p = Path(path)
    if not p.is_file():
        raise ConfigurationError(f"checkpoint {p} not found")
    return load_checkpoint(p)


def _split_items(cfg, ds: Dataset, split: str) -> Dataset:
    if split == "all":
        return ds
    train_set, test_set = holdout_split(ds, cfg.train_good, cfg.train_bad, cfg.seed)
    return train_set if split == "train" else test_set


def _train_with_log(cfg, net, train_set: Dataset, log_path: Path) -> list[EpochLog]:
    with open(log_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_HEADER)

        def on_epoch(row: EpochLog) -> None:
            writer.writerow([row.epoch, row.iteration, _fmt(row.lr), _fmt(row.train_loss), _fmt(row.train_acc)])
            fh.flush()

        return train(net, train_set, cfg.train_settings(), on_epoch)


def _dry_run(net, ds: Dataset) -> None:
    """Forward one image so shape problems surface before any training."""
    net.forward(to_batch(ds.items[:1], net.dtype), training=False)


def _evaluate(net, items) -> tuple[M.EvalReport, np.ndarray]:
    probs, _ = predict(net, items)
    return M.evaluate(probs, [it.label for it in items]), probs


# -- commands -------------------------------------------------------------------


def cmd_gen_data(cfg, args) -> int:
    out = _prepare_out(Path(cfg.out))
    if cfg.n_good + cfg.n_bad == 0:
        raise ConfigurationError("nothing to generate: --n-good and --n-bad are both zero")
    ds = generate_synthetic(cfg.synthetic_params(), cfg.n_good, cfg.n_bad)
    try:
        save_dataset(ds, out)
    except OSError as exc:
        raise CommandError(f"writing {out}: {exc}") from exc
    counts = ds.class_counts
    logger.info("wrote %d good and %d bad images to %s", counts[GOOD], counts[-GOOD], out)
    return 0


def cmd_train(cfg, args) -> int:
    ds = _load_dataset(cfg)
    out = _prepare_out(Path(cfg.out))
    _check_image_sizes(ds, cfg.input_size)
    train_set, test_set = holdout_split(ds, cfg.train_good, cfg.train_bad, cfg.seed)
    if len(train_set) == 0:
        raise ConfigurationError("training split is empty")
    net = build(cfg.model_config())
    _dry_run(net, train_set)

    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfgmod.dump(cfg), encoding="utf-8")
    (out / "build.log").write_text(describe(net) + "\n", encoding="utf-8")
    with open(out / "split.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "split"])
        for name, part in (("train", train_set), ("test", test_set)):
            for it in part:
                writer.writerow([it.id, name])
    logger.info("training %d parameters on %d images for %d epochs", parameter_count(net), len(train_set), cfg.epochs)
    start = time.perf_counter()
    history = _train_with_log(cfg, net, train_set, out / "train_log.csv")
    save_checkpoint(net, out / "model.ckpt")
    logger.info(
        "done in %.1fs: final train_loss %.4f train_acc %.3f",
        time.perf_counter() - start,
        history[-1].train_loss,
        history[-1].train_acc,
    )
    return 0


def cmd_eval(cfg, args) -> int:
    ds = _load_dataset(cfg)
    out = _prepare_out(Path(cfg.out))
    try:
        net = _load_net(args.checkpoint)
    except CheckpointError as exc:
        raise CommandError(str(exc)) from exc
    _check_image_sizes(ds, net.config.input_size)
    items = _split_items(cfg, ds, args.split).items
    if not items:
        raise ConfigurationError(f"split {args.split!r} is empty")
    report, probs = _evaluate(net, items)
    out.mkdir(parents=True, exist_ok=True)
    M.write_metrics_csv([(0, report)], out / "metrics.csv")
    if report.roc_points:
        M.write_roc_csv(report.roc_points, out / "roc_fold0.csv")
    else:
        logger.warning("only one class in split %r: AUC undefined, no ROC written", args.split)
    with open(out / "scores.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "label", "score"])
        for it, p in zip(items, probs):
            writer.writerow([it.id, LABEL_NAMES[it.label], _fmt(p)])
    logger.info("%s split: accuracy %.3f auc %s", args.split, report.accuracy, report.auc)
    return 0


def cmd_segment(cfg, args) -> int:
    out = _prepare_out(Path(cfg.out))
    try:
        net = _load_net(args.checkpoint)
    except CheckpointError as exc:
        raise CommandError(str(exc)) from exc
    if not args.images:
        raise ConfigurationError("no images given")
    out.mkdir(parents=True, exist_ok=True)
    failures = 0
    for path in args.images:
        ident = Path(path).stem
        try:
            image = load_image(path)
            if image.shape != (net.config.input_size,) * 2:
                raise ConfigurationError(f"image is {image.shape}, model expects {net.config.input_size}x{net.config.input_size}")
            heat, mask = weakseg.segment(net, image, cfg.tau, cfg.element(image.shape[0]))
            save_image(out / f"{ident}_heat.pgm", heat)
            save_image(out / f"{ident}_mask.pgm", mask)
        except (OSError, MilsegError) as exc:
            failures += 1
            logger.error("%s: %s", path, exc)
    return 1 if failures else 0


def cmd_crossval(cfg, args) -> int:
    ds = _load_dataset(cfg)
    out = _prepare_out(Path(cfg.out))
    _check_image_sizes(ds, cfg.input_size)
    k = args.k if args.k is not None else cfg.folds
    split = kfold_split(ds, k, cfg.seed)
    _dry_run(build(cfg.model_config()), ds)
    out.mkdir(parents=True, exist_ok=True)
    write_folds(split, out / "folds.csv")
    reports = []
    for fold in range(k):
        train_set, test_set = ds.subset(split.train_ids(fold)), ds.subset(split.test_ids(fold))
        net = build(cfg.model_config())
        logger.info("fold %d: %d train / %d test", fold, len(train_set), len(test_set))
        _train_with_log(cfg, net, train_set, out / f"train_log_fold{fold}.csv")
        report, _ = _evaluate(net, test_set.items)
        reports.append(report)
        M.write_roc_csv(report.roc_points, out / f"roc_fold{fold}.csv")
        M.write_metrics_csv(list(enumerate(reports)), out / "metrics.csv")
    summary = M.aggregate_folds(reports)
    M.write_metrics_csv([("mean", summary)], out / "summary.csv")
    logger.info("mean accuracy %.3f mean auc %s", summary.accuracy, summary.auc)
    return 0


_ROC_FILE = re.compile(r"roc_fold(\d+)\.csv$")


def cmd_roc(cfg, args) -> int:
    src = _require_dir(Path(args.metrics_dir), "metrics directory")
    out = _prepare_out(Path(args.out_dir) if args.out_dir else src)
    found = {int(m.group(1)): p for p in src.iterdir() if (m := _ROC_FILE.match(p.name))}
    expected: set[int] = set()
    metrics_path = src / "metrics.csv"
    if metrics_path.is_file():
        expected = {int(row["fold"]) for row in M.read_metrics_csv(metrics_path) if row["fold"].isdigit()}
    missing = sorted(expected - set(found))
    if missing:
        raise CommandError("missing ROC files: " + ", ".join(f"roc_fold{f}.csv" for f in missing))
    if not found:
        raise CommandError(f"no roc_fold<k>.csv files in {src}")
    out.mkdir(parents=True, exist_ok=True)
    aucs = []
    with open(out / "roc_merged.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["fold", "threshold", "fpr", "tpr"])
        for fold in sorted(found):
            points = M.read_roc_csv(found[fold])
            aucs.append(M.auc_from_points(points))
            for thr, fpr, tpr in points:
                writer.writerow([fold, M._fmt(thr), M._fmt(fpr), M._fmt(tpr)])
    lines = [f"fold {fold} auc {_fmt(a)}" for fold, a in zip(sorted(found), aucs)]
    lines.append(f"mean auc {_fmt(np.mean(aucs))}")
    (out / "roc_summary.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.info("merged %d folds, mean AUC %.4f", len(found), np.mean(aucs))
    return 0


# -- argument parsing ------------------------------------------------------------


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=default, help="key = value settings file")
    parser.add_argument("--seed", type=int, default=default)
    parser.add_argument("--out", default=default, help="output directory")
    parser.add_argument("--profile", choices=sorted(cfgmod.PROFILES), default=default)
    parser.add_argument("--set", action="append", metavar="KEY=VALUE", default=argparse.SUPPRESS if suppress else [],
                        help="override any config key (repeatable)")
    parser.add_argument("--multi-thread", action="store_true", default=argparse.SUPPRESS if suppress else False,
                        help="allow multi-threaded BLAS (results may differ in the last bits)")
    parser.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="milseg", description="Weakly supervised MIL colony classification and segmentation.")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        _global_flags(p, suppress=True)
        p.set_defaults(func=func)
        return p

    p = add("gen-data", cmd_gen_data, "write a synthetic colony dataset")
    p.add_argument("--n-good", type=int)
    p.add_argument("--n-bad", type=int)
    p.add_argument("--input-size", type=int)

    p = add("train", cmd_train, "train a model on the hold-out training split")
    p.add_argument("--dataset")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--input-size", type=int)
    p.add_argument("--train-good", type=int)
    p.add_argument("--train-bad", type=int)
    p.add_argument("--head", choices=("avg_pool_fc", "fc_baseline"))
    p.add_argument("--no-augment", dest="augment", action="store_const", const=False)

    p = add("eval", cmd_eval, "evaluate a checkpoint on a dataset split")
    p.add_argument("--checkpoint")
    p.add_argument("--dataset")
    p.add_argument("--split", choices=("train", "test", "all"), default="test")
    p.add_argument("--train-good", type=int)
    p.add_argument("--train-bad", type=int)

    p = add("segment", cmd_segment, "write heatmaps and weak masks for images")
    p.add_argument("--checkpoint")
    p.add_argument("images", nargs="*")
    p.add_argument("--tau", type=float)
    p.add_argument("--element-size", type=int)

    p = add("crossval", cmd_crossval, "stratified k-fold cross-validation")
    p.add_argument("--dataset")
    p.add_argument("--k", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--input-size", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--no-augment", dest="augment", action="store_const", const=False)

    p = add("roc", cmd_roc, "merge per-fold ROC files")
    p.add_argument("metrics_dir")
    p.set_defaults(out_dir=None)
    return parser


_CONFIG_ARGS = (
    "seed", "out", "profile", "dataset", "epochs", "batch_size", "alpha", "train_good", "train_bad",
    "head", "augment", "n_good", "n_bad", "input_size", "tau", "element_size",
)


def _resolve_config(args) -> cfgmod.RunConfig:
    file_values = cfgmod.read_config_file(args.config) if args.config else {}
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigurationError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip().replace("-", "_")] = value.strip()
    for name in _CONFIG_ARGS:
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    overrides["single_thread"] = not args.multi_thread
    return cfgmod.resolve(file_values, overrides)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(message)s",
        stream=sys.stderr,
        force=True,
    )
    if args.command == "roc":
        args.out_dir = args.out
    try:
        cfg = _resolve_config(args)
        limiter = contextlib.nullcontext()
        if cfg.single_thread:
            from threadpoolctl import threadpool_limits

            limiter = threadpool_limits(limits=1)
        with limiter:
            return args.func(cfg, args)
    except ConfigurationError as exc:
        print(f"milseg: configuration error: {exc}", file=sys.stderr)
        return 2
    except (MilsegError, OSError) as exc:
        print(f"milseg: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
