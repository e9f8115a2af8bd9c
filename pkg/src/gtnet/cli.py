"""``gtnet train|eval|ablate|export`` command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure. Errors
print one line to stderr: ``gtnet: error code=<n> kind=<kind> reason=<text>``.
"""
from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import ablation as A
from .checkpoint import CheckpointError, load_checkpoint, read_manifest, save_checkpoint
from .config import PROFILES, ConfigError, RunConfig, load_config
from .data import DataError, Dataset, load_dataset, normalize_unit_sphere, sample_points, synth_generate
from .model import GTNet, ModelConfig
from .numerics import NumericError
from .ply import write_ply
from .train import EpochLog, EvalReport, evaluate, fit

log = logging.getLogger("gtnet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gtnet", description="Graph transformer network for point clouds.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in ("train", "eval", "ablate", "export"):
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--profile", choices=sorted(PROFILES))
        p.add_argument("--seed", type=int)
        p.add_argument("--deterministic", action="store_true",
                       help="fixed seed, one thread, 64-bit arithmetic")
        p.add_argument("--out", help="output directory")
        p.add_argument("--checkpoint", help="checkpoint file")
        p.add_argument("--epochs", type=int)
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any config key")
        if name == "ablate":
            p.add_argument("--axes", default="all",
                           help="comma list from transformer,aggregation,k,encoding,residual")
    return parser


def _overrides(args) -> dict:
    out = {"profile": args.profile, "seed": args.seed, "out": args.out,
           "checkpoint": args.checkpoint, "epochs": args.epochs}
    if args.deterministic:
        out["deterministic"] = "true"
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def _thread_limit(run: RunConfig):
    limit = 1 if run.deterministic else os.environ.get("GTNET_THREADS")
    if limit is None:
        return contextlib.nullcontext()
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # BLAS keeps its own default
        return contextlib.nullcontext()
    return threadpool_limits(limits=int(limit))


# ---------------------------------------------------------------------------
# datasets


def _prepare(ds: Dataset, run: RunConfig, seed: int) -> Dataset:
    items = ds.items
    if run.num_points is not None:
        items = [sample_points(c, run.num_points, seed + i) for i, c in enumerate(items)]
    if run.normalize:
        items = [normalize_unit_sphere(c) for c in items]
    return Dataset(items, ds.split, ds.class_names, ds.part_names, ds.category_parts)


def load_split(run: RunConfig, split: str) -> Dataset:
    seed = run.model.seed
    if run.synth is not None:
        spec = run.synth
        if split != "train":
            spec = type(spec)(spec.generator, spec.points_per_cloud, spec.clouds_per_class,
                              spec.noise_sigma, spec.seed + 1000, spec.with_attributes)
        ds = synth_generate(spec, split)
    else:
        ds = load_dataset(run.dataset_root, split)
    ds = _prepare(ds, run, seed)
    _check_dataset(ds, run.model)
    return ds


def _check_dataset(ds: Dataset, cfg: ModelConfig) -> None:
    if cfg.task == "classification":
        if any(it.shape_label is None for it in ds.items):
            raise DataError("classification data lacks shape labels")
        if max(it.shape_label for it in ds.items) >= cfg.num_classes:
            raise DataError("shape label exceeds num_classes")
    else:
        if any(it.point_labels is None for it in ds.items):
            raise DataError("segmentation data lacks per-point labels")
        if max(int(it.point_labels.max()) for it in ds.items) >= cfg.num_parts:
            raise DataError("point label exceeds num_parts")
        if cfg.task == "part_segmentation" and any(it.category is None for it in ds.items):
            raise DataError("part segmentation data lacks categories")
    channels = ds.items[0].features().shape[1]
    if channels != cfg.input_channels:
        raise DataError(f"data has {channels} input channels, model expects {cfg.input_channels}")


# ---------------------------------------------------------------------------
# reports


def report_text(rep: EvalReport, class_names: Sequence[str] = ()) -> str:
    lines = [f"task: {rep.task}", f"samples: {rep.num_samples}", f"OA: {rep.oa:.6f}",
             f"mAcc: {rep.macc:.6f}"]
    if rep.miou is not None:
        lines.append(f"mIoU: {rep.miou:.6f}")
    if rep.per_category:
        lines.append("per-category IoU:")
        for c, v in rep.per_category.items():
            name = class_names[c] if c < len(class_names) else str(c)
            lines.append(f"  {name}: {v:.6f}")
    return "\n".join(lines) + "\n"


def report_tsv(rep: EvalReport) -> str:
    lines = ["metric\tkey\tvalue", f"samples\t\t{rep.num_samples}", f"oa\t\t{rep.oa!r}",
             f"macc\t\t{rep.macc!r}"]
    if rep.miou is not None:
        lines.append(f"miou\t\t{rep.miou!r}")
    for c, v in rep.per_category.items():
        lines.append(f"iou\t{c}\t{v!r}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# commands


def cmd_train(run: RunConfig) -> list[EpochLog]:
    out = Path(run.out)
    out.mkdir(parents=True, exist_ok=True)
    train_ds = load_split(run, "train")
    val_ds = load_split(run, run.eval_split)
    model = GTNet(run.model)
    best = {"score": -1.0}
    log_path = out / "train_log.tsv"
    log_path.write_text("epoch\tlr\tloss\ttrain_oa\tval_oa\tval_miou\n")

    def on_epoch(entry: EpochLog, m: GTNet) -> None:
        with log_path.open("a") as fh:
            fh.write(f"{entry.epoch}\t{entry.lr!r}\t{entry.loss!r}\t{entry.train_oa!r}\t"
                     f"{entry.val_oa!r}\t{'' if entry.val_miou is None else repr(entry.val_miou)}\n")
        if entry.epoch % run.log_every == 0:
            print(entry.line(), flush=True)
        score = entry.val_miou if entry.val_miou is not None else entry.val_oa
        if score is not None and score > best["score"]:
            best["score"] = score
            save_checkpoint(m, out / "best.ckpt")

    history = fit(model, train_ds, val_ds, on_epoch=on_epoch, augment_config=run.augment)
    save_checkpoint(model, Path(run.checkpoint) if run.checkpoint else out / "last.ckpt")
    print(f"final loss={history[-1].loss!r}", flush=True)
    return history


def _load_model(run: RunConfig) -> GTNet:
    path = run.checkpoint or str(Path(run.out) / "last.ckpt")
    if not Path(path).is_file():
        raise DataError(f"checkpoint not found: {path}")
    manifest, _ = read_manifest(path)
    saved = ModelConfig.from_dict(manifest["config"])
    if saved.task != run.model.task:
        raise CheckpointError(f"checkpoint task {saved.task!r} does not match {run.model.task!r}")
    return load_checkpoint(path, run.model)


def cmd_eval(run: RunConfig) -> EvalReport:
    model = _load_model(run)
    ds = load_split(run, run.eval_split)
    rep = evaluate(model, ds)
    out = Path(run.out)
    out.mkdir(parents=True, exist_ok=True)
    names = ds.class_names if run.model.task == "classification" else []
    text = report_text(rep, names)
    (out / "metrics.txt").write_text(text)
    (out / "metrics.tsv").write_text(report_tsv(rep))
    print(text, end="")
    return rep


def cmd_ablate(run: RunConfig, axes: Sequence[str]) -> list:
    out = Path(run.out)
    out.mkdir(parents=True, exist_ok=True)
    train_ds = load_split(run, "train")
    test_ds = load_split(run, run.eval_split)
    rows = A.run_ablation(run.model, train_ds, test_ds, axes)
    table = A.format_table(rows)
    (out / "ablation.txt").write_text(table)
    (out / "ablation.tsv").write_text(A.format_tsv(rows))
    print(table, end="")
    return rows


def cmd_export(run: RunConfig) -> list[Path]:
    model = _load_model(run)
    ds = load_split(run, run.eval_split)
    rep = evaluate(model, ds, keep_predictions=True)
    out = Path(run.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out}: {exc}") from None
    written = []
    for i, (cloud, pred) in enumerate(zip(ds.items, rep.predictions)):
        stem = f"{i:05d}_{cloud.name.replace('/', '_')}" if cloud.name else f"{i:05d}"
        truth = cloud.point_labels if cloud.point_labels is not None else cloud.shape_label
        for suffix, labels in (("pred", pred), ("gt", truth)):
            path = out / f"{stem}_{suffix}.ply"
            try:
                write_ply(path, cloud.coords, labels)
            except OSError as exc:
                raise DataError(f"cannot write {path}: {exc}") from None
            written.append(path)
    print(f"wrote {len(written)} files to {out}")
    return written


def _fail(code: int, kind: str, reason: str) -> int:
    reason = " ".join(str(reason).split())
    print(f"gtnet: error code={code} kind={kind} reason={reason}", file=sys.stderr)
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(message)s")
    try:
        args = build_parser().parse_args(argv)
        run = load_config(args.config, _overrides(args))
        axes = A.parse_axes(args.axes) if args.command == "ablate" else None
    except (UsageError, ConfigError, ValueError) as exc:
        return _fail(EXIT_USAGE, "usage", exc)
    try:
        with _thread_limit(run), np.errstate(over="ignore", invalid="ignore"):
            if args.command == "train":
                cmd_train(run)
            elif args.command == "eval":
                cmd_eval(run)
            elif args.command == "ablate":
                cmd_ablate(run, axes)
            else:
                cmd_export(run)
    except (NumericError, FloatingPointError) as exc:
        return _fail(EXIT_NUMERIC, "numeric", exc)
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        return _fail(EXIT_DATA, "data", exc)
    except ValueError as exc:
        return _fail(EXIT_DATA, "data", exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
