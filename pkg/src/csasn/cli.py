"""Command-line entry point: synth, preprocess, train, eval, ablate, export-roc.

Options may also come from a plain ``key = value`` file given with --config;
keys use the long flag names with dashes or underscores.  Flags given on the
command line win over the file.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (DEFAULT_CLASS_PROBS, SUBTYPES, ManifestError, default_center_profiles, generate_synthetic,
                   load_manifest, mmd_max_split, patient_split, write_manifest)
from .loss import COMPONENTS, LossConfig
from .metrics import TASK_NAMES, roc_points, task_report
from .model import VARIANTS, CSASN, ModelConfig
from .preprocess import AugmentSpec, FilterSpec, prepare_training_samples
from .trainer import TrainConfig, TrainingDiverged, fit, predict_positive, stack_images

logger = logging.getLogger("csasn")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3


class UsageError(Exception):
    """Invalid flags, config values or missing inputs (exit code 2)."""


# option table -------------------------------------------------------------------

def _positive_int(v):
    v = int(v)
    if v < 1:
        raise ValueError("must be >= 1")
    return v


def _positive_float(v):
    v = float(v)
    if not v > 0:
        raise ValueError("must be > 0")
    return v


def _nonneg_float(v):
    v = float(v)
    if v < 0:
        raise ValueError("must be >= 0")
    return v


def _fraction(v):
    v = float(v)
    if not 0 < v < 1:
        raise ValueError("must be in (0, 1)")
    return v


def _probs(v):
    values = [float(x) for x in str(v).split(",")]
    if len(values) != len(SUBTYPES) or any(x < 0 for x in values) or abs(sum(values) - 1.0) > 1e-6:
        raise ValueError(f"need {len(SUBTYPES)} non-negative comma-separated values summing to 1")
    return tuple(values)


def _bool(v):
    if isinstance(v, bool):
        return v
    text = str(v).strip().lower()
    if text in ("1", "true", "yes", "on"):
        return True
    if text in ("0", "false", "no", "off"):
        return False
    raise ValueError("must be true or false")


def _choice(*options):
    def parse(v):
        if v not in options:
            raise ValueError(f"must be one of {', '.join(options)}")
        return v
    return parse


def _variants(v):
    if v == "all":
        return VARIANTS
    names = tuple(x.strip() for x in str(v).split(",") if x.strip())
    bad = [n for n in names if n not in VARIANTS]
    if bad or not names:
        raise ValueError(f"unknown variants {bad}; choose from {', '.join(VARIANTS)} or all")
    return names


# name -> (parser, default, help); booleans are store_true flags
OPTIONS = {
    "seed": (int, 0, "random seed"),
    "precision": (_choice("f32", "f64"), "f32", "float width"),
    "patients": (_positive_int, 200, "number of synthetic patients"),
    "centers": (_positive_int, 2, "number of acquisition centers"),
    "class_probs": (_probs, DEFAULT_CLASS_PROBS, "Benign,ATC,FTC,MTC probabilities"),
    "image_size": (_positive_int, 64, "synthetic image side (multiple of 32)"),
    "split": (_choice("patient", "mmd", "none"), "patient", "train/test split strategy"),
    "test_frac": (_fraction, 0.2, "fraction of patients held out"),
    "split_candidates": (_positive_int, 32, "random splits scored by the mmd strategy"),
    "oversample": (_positive_int, 9, "replicas per malignant sample"),
    "no_augment": (_bool, False, "skip augmentation"),
    "no_filter": (_bool, False, "skip the DCT band-pass"),
    "filter_low": (_nonneg_float, 10.0, "band lower radius at reference size 224"),
    "filter_high": (_positive_float, 100.0, "band upper radius at reference size 224"),
    "variant": (_choice(*VARIANTS), "full", "model variant"),
    "variants": (_variants, "all", "comma list of variants or all"),
    "epochs": (_positive_int, 30, "training epochs"),
    "lr": (_positive_float, 1e-4, "initial learning rate"),
    "batch_size": (_positive_int, 16, "batch size (>= 2)"),
    "clip_norm": (_positive_float, 1.0, "global gradient norm ceiling"),
    "weight_decay": (_nonneg_float, 1e-4, "decoupled weight decay"),
    "dropout": (_fraction, 0.5, "head dropout rate"),
    "debug_masks": (_bool, False, "write attention masks as CSV grids"),
}

COMMAND_OPTIONS = {
    "synth": ["patients", "centers", "class_probs", "image_size"],
    "preprocess": ["split", "test_frac", "split_candidates", "oversample", "no_augment", "no_filter",
                   "filter_low", "filter_high"],
    "train": ["variant", "epochs", "lr", "batch_size", "clip_norm", "weight_decay", "dropout", "debug_masks"],
    "eval": ["debug_masks"],
    "ablate": ["variants", "epochs", "lr", "batch_size", "clip_norm", "weight_decay", "dropout"],
    "export-roc": [],
}

COMMAND_PATHS = {
    "synth": [],
    "preprocess": [("manifest", True, "input manifest CSV")],
    "train": [("train", True, "training manifest"), ("test", False, "held-out manifest")],
    "eval": [("checkpoint", True, "checkpoint file"), ("manifest", True, "manifest to score")],
    "ablate": [("train", True, "training manifest"), ("test", True, "held-out manifest")],
    "export-roc": [("predictions", True, "predictions CSV from train or eval")],
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="csasn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for command, names in COMMAND_OPTIONS.items():
        p = sub.add_parser(command)
        p.add_argument("--config", help="key = value option file")
        p.add_argument("--out", required=True, help="output directory")
        for key in ("seed", "precision"):
            p.add_argument(f"--{key}", default=None, help=OPTIONS[key][2])
        for key, required, text in COMMAND_PATHS[command]:
            p.add_argument(f"--{key}", default=None, help=text + (" (required)" if required else ""))
        for key in names:
            kind, _, text = OPTIONS[key]
            flag = "--" + key.replace("_", "-")
            if kind is _bool:
                p.add_argument(flag, dest=key, action="store_const", const=True, default=None, help=text)
            else:
                p.add_argument(flag, dest=key, default=None, help=text)
    return parser


def read_config_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"--config: file not found: {path}")
    values = {}
    for line_no, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"--config {path}:{line_no}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def resolve_options(args: argparse.Namespace) -> dict:
    """Defaults < config file < flags, every value parsed and checked before any work."""
    command = args.command
    allowed = ["seed", "precision"] + COMMAND_OPTIONS[command] + [k for k, _, _ in COMMAND_PATHS[command]]
    merged: dict = {}
    if args.config:
        from_file = read_config_file(args.config)
        unknown = sorted(set(from_file) - set(allowed))
        if unknown:
            raise UsageError(f"--config: unknown keys for {command}: {', '.join(unknown)}")
        merged.update(from_file)
    for key in allowed:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    resolved = {}
    for key in allowed:
        flag = "--" + key.replace("_", "-")
        if key in OPTIONS:
            kind, default, _ = OPTIONS[key]
            if key in merged:
                try:
                    resolved[key] = kind(merged[key])
                except (TypeError, ValueError) as exc:
                    raise UsageError(f"{flag}: invalid value {merged[key]!r}: {exc}") from None
            else:
                resolved[key] = default
        else:
            resolved[key] = merged.get(key)
    for key, required, _ in COMMAND_PATHS[command]:
        if required and not resolved.get(key):
            raise UsageError(f"--{key} is required for {command}")
    if "image_size" in resolved and resolved["image_size"] % 32:
        raise UsageError("--image-size: must be a multiple of 32")
    if "filter_low" in resolved and resolved["filter_low"] >= resolved["filter_high"]:
        raise UsageError("--filter-low: must be below --filter-high")
    if "batch_size" in resolved and resolved["batch_size"] < 2:
        raise UsageError("--batch-size: must be >= 2")
    resolved["out"] = Path(args.out)
    return resolved


# helpers ------------------------------------------------------------------------------

def _existing(path, flag: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"--{flag}: not found: {path}")
    return path


def _load(path, flag: str):
    samples = load_manifest(_existing(path, flag))
    if not samples:
        raise UsageError(f"--{flag}: manifest {path} has no rows")
    return samples


def _train_config(opts: dict) -> TrainConfig:
    return TrainConfig(lr0=opts["lr"], epochs=opts["epochs"], batch_size=opts["batch_size"],
                       clip_norm=opts["clip_norm"], weight_decay=opts["weight_decay"], seed=opts["seed"])


def _model_config(opts: dict, samples, variant: str) -> ModelConfig:
    side = samples[0].image.shape
    if side[0] != side[1] or side[0] % 32:
        raise UsageError(f"images must be square with side a multiple of 32, got {side}")
    return ModelConfig(image_size=side[0], dropout=opts["dropout"], variant=variant)


def write_rows(path: Path, header: Sequence[str], rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_history(path: Path, history: list) -> None:
    header = list(history[0].keys())
    write_rows(path, header, [[_fmt(h[k]) for k in header] for h in history])


def write_step_log(path: Path, step_log: list) -> None:
    header = ["step", "task", *COMPONENTS, "sigma2_1", "sigma2_2", "sigma2_3", "sigma2_4"]
    write_rows(path, header, [[_fmt(r[k]) for k in header] for r in step_log])


PREDICTION_HEADER = ["path", "patient_id", "subtype", *(f"p_{name}" for name in TASK_NAMES)]


def write_predictions(path: Path, samples, probs: np.ndarray) -> None:
    write_rows(path, PREDICTION_HEADER,
               [[s.path or "", s.patient_id, s.subtype, *(_fmt(p) for p in row)] for s, row in zip(samples, probs)])


def read_predictions(path: Path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != PREDICTION_HEADER:
            raise UsageError(f"--predictions: header must be {','.join(PREDICTION_HEADER)}")
        codes, probs = [], []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(PREDICTION_HEADER) or row[2] not in SUBTYPES:
                raise UsageError(f"--predictions:{line_no}: malformed row")
            try:
                values = [float(x) for x in row[3:]]
            except ValueError:
                raise UsageError(f"--predictions:{line_no}: non-numeric probability") from None
            if not all(0.0 <= v <= 1.0 for v in values):
                raise UsageError(f"--predictions:{line_no}: probabilities must lie in [0, 1]")
            codes.append(SUBTYPES.index(row[2]))
            probs.append(values)
    if not codes:
        raise UsageError(f"--predictions: {path} has no rows")
    return np.array(codes), np.array(probs)


def write_masks(out: Path, model: CSASN, samples) -> None:
    """Channel masks as one CSV, spatial masks as one grid CSV per image."""
    if model.attention is None:
        return
    images = stack_images(samples)
    model.eval()
    with T.no_grad():
        _, m_channel, m_spatial = model.encode(images)
    out.mkdir(parents=True, exist_ok=True)
    write_rows(out / "channel_masks.csv", ["index", *(f"c{i}" for i in range(m_channel.shape[1]))],
               [[i, *(_fmt(v) for v in row)] for i, row in enumerate(m_channel.data)])
    for i, grid in enumerate(m_spatial.data):
        write_rows(out / f"spatial_mask_{i:05d}.csv", [f"x{j}" for j in range(grid.shape[1])],
                   [[_fmt(v) for v in row] for row in grid])


# commands ---------------------------------------------------------------------------------

def cmd_synth(opts: dict) -> None:
    out = opts["out"]
    samples = generate_synthetic(opts["patients"], opts["class_probs"], default_center_profiles(opts["centers"]),
                                 np.random.default_rng(opts["seed"]), image_size=opts["image_size"])
    write_manifest(samples, out / "manifest.csv")
    logger.info("wrote %d images for %d patients to %s", len(samples), opts["patients"], out)


def cmd_preprocess(opts: dict) -> None:
    samples = _load(opts["manifest"], "manifest")
    out = opts["out"]
    rng = np.random.default_rng(opts["seed"])
    filter_spec = None if opts["no_filter"] else FilterSpec(opts["filter_low"], opts["filter_high"])
    augment_spec = None if opts["no_augment"] else AugmentSpec()

    def process(subset, factor, augment):
        processed = prepare_training_samples(subset, factor, rng, filter_spec, augment_spec if augment else None)
        return [dataclasses.replace(s, path=None) for s in processed]

    if opts["split"] == "none":
        write_manifest(process(samples, opts["oversample"], True), out / "manifest.csv")
        return
    if opts["split"] == "mmd":
        plan = mmd_max_split(samples, opts["split_candidates"], rng, opts["test_frac"])
    else:
        plan = patient_split(samples, opts["test_frac"], rng)
    train, test = plan.partition(samples)
    write_manifest(process(train, opts["oversample"], True), out / "train" / "manifest.csv")
    write_manifest(process(test, 1, False), out / "test" / "manifest.csv")
    split = {"strategy": opts["split"], "train_patients": sorted(plan.train_patient_ids),
             "test_patients": sorted(plan.test_patient_ids)}
    if opts["split"] == "mmd":
        split["mmd_score"] = plan.mmd_score
    (out / "split.json").write_text(json.dumps(split, indent=2) + "\n")


def _train_one(opts: dict, train, test, variant: str, out: Path):
    model = CSASN(_model_config(opts, train, variant), seed=opts["seed"])
    result = fit(model, train, LossConfig(weight_decay=opts["weight_decay"]), _train_config(opts))
    save_checkpoint(out / "checkpoint.bin", model, result.state)
    write_history(out / "history.csv", result.history)
    write_step_log(out / "loss_log.csv", result.step_log)
    report = None
    if test is not None:
        probs = predict_positive(model, stack_images(test))
        report = task_report([s.code for s in test], probs)
        report.to_json(out / "metrics.json")
        write_predictions(out / "predictions.csv", test, probs)
    return model, report


def cmd_train(opts: dict) -> None:
    train = _load(opts["train"], "train")
    test = _load(opts["test"], "test") if opts.get("test") else None
    model, report = _train_one(opts, train, test, opts["variant"], opts["out"])
    if opts["debug_masks"] and test is not None:
        write_masks(opts["out"] / "masks", model, test)
    if report is not None:
        logger.info("macro AUC %.4f", report.macro_auc or float("nan"))


def cmd_eval(opts: dict) -> None:
    ckpt = _existing(opts["checkpoint"], "checkpoint")
    samples = _load(opts["manifest"], "manifest")
    model, _ = load_checkpoint(ckpt)
    probs = predict_positive(model, stack_images(samples))
    report = task_report([s.code for s in samples], probs)
    opts["out"].mkdir(parents=True, exist_ok=True)
    report.to_json(opts["out"] / "metrics.json")
    write_predictions(opts["out"] / "predictions.csv", samples, probs)
    if opts["debug_masks"]:
        write_masks(opts["out"] / "masks", model, samples)


def cmd_ablate(opts: dict) -> None:
    train = _load(opts["train"], "train")
    test = _load(opts["test"], "test")
    rows = []
    for variant in opts["variants"]:
        _, report = _train_one(opts, train, test, variant, opts["out"] / variant)
        per_task = [report.tasks[n].auc if n in report.tasks else None for n in TASK_NAMES]
        rows.append([variant, *(_fmt(a) if a is not None else "" for a in per_task), _fmt(report.macro_auc)])
    write_rows(opts["out"] / "comparison.csv", ["variant", *(f"auc_{n}" for n in TASK_NAMES), "macro_auc"], rows)


def cmd_export_roc(opts: dict) -> None:
    codes, probs = read_predictions(_existing(opts["predictions"], "predictions"))
    rows = []
    for t, name in enumerate(TASK_NAMES, start=1):
        keep = (codes == 0) | (codes == t)
        y = codes[keep] == t
        if y.all() or not y.any():
            logger.warning("task %s has a single class; no ROC written", name)
            continue
        for thr, fpr, tpr in zip(*roc_points(y, probs[keep, t - 1])):
            rows.append([name, _fmt(thr), _fmt(fpr), _fmt(tpr)])
    write_rows(opts["out"] / "roc.csv", ["task", "threshold", "fpr", "tpr"], rows)


COMMANDS = {
    "synth": cmd_synth, "preprocess": cmd_preprocess, "train": cmd_train,
    "eval": cmd_eval, "ablate": cmd_ablate, "export-roc": cmd_export_roc,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        opts = resolve_options(args)
        try:
            opts["out"].mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise UsageError(f"--out: cannot create {opts['out']}: {exc}") from None
        with T.precision(opts["precision"]):
            COMMANDS[args.command](opts)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ManifestError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
