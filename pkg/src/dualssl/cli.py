"""Command-line entry point: ``dualssl <command> [options]``.

Exit codes: 0 ok, 2 config, 3 data, 4 shape, 5 internal.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import sys
import time
from pathlib import Path


from . import __version__
from . import tensor as T
from .augment import AugmentSpec, eval_spec
from .checkpoint import Checkpoint
from .config import RunConfig, load_config
from .data import (SyntheticSpec, import_medmnist_csv, load_octb, save_octb,
                   stratified_subsample, synth_generate)
from .errors import ConfigError, DataError, ShapeError
from .finetune import Classifier, ClassifierHead, cross_validate, predict, select_best
from .metrics import MetricsReport
from .rng import CounterRNG
from .ssp import pretrain
from .vit import ViTModel

log = logging.getLogger("dualssl")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_SHAPE, EXIT_INTERNAL = 0, 2, 3, 4, 5


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.preset:
        cfg = cfg.with_preset(args.preset)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.freeze_backbone:
        cfg = dataclasses.replace(cfg, finetune=dataclasses.replace(cfg.finetune, freeze_backbone=True))
    if args.symmetric:
        cfg = dataclasses.replace(cfg, pretrain=dataclasses.replace(cfg.pretrain, symmetric=True))
    return cfg


def _require_path(path, what: str) -> Path:
    if path is None:
        raise DataError(f"no {what} given")
    p = Path(path)
    if not p.is_file():
        raise DataError(f"{what} not found: {p}")
    return p


def _hash_inputs(paths, cfg: RunConfig) -> str:
    h = hashlib.sha256(cfg.to_ini().encode())
    for p in paths:
        h.update(Path(p).read_bytes())
    return h.hexdigest()


def _write_manifest(out: Path, command: str, cfg: RunConfig, args, inputs, outputs, started: float):
    path = out / "manifest.json"
    manifest = json.loads(path.read_text()) if path.is_file() else {"commands": {}}
    manifest["package"] = f"dualssl {__version__}"
    manifest["commands"][command] = {
        "config": cfg.to_dict(),
        "seed": args.seed,
        "precision": args.precision,
        "inputs": [str(p) for p in inputs],
        "input_hash": _hash_inputs(inputs, cfg),
        "outputs": sorted(outputs),
        "wall_time_s": round(time.time() - started, 3),
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _fmt(x: float) -> str:
    return repr(float(x))


def classifier_checkpoint(model: Classifier, cfg: RunConfig, class_names, extra: dict) -> Checkpoint:
    tensors = {}
    tensors.update(("backbone." + k, v) for k, v in model.backbone.state_dict().items())
    tensors.update(("head." + k, v) for k, v in model.head.state_dict().items())
    meta = {"class_names": list(class_names), "finetune_config": dataclasses.asdict(cfg.finetune),
            "augment_finetune": dataclasses.asdict(cfg.augment_finetune), **extra}
    return Checkpoint(stage="finetune", model_config=model.backbone.config, tensors=tensors, meta=meta)


def load_classifier(ckpt: Checkpoint) -> Classifier:
    if ckpt.stage != "finetune":
        raise DataError(f"expected a fine-tuned model checkpoint, got stage {ckpt.stage!r}")
    meta = ckpt.meta
    fcfg = meta["finetune_config"]
    backbone = ViTModel(ckpt.model_config)
    backbone.load_state_dict(ckpt.section("backbone"))
    head = ClassifierHead(ckpt.model_config.embed_dim, len(meta["class_names"]), fcfg["head_hidden"],
                          fcfg["dropout"], CounterRNG(0))
    head.load_state_dict(ckpt.section("head"))
    return Classifier(backbone, head).eval()


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_pretrain(args, cfg: RunConfig, out: Path) -> list:
    path = _require_path(args.data or cfg.data.pretrain_path, "pretraining dataset")
    dataset = load_octb(path).unlabeled()
    result = pretrain(dataset, cfg.pretrain, cfg.model, cfg.augment_pretrain)
    result.to_checkpoint().save(out / "pretrain.ckpt")
    _write_csv(out / "pretrain_loss.csv", ["epoch", "mean_loss"],
               [[i + 1, _fmt(v)] for i, v in enumerate(result.epoch_losses)])
    return [path], ["pretrain.ckpt", "pretrain_loss.csv"]


def cmd_finetune(args, cfg: RunConfig, out: Path) -> list:
    path = _require_path(args.data or cfg.data.train_path, "labeled training dataset")
    dataset = load_octb(path, split_tag="train")
    if dataset.labels is None:
        raise DataError(f"{path} has no labels")
    inputs = [path]
    ckpt = None
    if args.checkpoint:
        inputs.append(_require_path(args.checkpoint, "pretrained checkpoint"))
        ckpt = Checkpoint.load(args.checkpoint)
    full_size = len(dataset)
    if cfg.data.subsample_fraction is not None:
        dataset = stratified_subsample(dataset, cfg.data.subsample_fraction, cfg.finetune.seed)
        log.info("stratified subset: %d of %d samples", len(dataset), full_size)
    plan, results = cross_validate(ckpt, dataset, cfg.finetune, cfg.model, cfg.augment_finetune,
                                   max_folds=cfg.data.max_folds)
    outputs = []
    for r in results:
        name = f"fold_{r.fold:02d}_history.csv"
        _write_csv(out / name, ["epoch", "train_loss", "val_loss", "val_auc", "lr"],
                   [[h["epoch"], _fmt(h["train_loss"]), _fmt(h["val_loss"]), _fmt(h["val_auc"]), _fmt(h["lr"])]
                    for h in r.history])
        outputs.append(name)
    best = select_best(results)
    classifier_checkpoint(best.model, cfg, dataset.class_names,
                          {"fold": best.fold, "val_auc": best.val_auc}).save(out / "best_model.ckpt")
    summary = {
        "full_dataset_size": full_size,
        "subset_size": len(dataset),
        "class_counts": dataset.class_counts().tolist(),
        "folds": [{"fold": r.fold, "train_size": int(len(plan[r.fold][0])),
                   "val_size": int(len(plan[r.fold][1])), "val_auc": r.val_auc, "val_loss": r.val_loss,
                   "best_epoch": r.best_epoch, "epochs_run": len(r.history),
                   "stopped_early": r.stopped_early} for r in results],
        "best_fold": best.fold,
        "pretrained": ckpt is not None,
    }
    (out / "cv_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return inputs, outputs + ["best_model.ckpt", "cv_summary.json"]


def cmd_evaluate(args, cfg: RunConfig, out: Path) -> list:
    model_path = _require_path(args.model, "model checkpoint")
    test_path = _require_path(args.test or cfg.data.test_path, "test dataset")
    ckpt = Checkpoint.load(model_path)
    model = load_classifier(ckpt)
    test = load_octb(test_path, split_tag="test")
    if test.labels is None:
        raise DataError(f"{test_path} has no labels")
    c = model.backbone.config
    if test.image_shape != (c.in_channels, c.image_size, c.image_size):
        raise ShapeError(f"test images {test.image_shape} do not match model input "
                         f"({c.in_channels}, {c.image_size}, {c.image_size})")
    names = ckpt.meta["class_names"]
    if test.num_classes != len(names):
        raise ShapeError(f"test set has {test.num_classes} classes, model has {len(names)}")
    spec = eval_spec(AugmentSpec(**ckpt.meta["augment_finetune"]))
    probs = predict(model, test.images, spec)
    report = MetricsReport.from_scores(probs, test.labels, names)
    (out / "metrics.json").write_text(report.to_json() + "\n")
    (out / "table.csv").write_text(report.table_csv())
    (out / "confusion.csv").write_text(report.confusion_csv())
    outputs = ["metrics.json", "table.csv", "confusion.csv"]
    for k in range(len(names)):
        (out / f"roc_class_{k}.csv").write_text(report.roc_csv(k))
        outputs.append(f"roc_class_{k}.csv")
    return [model_path, test_path], outputs


def cmd_convert(args, cfg: RunConfig, out: Path) -> list:
    images = _require_path(args.images_csv, "images CSV")
    labels = _require_path(args.labels_csv, "labels CSV") if args.labels_csv else None
    dataset = import_medmnist_csv(images, labels, image_size=args.image_size)
    save_octb(dataset, out / args.output)
    log.info("converted %d images", len(dataset))
    return [p for p in (images, labels) if p is not None], [args.output]


def cmd_synth(args, cfg: RunConfig, out: Path) -> list:
    spec = SyntheticSpec(args.n_per_class, args.image_size, args.noise, args.seed or 0)
    dataset = synth_generate(spec)
    if args.shuffle:
        dataset = dataset.subset(CounterRNG(spec.seed).split(1).permutation(len(dataset)))
    save_octb(dataset, out / args.output)
    return [], [args.output]


def cmd_report(args, cfg: RunConfig, out: Path) -> list:
    run = Path(args.run_dir)
    if not run.is_dir():
        raise DataError(f"run directory not found: {run}")
    summary = {"run_dir": str(run)}
    for name in ("manifest.json", "cv_summary.json", "metrics.json"):
        if (run / name).is_file():
            summary[name.removesuffix(".json")] = json.loads((run / name).read_text())
    if (run / "pretrain_loss.csv").is_file():
        with open(run / "pretrain_loss.csv") as fh:
            summary["pretrain_loss"] = [float(r["mean_loss"]) for r in csv.DictReader(fh)]
    folds = sorted(run.glob("fold_*_history.csv"))
    summary["fold_histories"] = {}
    for f in folds:
        with open(f) as fh:
            summary["fold_histories"][f.stem] = [{k: float(v) for k, v in r.items()} for r in csv.DictReader(fh)]
    if len(summary) == 2 and not folds:
        raise DataError(f"{run} contains no run outputs")
    (out / "report.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return [], ["report.json"]


COMMANDS = {
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "convert": cmd_convert,
    "synth": cmd_synth,
    "report": cmd_report,
}


def _default_out(args) -> Path:
    target = getattr(args, "output", None)
    return Path(target).parent if target else Path(".")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config file (INI sections)")
    common.add_argument("--seed", type=int, default=None, help="global seed (u64)")
    common.add_argument("--out", default=None,
                        help="output directory (default: the output file's folder for synth/convert, else .)")
    common.add_argument("--preset", choices=["vit-base", "vit-desk"], default=None)
    common.add_argument("--precision", choices=["f32", "f64"], default="f64")
    common.add_argument("--freeze-backbone", action="store_true", help="train only the classifier head")
    common.add_argument("--symmetric", action="store_true", help="average the loss over both view orders")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="dualssl", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"dualssl {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", parents=[common], help="self-supervised dual-stream pretraining")
    p.add_argument("--data", help="OCTB dataset (labels ignored)")

    p = sub.add_parser("finetune", parents=[common], help="k-fold supervised fine-tuning")
    p.add_argument("--data", help="labeled OCTB dataset")
    p.add_argument("--checkpoint", help="pretraining checkpoint; omit to train from scratch")

    p = sub.add_parser("evaluate", parents=[common], help="metrics of a fine-tuned model on a test set")
    p.add_argument("--model", required=True, help="best_model.ckpt from finetune")
    p.add_argument("--test", help="labeled OCTB test set (required unless [data] test_path is set)")

    p = sub.add_parser("convert", parents=[common], help="CSV export -> OCTB")
    p.add_argument("images_csv")
    p.add_argument("labels_csv", nargs="?")
    p.add_argument("output")
    p.add_argument("--image-size", type=int, default=28)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic 4-class OCTB dataset")
    p.add_argument("output")
    p.add_argument("--n-per-class", type=int, default=100)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--image-size", type=int, default=28)
    p.add_argument("--shuffle", action="store_true")

    p = sub.add_parser("report", parents=[common], help="consolidate a run directory into report.json")
    p.add_argument("run_dir")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    started = time.time()
    try:
        T.set_precision(args.precision)
        cfg = _resolve_config(args)
        out = Path(args.out) if args.out else _default_out(args)
        out.mkdir(parents=True, exist_ok=True)
        inputs, outputs = COMMANDS[args.command](args, cfg, out)
        _write_manifest(out, args.command, cfg, args, inputs, outputs, started)
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ShapeError as exc:
        print(f"shape error: {exc}", file=sys.stderr)
        return EXIT_SHAPE
    except Exception as exc:  # noqa: BLE001 - last-resort mapping to the internal exit code
        log.debug("internal error", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    finally:
        T.set_precision("f64")


if __name__ == "__main__":
    sys.exit(main())
