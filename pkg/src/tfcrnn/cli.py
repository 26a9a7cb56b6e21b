"""Command-line entry point: ``tfcrnn {prepare,train,eval,compare,excite,selftest}``.

Exit codes: 0 success, 1 internal failure, 2 user or input error.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

from . import analysis, audio
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .model import ConfigError, ModelConfig
from .trainer import TrainConfig, fit

log = logging.getLogger("tfcrnn")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2
DATA_ROOT_ENV = "TFCRNN_DATA_ROOT"

# Config-file keys mirror the long flag names.
TRAIN_KEYS = {
    "step-ms": float, "io-mode": str, "feedback": str, "seed": int, "hidden-dim": int,
    "filters": str, "dropout": float, "batch-size": int, "lr": float, "momentum": float,
    "decay-factor": float, "patience": int, "max-plateaus": int, "max-epochs": int,
    "data-root": str, "allow-subset": str,
}


class UsageError(Exception):
    pass


USER_ERRORS = (UsageError, audio.ManifestError, audio.WavError, CheckpointError, ConfigError,
               analysis.LabelMismatchError, FileNotFoundError, NotADirectoryError)


def read_config_file(path: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for number, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{number}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("_", "-")
        if key not in TRAIN_KEYS:
            raise UsageError(f"{path}:{number}: unknown key {key!r}")
        values[key] = value
    return values


def _flag(value: str) -> bool:
    lowered = str(value).strip().lower()
    if lowered in ("on", "true", "yes", "1"):
        return True
    if lowered in ("off", "false", "no", "0"):
        return False
    raise UsageError(f"expected on/off, got {value!r}")


def effective_settings(args: argparse.Namespace) -> dict[str, object]:
    settings: dict[str, object] = {"step-ms": 50.0, "io-mode": "many_to_many", "feedback": "on", "seed": 0,
                                   "hidden-dim": 256, "dropout": 0.5, "batch-size": 23, "lr": 0.1,
                                   "momentum": 0.9, "decay-factor": 5.0, "patience": 3, "max-plateaus": 3,
                                   "allow-subset": "off"}
    if args.config:
        for key, value in read_config_file(args.config).items():
            try:
                settings[key] = TRAIN_KEYS[key](value)
            except ValueError as exc:
                raise UsageError(f"config value for {key}: {exc}") from exc
    for key in TRAIN_KEYS:
        value = getattr(args, key.replace("-", "_"), None)
        if value is not None:
            settings[key] = value
    return settings


def resolve_data_root(value: str | None) -> Path:
    root = value or os.environ.get(DATA_ROOT_ENV)
    if not root:
        raise UsageError(f"no data root: pass --data-root or set {DATA_ROOT_ENV}")
    path = Path(root)
    if not path.is_dir():
        raise UsageError(f"data root {path} is not a directory")
    return path


def load_splits(root: Path, allow_subset: bool) -> audio.DatasetSplits:
    cached = root / audio.MANIFEST_NAME
    if cached.is_file():
        splits = audio.read_manifest(cached, root)
        if not allow_subset and len(splits.label_names) != audio.NUM_KEYWORDS:
            raise audio.ManifestError(f"manifest lists {len(splits.label_names)} keywords, expected 35")
        return splits
    return audio.load_manifest(root, None if allow_subset else audio.NUM_KEYWORDS)


def cmd_prepare(args) -> int:
    root = resolve_data_root(args.data_root)
    splits = audio.load_manifest(root, None if args.allow_subset else audio.NUM_KEYWORDS)
    target = Path(args.out) if args.out else root / audio.MANIFEST_NAME
    audio.write_manifest(splits, target)
    train, val, test = splits.sizes()
    print(f"train {train}  validation {val}  test {test}  total {train + val + test}")
    print(f"{len(splits.label_names)} classes: {' '.join(splits.label_names)}")
    print(f"manifest written to {target}")
    return EXIT_OK


def _model_config(settings, num_classes: int) -> ModelConfig:
    filters = settings.get("filters")
    return ModelConfig(
        step_ms=float(settings["step-ms"]),
        filters_per_block=[int(c) for c in str(filters).split(",")] if filters else None,
        hidden_dim=int(settings["hidden-dim"]),
        num_classes=num_classes,
        feedback_enabled=_flag(settings["feedback"]),
        io_mode=str(settings["io-mode"]),
        dropout_rate=float(settings["dropout"]),
    )


def _train_config(settings) -> TrainConfig:
    return TrainConfig(
        batch_size=int(settings["batch-size"]), lr0=float(settings["lr"]),
        momentum=float(settings["momentum"]), decay_factor=float(settings["decay-factor"]),
        plateau_patience=int(settings["patience"]), max_plateaus=int(settings["max-plateaus"]),
        seed=int(settings["seed"]), io_mode=str(settings["io-mode"]),
        max_epochs=int(settings["max-epochs"]) if settings.get("max-epochs") is not None else None,
    )


def cmd_train(args) -> int:
    settings = effective_settings(args)
    allow_subset = _flag(settings["allow-subset"])
    root = resolve_data_root(settings.get("data-root"))
    splits = load_splits(root, allow_subset)
    try:
        model_config = _model_config(settings, len(splits.label_names))
        train_config = _train_config(settings)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    echo = {**settings, "data-root": str(root), "num-classes": len(splits.label_names),
            "step-samples": model_config.step_samples, "num-blocks": model_config.num_blocks,
            "filters": ",".join(map(str, model_config.filters_per_block)), "time-steps": model_config.num_steps}
    echo_text = "".join(f"{k} = {echo[k]}\n" for k in sorted(echo))
    (out / "effective_config.txt").write_text(echo_text, encoding="utf-8")
    sys.stdout.write(echo_text)

    train = audio.ClipSet(str(root), splits.train)
    val = audio.ClipSet(str(root), splits.validation)
    if len(train) == 0 or len(val) == 0:
        raise UsageError("training and validation splits must be non-empty")
    log_path = out / "train_log.csv"
    with open(log_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "val_loss", "lr", "plateaus"])

        def on_epoch(record):
            writer.writerow([record.epoch, repr(record.train_loss), repr(record.val_loss),
                             repr(record.lr), record.plateaus])
            fh.flush()
            print(f"epoch {record.epoch}: train {record.train_loss:.5f} val {record.val_loss:.5f} "
                  f"lr {record.lr:g} plateaus {record.plateaus}")

        ckpt = fit(model_config, train_config, train, val, splits.label_names, on_epoch)
    save_checkpoint(ckpt, out / "checkpoint.tfc")
    if not args.no_figures:
        from . import plotting
        plotting.training_curves(ckpt.history, out / "training.svg")
    print(f"best epoch {ckpt.epoch}; checkpoint written to {out / 'checkpoint.tfc'}")
    return EXIT_OK


def _load(path: str):
    if not Path(path).is_file():
        raise UsageError(f"checkpoint {path} not found")
    return load_checkpoint(path)


def _split_data(ckpt, args):
    root = resolve_data_root(args.data_root)
    splits = load_splits(root, allow_subset=True)
    if ckpt.label_names and list(splits.label_names) != list(ckpt.label_names):
        raise analysis.LabelMismatchError("dataset keywords differ from the checkpoint's label set")
    items = splits.split(args.split)
    if not items:
        raise UsageError(f"split {args.split!r} is empty")
    return audio.ClipSet(str(root), items, ckpt.model_config.clip_samples), splits.label_names


def _classes(value: str | None, default) -> list[str]:
    return [c.strip() for c in value.split(",") if c.strip()] if value else list(default)


def cmd_eval(args) -> int:
    ckpt = _load(args.ckpt)
    data, names = _split_data(ckpt, args)
    metrics = analysis.evaluate(ckpt.build_model(), data, names, workers=args.workers)
    out = Path(args.out) / args.split
    analysis.emit_report(out, metrics=metrics,
                         confusion_classes=_classes(args.classes, analysis.CONFUSION_SHOWCASE),
                         figures=not args.no_figures)
    print(f"{args.split} accuracy {metrics.accuracy:.6f} on {metrics.total} clips; reports in {out}")
    return EXIT_OK


def cmd_compare(args) -> int:
    ckpt_a, ckpt_b = _load(args.ckpt_a), _load(args.ckpt_b)
    if list(ckpt_a.label_names) != list(ckpt_b.label_names):
        raise analysis.LabelMismatchError("the two checkpoints were trained on different label sets")
    data, names = _split_data(ckpt_a, args)
    a = analysis.evaluate(ckpt_a.build_model(), data, names, workers=args.workers)
    b = analysis.evaluate(ckpt_b.build_model(), data, names, workers=args.workers)
    out = Path(args.out)
    analysis.emit_report(out, comparison=(a, b),
                         confusion_classes=_classes(args.classes, analysis.CONFUSION_SHOWCASE),
                         figures=not args.no_figures)
    delta = analysis.f1_delta(a, b)
    print(f"accuracy a {a.accuracy:.6f}  b {b.accuracy:.6f}")
    for i in sorted(range(len(names)), key=lambda i: -abs(delta[i]))[:5]:
        print(f"  {names[i]:>10s}  F1 delta {delta[i]:+.4f}")
    print(f"reports in {out}")
    return EXIT_OK


def cmd_excite(args) -> int:
    ckpt = _load(args.ckpt)
    if not ckpt.model_config.feedback_enabled:
        raise ConfigError("checkpoint has no temporal feedback; excitation analysis needs TF-CRNN")
    data, names = _split_data(ckpt, args)
    classes = _classes(args.classes, analysis.EXCITATION_SHOWCASE)
    summary = analysis.excitation_summary(ckpt.build_model(), data, names, classes)
    out = Path(args.out)
    analysis.emit_report(out, summary=summary, figures=not args.no_figures)
    for name, r in summary.correlations(block=1).items():
        print(f"{name:>10s}  clips {summary.classes[name].clips:5d}  block-1 vs energy Pearson r {r:+.4f}")
    print(f"reports in {out}")
    return EXIT_OK


def cmd_selftest(args) -> int:
    from . import selftest

    results = selftest.run_all(seeds=args.seeds, overfit=args.overfit)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_FAILURE if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tfcrnn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="scan a Speech Commands tree and write its manifest")
    p.add_argument("--data-root")
    p.add_argument("--out", help="manifest path (default: <data-root>/manifest.tsv)")
    p.add_argument("--allow-subset", action="store_true", help="accept a keyword count other than 35")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train TF-CRNN or the CRNN ablation")
    p.add_argument("--config")
    p.add_argument("--data-root")
    p.add_argument("--step-ms", type=float)
    p.add_argument("--io-mode", choices=["many-to-one", "many-to-many", "many_to_one", "many_to_many"])
    p.add_argument("--feedback", choices=["on", "off"])
    p.add_argument("--seed", type=int)
    p.add_argument("--hidden-dim", type=int)
    p.add_argument("--filters", help="comma-separated filter count per block")
    p.add_argument("--dropout", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--decay-factor", type=float)
    p.add_argument("--patience", type=int)
    p.add_argument("--max-plateaus", type=int)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--allow-subset", nargs="?", const="on", choices=["on", "off"])
    p.add_argument("--out", required=True)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_train)

    def data_args(p):
        p.add_argument("--data-root")
        p.add_argument("--split", default="test", choices=["train", "validation", "test"])
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("eval", help="accuracy, per-class F1 and confusion matrix")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", default="reports")
    p.add_argument("--classes", help="keywords shown in the confusion figure")
    data_args(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="per-keyword F1 deltas between two checkpoints (a - b)")
    p.add_argument("--ckpt-a", required=True)
    p.add_argument("--ckpt-b", required=True)
    p.add_argument("--out", default="reports/compare")
    p.add_argument("--classes", help="keywords shown in the confusion figures")
    data_args(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("excite", help="per-class excitation curves against RMS energy")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--classes", help="comma-separated keywords (default: backward,bird,stop,up)")
    p.add_argument("--out", default="reports/excitations")
    data_args(p)
    p.set_defaults(func=cmd_excite)

    p = sub.add_parser("selftest", help="gradient checks and invariants")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--overfit", action="store_true", help="also run the 2-keyword memorization check")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001
        log.exception("internal failure")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
