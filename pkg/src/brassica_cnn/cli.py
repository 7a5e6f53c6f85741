"""Command-line front end: ``train``, ``eval``, ``predict``, ``sweep`` and ``synth``.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric
failure, 4 checkpoint or other I/O error.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import data as D
from .checkpoint import CheckpointError, SpecMismatchError, load_checkpoint, save_checkpoint
from .config import Config, dump_config, load_config
from .metrics import confusion, confusion_csv, render_report, report
from .net import ARCHITECTURES, Network
from .tensor import NumericError, Rng
from .train import LOG_FIELDS, ConfigError, TrainingDiverged, evaluate, record_row, sweep, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3, 4

log = logging.getLogger("brassica_cnn")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def say(msg: str = "") -> None:
    print(msg, flush=True)


# --------------------------------------------------------------------------- #
# helpers
# --------------------------------------------------------------------------- #
def _apply_overrides(cfg: Config, args) -> Config:
    changes = {}
    for attr, key in (("lr", "learning_rate"), ("batch_size", "batch_size"), ("epochs", "epochs"),
                      ("seed", "seed"), ("out", "out_dir")):
        val = getattr(args, attr, None)
        if val is not None:
            changes[key] = val
    return replace(cfg, **changes) if changes else cfg


def _build_net(cfg: Config) -> Network:
    return Network(ARCHITECTURES[cfg.architecture](), rng=Rng(cfg.seed))


def _resolve_split(cfg: Config) -> D.Split:
    """Reuse the run's split file when present so eval sees the training split."""
    path = Path(cfg.out_dir) / "split.csv"
    if path.exists():
        return D.read_split(path)
    root = Path(cfg.data_root)
    if not root.exists():
        raise D.IngestionError(f"data root {root} does not exist")
    return D.split(D.scan(root), cfg.ratios, cfg.split_seed)


def _arrays(entries, net: Network):
    _, h, w = net.input_shape
    return D.load_arrays(entries, (h, w))


def _class_names(ckpt: Path, k: int, cfg: Config | None) -> list[str]:
    names_file = ckpt.parent / "classes.txt"
    if names_file.exists():
        names = names_file.read_text().splitlines()
        if len(names) == k:
            return names
    if cfg is not None and Path(cfg.data_root).is_dir():
        names = sorted(p.name for p in Path(cfg.data_root).iterdir() if p.is_dir())
        if len(names) == k:
            return names
    if k == len(D.CLASS_NAMES):
        return sorted(D.CLASS_NAMES)
    return [f"class_{i}" for i in range(k)]


# --------------------------------------------------------------------------- #
# commands
# --------------------------------------------------------------------------- #
def cmd_train(cfg: Config) -> int:
    out = Path(cfg.out_dir)
    root = Path(cfg.data_root)
    if not root.exists():
        raise D.IngestionError(f"data root {root} does not exist")
    manifest = D.scan(root)
    split = D.split(manifest, cfg.ratios, cfg.split_seed)
    out.mkdir(parents=True, exist_ok=True)
    D.write_split(split, out / "split.csv")
    (out / "classes.txt").write_text("\n".join(manifest.classes) + "\n")

    net = _build_net(cfg)
    if net.num_classes != len(manifest.classes):
        raise ConfigError(f"{cfg.architecture} predicts {net.num_classes} classes, data has {len(manifest.classes)}")
    say(f"data: {manifest.total} images, {len(manifest.classes)} classes; "
        f"split {len(split.train)}/{len(split.val)}/{len(split.test)}")
    train_xy = _arrays(split.train, net)
    val_xy = _arrays(split.val, net)
    tcfg = cfg.train_config()

    log_path = out / "train_log.csv"
    best = {"acc": -1.0}
    with open(log_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_FIELDS)
        fh.flush()

        def on_epoch(rec, net):
            writer.writerow(record_row(rec, include_time=not cfg.strict_deterministic))
            fh.flush()
            # strictly greater keeps the earliest epoch on ties
            if rec.val_acc > best["acc"]:
                best["acc"] = rec.val_acc
                save_checkpoint(net, out / "best.ckpt")
            say(f"epoch {rec.epoch} train_loss {rec.train_loss:.4f} train_acc {rec.train_acc:.4f} "
                f"val_loss {rec.val_loss:.4f} val_acc {rec.val_acc:.4f} seconds {rec.seconds:.2f}")

        try:
            _, net = train(net, train_xy, val_xy, tcfg, on_epoch=on_epoch)
        except TrainingDiverged as exc:
            say(f"training diverged: {exc}; partial log kept in {log_path}")
            return EXIT_NUMERIC
    save_checkpoint(net, out / "final.ckpt")
    say(f"wrote {log_path}, {out / 'best.ckpt'}, {out / 'final.ckpt'}")
    return EXIT_OK


def cmd_eval(cfg: Config, checkpoint: Path | None = None, split_name: str = "test") -> int:
    ckpt = Path(checkpoint) if checkpoint else cfg.checkpoint_path
    expected = ARCHITECTURES[cfg.architecture]()
    try:
        net = load_checkpoint(ckpt, expected_specs=expected)
    except SpecMismatchError as exc:
        say(f"checkpoint {ckpt} has architecture {exc.found_digest}, "
            f"config '{cfg.architecture}' expects {exc.expected_digest}")
        return EXIT_IO
    split = _resolve_split(cfg)
    entries = split.part(split_name)
    if not entries:
        raise D.IngestionError(f"split {split_name!r} is empty")
    x, y = _arrays(entries, net)
    _, acc, probs = evaluate(net, x, y)
    names = split.classes if len(split.classes) == net.num_classes else _class_names(ckpt, net.num_classes, cfg)
    cm = confusion(y, np.argmax(probs, axis=1), net.num_classes)
    rep = report(cm)
    text, csv_text = render_report(rep, names)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "confusion_matrix.csv").write_text(confusion_csv(cm, names))
    (out / "report.txt").write_text(text)
    (out / "report.csv").write_text(csv_text)
    say(text)
    say(f"accuracy {acc:.4f} on {len(y)} {split_name} images")
    return EXIT_OK


def cmd_predict(checkpoint: Path, image: Path, cfg: Config | None = None) -> int:
    net = load_checkpoint(checkpoint)
    _, h, w = net.input_shape
    x = D.load_image(image, (h, w))
    probs = net.eval().forward(x)[0]
    names = _class_names(Path(checkpoint), net.num_classes, cfg)
    top = int(np.argmax(probs))
    say(f"prediction: {names[top]} {probs[top]:.4f}")
    for name, p in zip(names, probs):
        say(f"{p:.4f} {name}")
    return EXIT_OK


def _parse_list(text: str | None) -> list[int]:
    if not text:
        return []
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None
    if any(v < 1 for v in vals):
        raise UsageError(f"list values must be positive, got {text!r}")
    return vals


def cmd_sweep(cfg: Config, batch_sizes, epoch_budgets) -> int:
    if not batch_sizes and not epoch_budgets:
        raise UsageError("sweep needs --batches and/or --epochs")
    split = _resolve_split(cfg)
    probe = _build_net(cfg)
    train_xy, val_xy, test_xy = (_arrays(split.part(n), probe) for n in D.SPLIT_NAMES)
    try:
        result = sweep(lambda: _build_net(cfg), train_xy, val_xy, test_xy, cfg.train_config(),
                       batch_sizes, epoch_budgets)
    except TrainingDiverged as exc:
        say(f"sweep diverged: {exc}")
        return EXIT_NUMERIC
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.csv").write_text(result.to_csv())
    for row in result.rows:
        say(f"{row.setting} seconds_per_epoch {row.seconds_per_epoch:.3f} test_accuracy {row.test_accuracy:.4f}")
    return EXIT_OK


# --------------------------------------------------------------------------- #
# argument parsing
# --------------------------------------------------------------------------- #
def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="brassica-cnn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, epochs_flag=True):
        p.add_argument("--config", type=Path, help="key = value configuration file")
        p.add_argument("--lr", type=float)
        p.add_argument("--batch-size", type=int)
        if epochs_flag:
            p.add_argument("--epochs", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--out", type=str, help="output directory")
        p.add_argument("--dump-config", action="store_true", help="print the effective config and exit")

    common(sub.add_parser("train", help="train a network"))
    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    common(p)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--split", choices=("val", "test"), default="test")
    p = sub.add_parser("predict", help="classify one image")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--config", type=Path)
    p.add_argument("image", type=Path)
    p = sub.add_parser("sweep", help="batch-size / epoch-budget sweep")
    common(p, epochs_flag=False)
    p.add_argument("--batches", type=str, help="comma-separated batch sizes, e.g. 8,16,32,64")
    p.add_argument("--epochs", type=str, dest="epoch_list", help="comma-separated epoch budgets")
    p = sub.add_parser("synth", help="write the synthetic texture dataset")
    p.add_argument("root", type=Path)
    p.add_argument("--per-class", type=int, default=60)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _config_from(args) -> Config:
    cfg = load_config(args.config) if getattr(args, "config", None) else Config()
    return _apply_overrides(cfg, args)


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.command == "synth":
            from .synthetic import write_synthetic

            names = write_synthetic(args.root, args.per_class, args.size, args.seed)
            say(f"wrote {len(names)} classes x {args.per_class} images to {args.root}")
            return EXIT_OK
        if args.command == "predict":
            cfg = load_config(args.config) if args.config else None
            return cmd_predict(args.checkpoint, args.image, cfg)
        cfg = _config_from(args)
        if args.dump_config:
            sys.stdout.write(dump_config(cfg))
            return EXIT_OK
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint, args.split)
        return cmd_sweep(cfg, _parse_list(args.batches), _parse_list(args.epoch_list))
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (D.IngestionError, D.SplitError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckpointError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


def main(argv=None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
