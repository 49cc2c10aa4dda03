"""``gmcml render | train | eval``.

Every command exits 0 on success. Failures print exactly one line to stderr,
``gmcml: error: <kind>: <message>``, and exit 2 for usage problems or 1 for
anything else.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .camera import CameraMode

log = logging.getLogger("gmcml")

MODES = {
    "centered": (CameraMode.CENTERED,),
    "shifted": (CameraMode.SHIFTED,),
    "both": (CameraMode.CENTERED, CameraMode.SHIFTED),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _positive(kind):
    def parse(text):
        try:
            v = kind(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected a {kind.__name__}, got {text!r}")
        if v <= 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text}")
        return v

    return parse


def _non_negative_float(text):
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}")
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be non-negative, got {text}")
    return v


def _epochs(text):
    parts = text.split(",")
    try:
        vals = [int(p) for p in parts]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected N or PRETRAIN,FINETUNE, got {text!r}")
    if len(vals) not in (1, 2) or any(v < 0 for v in vals):
        raise argparse.ArgumentTypeError(f"expected N or PRETRAIN,FINETUNE with non-negative counts, got {text!r}")
    return (vals[0], vals[0]) if len(vals) == 1 else tuple(vals)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gmcml", description="Synthetic render, train and evaluate the conjugate mask/classifier model.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("render", help="render a synthetic (image, mask) dataset")
    r.add_argument("--out", required=True, type=Path)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--res", type=_positive(int), default=32)
    r.add_argument("--classes", type=_positive(int), default=12)
    r.add_argument("--per-class", type=_positive(int), default=200, help="training pairs per class and mode")
    r.add_argument("--test-per-class", type=int, default=0, help="held-out pairs per class and mode (0: none)")
    r.add_argument("--modes", choices=sorted(MODES), default="both")
    r.add_argument("--level", type=int, default=2, help="icosphere subdivision level for camera positions")

    t = sub.add_parser("train", help="two-stage training")
    t.add_argument("--dataset", required=True, type=Path)
    t.add_argument("--out", required=True, type=Path)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--res", type=_positive(int), default=None, help="default: the dataset's resolution")
    t.add_argument("--classes", type=_positive(int), default=None, help="default: classes present in the dataset")
    t.add_argument("--epochs", type=_epochs, default=None, metavar="N|P,F")
    t.add_argument("--lr", type=_non_negative_float, default=None)
    t.add_argument("--batch", type=_positive(int), default=None)
    t.add_argument("--optimizer", choices=("adam", "sgd", "sgd_momentum"), default=None)
    t.add_argument("--alpha", type=_positive(float), default=None)
    t.add_argument("--beta", type=_positive(float), default=None)
    t.add_argument("--m-tri", type=_positive(float), default=None)
    t.add_argument("--w-encgen", type=_non_negative_float, default=None)
    t.add_argument("--fixed-noise", action="store_true", help="constant corruption ratios (baseline)")
    t.add_argument("--max-steps", type=_positive(int), default=None)
    t.add_argument("--checkpoint-every", type=int, default=None)
    t.add_argument("--resume", type=Path, default=None, help="checkpoint to continue from")

    e = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    e.add_argument("--checkpoint", required=True, type=Path)
    e.add_argument("--dataset", required=True, type=Path)
    e.add_argument("--out", required=True, type=Path)
    e.add_argument("--seed", type=int, default=0, help="unused by the deterministic test path; recorded only")
    return p


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_render(args) -> int:
    from .render import generate_dataset, write_dataset, _check_classes

    _check_classes(args.classes)
    modes = MODES[args.modes]
    train = generate_dataset(args.seed, args.classes, args.per_class, args.res, args.level, modes)
    if args.test_per_class > 0:
        write_dataset(train, args.out / "train")
        test = generate_dataset(
            args.seed, args.classes, args.test_per_class, args.res, args.level, modes, offset=args.per_class
        )
        write_dataset(test, args.out / "test")
        print(f"wrote {len(train)} train and {len(test)} test pairs to {args.out}")
    else:
        write_dataset(train, args.out)
        print(f"wrote {len(train)} pairs to {args.out}")
    return 0


def _train_config(args, pairs):
    from .trainer import TrainConfig

    cfg = TrainConfig()
    over = {"seed": args.seed}
    over["resolution"] = args.res if args.res is not None else pairs[0].resolution
    over["num_classes"] = args.classes if args.classes is not None else max(p.category for p in pairs) + 1
    if args.epochs is not None:
        over["epochs_pretrain"], over["epochs_finetune"] = args.epochs
    for flag, key in (
        ("lr", "lr"),
        ("batch", "batch_size"),
        ("optimizer", "optimizer"),
        ("alpha", "alpha"),
        ("beta", "beta"),
        ("m_tri", "m_tri"),
        ("w_encgen", "w_encgen"),
        ("checkpoint_every", "checkpoint_every"),
    ):
        v = getattr(args, flag)
        if v is not None:
            over[key] = v
    if args.fixed_noise:
        over["adaptive_noise"] = False
    return replace(cfg, **over)


def cmd_train(args) -> int:
    from .render import read_dataset
    from .trainer import Trainer, resolve_split, run_training

    pairs = read_dataset(resolve_split(args.dataset, "train"))
    if not pairs:
        raise ValueError(f"no training samples in {args.dataset}")
    if args.resume is not None:
        config = Trainer.load(args.resume).config
    else:
        config = _train_config(args, pairs)
    trainer = run_training(config, args.dataset, args.out, resume=args.resume, max_steps=args.max_steps, pairs=pairs)
    print(f"trained to step {trainer.step}; checkpoint {args.out / 'checkpoint.npz'}")
    return 0


def cmd_eval(args) -> int:
    from . import evaluate as ev
    from . import plots
    from .render import read_dataset
    from .trainer import Trainer, check_compatible, read_metrics, resolve_split

    trainer = Trainer.load(args.checkpoint)
    test_dir = args.dataset / "test"
    if not (test_dir / "meta.jsonl").exists():
        raise FileNotFoundError(f"{args.dataset} has no test split (expected {test_dir}/meta.jsonl)")
    test = read_dataset(test_dir)
    gallery = read_dataset(resolve_split(args.dataset, "train"))
    check_compatible(trainer.config, test)
    check_compatible(trainer.config, gallery)

    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    result = ev.evaluate(trainer, gallery, test)
    report = result.report
    ev.append_report(out / "report.csv", report.row(str(args.checkpoint), str(args.dataset), trainer.step))
    xy = ev.pca_project(result.descriptors, 2)
    ev.write_proj2d(out / "proj2d.csv", xy, result.categories)
    ev.save_image(out / "recon_grid.png", ev.recon_grid(test, result.masks_pred))
    ev.save_image(out / "manifold_grid.png", ev.manifold_grid(trainer, test))
    plots.projection_figure(out / "proj2d.png", xy, result.categories)
    plots.confusion_figure(out / "confusion.png", report.confusion)
    metrics = args.checkpoint.parent / "metrics.csv"
    if metrics.exists():
        rows = read_metrics(metrics)
        if rows:
            for r in rows:
                for k, v in r.items():
                    r[k] = "" if v is None else v
            plots.training_figure(out / "training.png", rows)
    print(f"run {report.run_id}")
    print(report.summary())
    return 0


COMMANDS = {"render": cmd_render, "train": cmd_train, "eval": cmd_eval}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"gmcml: error: usage: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(name)s %(message)s"
    )
    try:
        return COMMANDS[args.command](args)
    except KeyboardInterrupt:
        print("gmcml: error: interrupted", file=sys.stderr)
        return 130
    except Exception as exc:  # noqa: BLE001 - the CLI contract is one line per failure
        msg = " ".join(str(exc).split())
        print(f"gmcml: error: {type(exc).__name__}: {msg}", file=sys.stderr)
        if args.verbose:
            log.exception("command failed")
        return 1


if __name__ == "__main__":
    sys.exit(main())
