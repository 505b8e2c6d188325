"""Command-line entry point: ``facegan <subcommand> ...``.

Exit codes: 0 success, 1 usage error (bad flags, invalid config), 2 data or
numeric failure. Every successful run writes ``run.json`` under ``--out``.
"""
from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from . import __version__
from .dataio import DatasetManifest, load_dataset, scan_manifest
from .errors import ConfigError, FaceGanError
from .evaluation import (
    ExperimentSpec,
    compare_augmentation,
    evaluate_pairs,
    load_pairs,
    make_pairs,
    min_images,
    write_pairs_file,
    write_verification,
)
from .plotting import plot_csv
from .synthetic import synthetic_faces, write_dataset
from .training import CheckpointBundle, TrainConfig, augment, train

log = logging.getLogger("facegan")

EXIT_OK, EXIT_USAGE, EXIT_FAILURE = 0, 1, 2


class UsageError(Exception):
    """Raised for invalid arguments detected after parsing."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="facegan", description="Saliency-gated adversarial augmentation for face recognition.")
    p.add_argument("--verbose", "-v", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("prepare", help="crop/resize a dataset (or generate a synthetic one) into --out")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", type=Path, help="raw <root>/<identity>/<image> tree or sidecar manifest")
    src.add_argument("--synthetic", nargs=2, type=_positive_int, metavar=("IDENTITIES", "IMAGES"),
                     help="generate a procedural face fixture instead of reading --data")
    s.add_argument("--size", type=_positive_int, default=128, help="canonical square size")
    s.add_argument("--channels", type=int, choices=(1, 3), default=1, help="synthetic fixture channels")
    s.add_argument("--holdout", type=int, default=0,
                   help="images per identity moved to <out>/eval with a pairs.tsv (train goes to <out>/train)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", type=Path, required=True)

    s = sub.add_parser("train", help="run the adversarial training game")
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--config", type=Path)
    s.add_argument("--seed", type=int, help="overrides the config seed")
    s.add_argument("--epochs", type=_positive_int, help="overrides the config epochs")
    s.add_argument("--size", type=_positive_int, help="canonical size (default: inferred from the data)")
    s.add_argument("--checkpoint", type=Path, help="resume from this checkpoint")
    s.add_argument("--out", type=Path, required=True)

    s = sub.add_parser("augment", help="emit k generated variants per input image")
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--checkpoint", type=Path, required=True)
    s.add_argument("--k", type=_positive_int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--noise-scale", type=float, help="defaults to the checkpoint config")
    s.add_argument("--save-saliency", action="store_true")
    s.add_argument("--overwrite", action="store_true")
    s.add_argument("--out", type=Path, required=True)

    s = sub.add_parser("evaluate", help="threshold-sweep verification accuracy on a pairs file")
    s.add_argument("--pairs", type=Path, required=True)
    s.add_argument("--checkpoint", type=Path, required=True)
    s.add_argument("--data", type=Path, help="root for relative pair paths (default: pairs file directory)")
    s.add_argument("--out", type=Path, required=True)

    s = sub.add_parser("min-images", help="smallest gallery size reaching a rank-1 target")
    s.add_argument("--data", type=Path, required=True)
    s.add_argument("--checkpoint", type=Path, required=True)
    s.add_argument("--target-accuracy", type=float, default=0.95)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", type=Path, required=True)

    s = sub.add_parser("compare", help="A/B comparison: embedder alone vs with k-fold augmentation")
    s.add_argument("--data", type=Path, required=True, help="low-shot training split")
    s.add_argument("--pairs", type=Path, required=True, help="held-out verification pairs")
    s.add_argument("--config", type=Path)
    s.add_argument("--k", type=int, default=50)
    s.add_argument("--seeds", type=_seeds, default=[0, 1, 2, 3, 4])
    s.add_argument("--size", type=_positive_int)
    s.add_argument("--out", type=Path, required=True)

    s = sub.add_parser("plot", help="loss or accuracy curves from a RunLog or report CSV")
    s.add_argument("csv", type=Path)
    s.add_argument("--out", type=Path, required=True)
    return p


def _load_config(args) -> TrainConfig:
    try:
        cfg = TrainConfig.from_file(args.config) if getattr(args, "config", None) else TrainConfig()
        changes = {}
        if getattr(args, "seed", None) is not None:
            changes["seed"] = args.seed
        if getattr(args, "epochs", None) is not None:
            changes["epochs"] = args.epochs
        return cfg.replace(**changes) if changes else cfg
    except (ConfigError, TypeError, OSError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc


def _infer_size(root: Path) -> int:
    manifest = scan_manifest(root)
    with Image.open(manifest.absolute(manifest.entries[0])) as im:
        return min(im.size)


def _manifest(root: Path, size: int | None) -> DatasetManifest:
    return scan_manifest(root, size or _infer_size(root))


def cmd_prepare(args) -> dict:
    if args.synthetic:
        images = synthetic_faces(*args.synthetic, size=args.size, channels=args.channels, seed=args.seed)
    else:
        manifest = scan_manifest(args.data, args.size)
        images = load_dataset(manifest, whitened=False)
    if args.holdout < 0:
        raise UsageError("--holdout must be >= 0")
    if args.holdout == 0:
        write_dataset(images, args.out, sidecar=True)
        return {"n_images": len(images), "data": str(args.out)}

    by_id: dict[str, list] = {}
    for im in images:
        by_id.setdefault(im.identity, []).append(im)
    short = [i for i, ims in by_id.items() if len(ims) <= args.holdout]
    if short:
        raise ConfigError(f"--holdout {args.holdout} leaves no training images for {short[:3]}")
    train_set = [im for ims in by_id.values() for im in ims[:-args.holdout]]
    eval_set = [im for ims in by_id.values() for im in ims[-args.holdout:]]
    write_dataset(train_set, args.out / "train", sidecar=True)
    write_dataset(eval_set, args.out / "eval", sidecar=True)
    pairs = make_pairs(eval_set, seed=args.seed)
    write_pairs_file([(a.source_path, b.source_path, s) for a, b, s in pairs], args.out / "eval" / "pairs.tsv")
    return {"n_train": len(train_set), "n_eval": len(eval_set), "n_pairs": len(pairs)}


def cmd_train(args) -> dict:
    cfg = _load_config(args)
    manifest = _manifest(args.data, args.size)
    resume = CheckpointBundle.load(args.checkpoint) if args.checkpoint else None
    args.out.mkdir(parents=True, exist_ok=True)
    cfg.to_file(args.out / "config.json")
    bundle, runlog = train(manifest, cfg, out_dir=args.out, resume=resume)
    return {"config_hash": cfg.hash, "seed": cfg.seed, "steps": bundle.step,
            "checkpoint": str(args.out / "checkpoint.pt"), "runlog": str(args.out / "runlog.csv")}


def cmd_augment(args) -> dict:
    bundle = CheckpointBundle.load(args.checkpoint)
    manifest = scan_manifest(args.data, bundle.image_size)
    if args.noise_scale is not None and args.noise_scale < 0:
        raise UsageError("--noise-scale must be >= 0")
    res = augment(manifest, bundle, args.k, args.seed, args.out, overwrite=args.overwrite,
                  noise_scale=args.noise_scale, save_saliency=args.save_saliency)
    return {"config_hash": bundle.config.hash, "seed": args.seed, "k": args.k,
            "n_inputs": len(manifest), "n_outputs": len(res.images)}


def cmd_evaluate(args) -> dict:
    bundle = CheckpointBundle.load(args.checkpoint)
    pairs = load_pairs(args.pairs, args.data, bundle.image_size)
    report = evaluate_pairs(pairs, bundle.embedder)
    rows, summary = write_verification(report, args.out)
    return {"config_hash": bundle.config.hash, "seed": bundle.config.seed, "n_pairs": report.n_pairs,
            "best_threshold": report.best_threshold, "best_accuracy": report.best_accuracy,
            "report": str(rows), "summary": str(summary)}


def cmd_min_images(args) -> dict:
    if not 0 < args.target_accuracy <= 1:
        raise UsageError("--target-accuracy must lie in (0, 1]")
    bundle = CheckpointBundle.load(args.checkpoint)
    manifest = scan_manifest(args.data, bundle.image_size)
    report = min_images(manifest, bundle.embedder, args.target_accuracy, args.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    report.to_csv(args.out / "min_images.csv")
    return {"config_hash": bundle.config.hash, "seed": args.seed, "target_accuracy": args.target_accuracy,
            "aggregate": "unreached" if report.aggregate is None else report.aggregate}


def cmd_compare(args) -> dict:
    cfg = _load_config(args)
    if len(args.seeds) < 2:
        raise UsageError("--seeds needs at least two seeds")
    if args.k < 0:
        raise UsageError("--k must be >= 0")
    manifest = _manifest(args.data, args.size)
    pairs = load_pairs(args.pairs, None, manifest.canonical_size)
    report = compare_augmentation(ExperimentSpec(manifest, pairs, cfg, args.k, args.seeds, args.out))
    return {"config_hash": cfg.hash, "seeds": list(args.seeds), "k": args.k,
            "mean_difference": report.mean_difference, "b_wins_or_ties": report.b_wins_or_ties,
            "report": str(args.out / "comparison.csv")}


def cmd_plot(args) -> dict:
    res = plot_csv(args.csv, args.out)
    return {"kind": res.kind, "image": str(res.image), "table": str(res.table)}


COMMANDS = {
    "prepare": cmd_prepare,
    "train": cmd_train,
    "augment": cmd_augment,
    "evaluate": cmd_evaluate,
    "min-images": cmd_min_images,
    "compare": cmd_compare,
    "plot": cmd_plot,
}


def write_run_record(out: Path, argv: Sequence[str], command: str, info: dict, started: float) -> Path:
    record = {
        "command": command,
        "argv": list(argv),
        "config_hash": info.pop("config_hash", None),
        "seed": info.pop("seed", None),
        "code_version": __version__,
        "python": platform.python_version(),
        "started": started,
        "elapsed_s": round(time.time() - started, 3),
        "outputs": info,
    }
    out.mkdir(parents=True, exist_ok=True)
    path = out / "run.json"
    path.write_text(json.dumps(record, indent=2, default=_jsonable) + "\n")
    return path


def _jsonable(v):
    if isinstance(v, (np.integer, np.floating)):
        return v.item()
    return str(v)


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    started = time.time()
    try:
        info = COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"facegan {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FaceGanError, OSError, ValueError) as exc:
        print(f"facegan {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    write_run_record(args.out, argv, args.command, info, started)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
