"""Command-line entry point.

Exit status: 0 on success, 1 for invalid input (config, manifest, checkpoint,
arguments), 2 for runtime failures (divergence, I/O, undecodable images).
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, load_config
from .data import convert_masks, load_id_map, load_manifest, write_manifest
from .metrics import evaluate
from .model import load_checkpoint
from .train import TrainingDiverged, evaluate_model, predict_images, train_model, write_predictions

logger = logging.getLogger("csranet")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


def _cmd_train(args) -> int:
    config = load_config(args.config)
    manifest = load_manifest(args.data)
    record = train_model(config, manifest, out_dir=args.out)
    best = record.reports[record.best_epoch]
    print(f"best epoch {record.best_epoch}: mAP {best.mAP:.4f} OP {best.OP:.4f} OR {best.OR:.4f} OF1 {best.OF1:.4f}")
    print(f"run record: {Path(args.out) / 'run_record.json'}")
    return EXIT_OK


def _cmd_evaluate(args) -> int:
    manifest = load_manifest(args.data)
    report = evaluate_model(args.checkpoint, manifest, args.threshold, out_dir=args.out, image_size=args.image_size)
    sys.stdout.write(report.to_text())
    return EXIT_OK


def _cmd_predict(args) -> int:
    model, meta = load_checkpoint(args.checkpoint)
    rows = predict_images(model, args.images, args.threshold, args.image_size)
    extra = meta.get("extra", {})
    header = {
        "config_hash": extra.get("config_hash", "unknown"),
        "seed": extra.get("seed", "unknown"),
        "threshold": args.threshold,
    }
    if args.out:
        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            write_predictions(rows, model.class_names, fh, header)
        print(f"wrote {args.out}")
    else:
        write_predictions(rows, model.class_names, sys.stdout, header)
    failed = sum(not r.ok for r in rows)
    if failed:
        logger.error("%d of %d image(s) could not be decoded", failed, len(rows))
        return EXIT_RUNTIME
    return EXIT_OK


def _cmd_convert_masks(args) -> int:
    id_map, vocab, file_min = load_id_map(args.id_map)
    min_pixels = args.min_pixels if args.min_pixels is not None else (file_min or 50)
    manifest = convert_masks(args.masks, id_map, vocab, min_pixels, args.images, args.mask_suffix)
    write_manifest(manifest, args.out)
    print(f"wrote {len(manifest)} samples to {args.out} (min_pixels={min_pixels})")
    return EXIT_OK


def _read_matrix(path) -> tuple[np.ndarray, list[str] | None]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    if not rows:
        raise ValueError(f"{path}: no rows")
    names = None
    try:
        [float(v) for v in rows[0]]
    except ValueError:
        names, rows = [c.strip() for c in rows[0]], rows[1:]
    try:
        data = np.array([[float(v) for v in r] for r in rows])
    except ValueError as e:
        raise ValueError(f"{path}: {e}") from None
    return data, names


def _cmd_metrics(args) -> int:
    scores, names = _read_matrix(args.scores)
    truths, truth_names = _read_matrix(args.truths)
    if scores.shape != truths.shape:
        raise ValueError(f"scores {scores.shape} and truths {truths.shape} differ in shape")
    report = evaluate(scores, truths, threshold=args.threshold, class_names=names or truth_names)
    if args.out:
        report.write(args.out)
    sys.stdout.write(report.to_text())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="csranet", description="Multi-label classification with class-specific residual attention")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a config file and a manifest")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True, help="manifest CSV")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("evaluate", help="compute mAP/OP/OR/OF1 of a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", help="directory for metrics.txt / metrics.csv")
    p.add_argument("--image-size", type=int)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("predict", help="per-image probabilities and label decisions")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", nargs="+", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", help="CSV file (default: stdout)")
    p.add_argument("--image-size", type=int)
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("convert-masks", help="derive a multi-label manifest from segmentation masks")
    p.add_argument("--masks", required=True)
    p.add_argument("--id-map", required=True)
    p.add_argument("--min-pixels", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--images", help="image directory (default: mask directory)")
    p.add_argument("--mask-suffix", default="_lab")
    p.set_defaults(func=_cmd_convert_masks)

    p = sub.add_parser("metrics", help="evaluate score and truth CSV matrices")
    p.add_argument("--scores", required=True)
    p.add_argument("--truths", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out")
    p.set_defaults(func=_cmd_metrics)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except TrainingDiverged as e:
        logger.error("%s", e)
        return EXIT_RUNTIME
    except (ConfigError, ValueError, KeyError) as e:
        logger.error("%s", e)
        return EXIT_INVALID
    except OSError as e:
        logger.error("%s", e)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
