#!/usr/bin/env python3
"""
Command-line surface: unify, synth, train, eval, gradcheck and visualize.

Every subcommand takes --config, --seed, --out, --deterministic and
--verbose. Exit status is 0 on success, 1 on a reported error and 2 on a
usage error.
"""

import argparse
import json
import logging
import os
import sys
from typing import Dict, List, Optional

import torch

from src.dataset.io import load_dataset, load_image, relocate_images, save_dataset
from src.dataset.schema import DatasetError
from src.evaluation.runner import evaluate_checkpoint, evaluate_predictions_file, load_predictions
from src.synthdata.generator import SynthesisError, SynthSpec, generate_dataset, write_corpus
from src.training.gradcheck import GRADCHECK_COMPONENTS, DegenerateSampleError, gradcheck
from src.training.trainer import NonFiniteLossError, train_model
from src.unify.hierarchy import HierarchyThreshold
from src.unify.pipeline import (
    attach_from_sources,
    merge_image_parts,
    read_label_map,
    unify_class_agnostic,
    unify_label_maps,
)
from src.utils.config import load_config
from src.utils.log import setup_logging
from src.utils.visualize import render_overlays

logger = logging.getLogger(__name__)

UNIFY_MODES = ("merge", "attach", "agnostic", "labelmaps")
REPORTED_ERRORS = (
    DatasetError,
    SynthesisError,
    NonFiniteLossError,
    DegenerateSampleError,
    ValueError,
    OSError,
)


class CommandFailed(Exception):
    """A subcommand ran but its result fails the requested check."""


def _common_flags() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file merged over the defaults")
    common.add_argument("--seed", type=int, help="seed override")
    common.add_argument("--out", help="output directory")
    common.add_argument("--deterministic", action="store_true", help="single-threaded, bit-reproducible run")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_flags()
    parser = argparse.ArgumentParser(prog="partparse", description="Hierarchical object/part parsing toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    unify = sub.add_parser("unify", parents=[common], help="convert part annotations into the unified hierarchy")
    unify.add_argument("--mode", choices=UNIFY_MODES, default="merge")
    unify.add_argument("--input", required=True, help="dataset file to unify")
    unify.add_argument("--objects", help="object-level dataset file (attach mode)")
    unify.add_argument("--label-maps", help="directory of single-channel label PNGs (labelmaps mode)")
    unify.add_argument("--threshold", type=float, default=0.5, help="overlap threshold (agnostic mode)")
    unify.add_argument("--workers", type=int, default=1)

    synth = sub.add_parser("synth", parents=[common], help="generate the synthetic corpus")
    synth.add_argument("--workers", type=int, default=1)

    train = sub.add_parser("train", parents=[common], help="train a model")
    train.add_argument("--iterations", type=int, help="override the iteration count")

    ev = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint or a predictions file")
    ev.add_argument("--dataset", required=True, help="dataset file with ground truth")
    source = ev.add_mutually_exclusive_group(required=True)
    source.add_argument("--checkpoint", help="model checkpoint")
    source.add_argument("--predictions", help="JSON list of detections")
    ev.add_argument("--no-oracle", action="store_true", help="skip the ground-truth-object part parsing")
    ev.add_argument("--batch-size", type=int, default=4)

    grad = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the loss gradients")
    grad.add_argument("--component", choices=GRADCHECK_COMPONENTS + ("all",), default="all")
    grad.add_argument("--trials", type=int, default=20)
    grad.add_argument("--tolerance", type=float, default=1e-3)

    vis = sub.add_parser("visualize", parents=[common], help="draw annotations or predictions over an image")
    vis.add_argument("--dataset", required=True)
    vis.add_argument("--image-id", type=int, help="image to draw (default: first image)")
    vis.add_argument("--predictions", help="JSON list of detections to draw instead of the annotations")
    vis.add_argument("--score-threshold", type=float, default=0.5)
    return parser


# ---- subcommands ------------------------------------------------------------

def cmd_unify(args) -> Dict:
    dataset = load_dataset(args.input)
    if args.mode == "merge":
        unified = merge_image_parts(dataset, workers=args.workers)
    elif args.mode == "attach":
        if not args.objects:
            raise ValueError("attach mode needs --objects")
        unified = attach_from_sources(dataset, load_dataset(args.objects))
    elif args.mode == "agnostic":
        unified = unify_class_agnostic(dataset, HierarchyThreshold(args.threshold), workers=args.workers)
    else:
        if not args.label_maps:
            raise ValueError("labelmaps mode needs --label-maps")
        maps = []
        for record in dataset.images:
            stem = os.path.splitext(os.path.basename(record.file_name))[0]
            maps.append(read_label_map(os.path.join(args.label_maps, stem + ".png")))
        unified = unify_label_maps(dataset.images, maps, dataset.categories, workers=args.workers)

    out_path = os.path.join(args.out or ".", "unified.json")
    save_dataset(relocate_images(unified, args.input, out_path), out_path)
    images, categories, annotations = unified.counts
    print("\n" + "=" * 60)
    print(f"UNIFIED ({args.mode})")
    print("=" * 60)
    print(f"Images:      {images}")
    print(f"Categories:  {categories}")
    print(f"Annotations: {annotations}")
    print(f"Written to:  {out_path}")
    print("=" * 60)
    return {"path": out_path}


def cmd_synth(args) -> Dict:
    overrides = {"seed": args.seed} if args.seed is not None else None
    spec = load_config(args.config, overrides, config_cls=SynthSpec)
    workers = 1 if args.deterministic else args.workers
    corpus = generate_dataset(spec, workers=workers)
    out_dir = args.out or os.path.join("data", "synth")
    paths = write_corpus(corpus, out_dir)
    print("\n" + "=" * 60)
    print("SYNTHETIC CORPUS")
    print("=" * 60)
    for split, dataset in (("train", corpus.train), ("val", corpus.val)):
        images, _, annotations = dataset.counts
        print(f"{split:<6} {images:>6} images {annotations:>7} annotations  {paths[split]}")
    print("=" * 60)
    return paths


def cmd_train(args) -> Dict:
    overrides: Dict = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
        overrides["model"] = {"seed": args.seed}
    if args.out:
        overrides["out_dir"] = args.out
    if args.iterations is not None:
        overrides["iterations"] = args.iterations
    if args.deterministic:
        overrides["deterministic"] = True
    cfg = load_config(args.config, overrides)
    result = train_model(cfg)
    print("\n" + "=" * 60)
    print("TRAINING COMPLETE")
    print("=" * 60)
    print(f"Iterations:  {cfg.iterations}")
    if result.final is not None:
        print(f"Final loss:  {result.final.total:.4f}")
    print(f"Checkpoint:  {result.checkpoint_path}")
    print(f"Metrics log: {result.metrics_path}")
    print("=" * 60)
    return {"checkpoint": result.checkpoint_path, "metrics": result.metrics_path}


def cmd_eval(args) -> Dict:
    if args.deterministic:
        torch.set_num_threads(1)
    if args.checkpoint:
        report = evaluate_checkpoint(
            args.checkpoint, args.dataset, batch_size=args.batch_size, oracle=not args.no_oracle
        )
        default_out = os.path.dirname(os.path.abspath(args.checkpoint))
    else:
        report = evaluate_predictions_file(args.predictions, args.dataset)
        default_out = os.path.dirname(os.path.abspath(args.predictions))
    json_path, csv_path = report.write(args.out or default_out)
    report.print_summary()
    print(f"Report: {json_path}")
    return {"json": json_path, "csv": csv_path}


def cmd_gradcheck(args) -> Dict:
    weights = load_config(args.config).loss
    components = GRADCHECK_COMPONENTS if args.component == "all" else (args.component,)
    seed = args.seed if args.seed is not None else 0
    reports = {c: gradcheck(c, trials=args.trials, seed=seed, weights=weights) for c in components}
    for report in reports.values():
        report.print_summary()
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "gradcheck.json"), "w") as f:
            json.dump({c: r.to_dict() for c, r in reports.items()}, f, indent=2)
    failed = [c for c, r in reports.items() if r.max_relative_error >= args.tolerance]
    if failed:
        raise CommandFailed(f"relative gradient error at or above {args.tolerance} for: {', '.join(failed)}")
    return {c: r.max_relative_error for c, r in reports.items()}


def cmd_visualize(args) -> Dict:
    dataset = load_dataset(args.dataset)
    if not dataset.images:
        raise ValueError(f"{args.dataset} has no images")
    image_id = args.image_id if args.image_id is not None else dataset.images[0].id
    record = dataset.image(image_id)
    if args.predictions:
        instances = [
            d for d in load_predictions(args.predictions)
            if d.image_id == image_id and d.score >= args.score_threshold
        ]
    else:
        instances = dataset.annotations_for_image(image_id)
    out_path = os.path.join(args.out or ".", f"overlay_{image_id:06d}.png")
    render_overlays(
        load_image(args.dataset, record), instances, out_path, {c.id: c for c in dataset.categories}
    )
    print(f"Overlay with {len(instances)} instances written to {out_path}")
    return {"path": out_path}


COMMANDS = {
    "unify": cmd_unify,
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "visualize": cmd_visualize,
}


def run_cli(argv: Optional[List[str]] = None) -> int:
    """Parse argv, run one subcommand and return the exit status."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    setup_logging(args.verbose)
    try:
        COMMANDS[args.command](args)
    except (CommandFailed, KeyError) + REPORTED_ERRORS as e:
        logger.debug("%s failed", args.command, exc_info=True)
        print(f"partparse {args.command}: error: {e}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(run_cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
