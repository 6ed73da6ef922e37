"""Command-line entry point: ``pathattr <subcommand> ...``.

Flags override values from ``--config`` files. Failures exit with status 1
and a ``error [stage]: ...`` line on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .attribution import METHODS, AttributionConfig, attribute
from .embedding import cluster_spread, extract_embeddings, pca_project, unit_rms, write_projection_csv
from .io import (
    ensure_dir,
    load_saliency,
    read_image,
    render_heatmap,
    render_overlay,
    save_rank_map,
    save_saliency,
)
from .model import CnnOracle, forward, load_checkpoint, save_checkpoint
from .pipeline import PipelineConfig, PipelineError, load_data, run_pipeline
from .regions import DEFAULT_SCALES, top_fraction_mask, xrai
from .synth import SynthSpec, generate_synthetic
from .trainer import evaluate, split_indices, train


class StageError(Exception):
    def __init__(self, stage: str, message: str):
        super().__init__(message)
        self.stage = stage


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, f"{type(exc).__name__}: {exc}") from exc


def _load_json(path):
    return json.loads(Path(path).read_text()) if path else {}


def _pipeline_config(args) -> PipelineConfig:
    raw = _load_json(args.config)
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.out_dir is not None:
        raw["output_dir"] = args.out_dir
    if args.method:
        raw["methods"] = [] if args.method == ["none"] else args.method
    if args.steps is not None:
        raw.setdefault("attribution", {})["steps"] = args.steps
    if args.fraction is not None:
        raw["fraction"] = args.fraction
    if getattr(args, "manifest", None):
        raw["manifest"] = args.manifest
    if getattr(args, "epochs", None) is not None:
        raw.setdefault("training", {})["epochs"] = args.epochs
    return PipelineConfig.from_dict(raw)


def _load_image(path, params):
    img = read_image(path)
    want = params.spec.input_shape[-2:]
    if img.shape != tuple(want):
        raise ValueError(f"{path}: image {img.shape} does not match model input {want}")
    return img


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    spec = SynthSpec(size=args.size, samples_per_class=args.samples_per_class, noise=args.noise,
                     seed=args.seed if args.seed is not None else 0)
    manifest = _stage("synth", generate_synthetic, spec, args.out_dir or "synthetic")
    print(f"wrote {len(manifest.entries)} images to {manifest.root}")
    return 0


def cmd_train(args) -> int:
    config = _stage("config", _pipeline_config, args)
    tcfg = _stage("config", config.training_config)
    dataset = _stage("data", load_data, config, tcfg.input_shape)

    def report(epoch, loss, acc):
        logging.info("epoch %d loss %.4f accuracy %.4f", epoch, loss, acc)

    params, metrics = _stage("train", train, dataset, tcfg, None, report)
    out = ensure_dir(config.output_dir)
    _stage("evaluate", save_checkpoint, params, out / "model.ckpt")
    _stage("evaluate", metrics.to_json, out / "metrics.json")
    _stage("evaluate", metrics.to_csv, out / "metrics.csv")
    print(f"accuracy {metrics.accuracy:.4f} macro-F1 {metrics.macro_f1:.4f}; checkpoint in {out}")
    return 0


def cmd_evaluate(args) -> int:
    config = _stage("config", _pipeline_config, args)
    params = _stage("load", load_checkpoint, args.checkpoint)
    tcfg = _stage("config", config.training_config)
    dataset = _stage("data", load_data, config, params.spec.input_shape)
    _, test_idx = _stage("evaluate", split_indices, dataset.labels, tcfg.train_fraction, tcfg.seed)
    metrics = _stage("evaluate", evaluate, params, dataset.subset(test_idx))
    print(json.dumps(metrics.to_dict(), sort_keys=True))
    return 0


def cmd_attribute(args) -> int:
    params = _stage("load", load_checkpoint, args.checkpoint)
    image = _stage("data", _load_image, args.image, params)
    target = args.target if args.target is not None else forward(params, image).predicted_class
    acfg = _stage("config", AttributionConfig, method=args.method or "ig",
                  steps=args.steps or 128, seed=args.seed or 0)
    smap = _stage("attribute", attribute, CnnOracle(params), image, target, acfg)
    out = ensure_dir(args.out_dir or ".")
    stem = Path(args.image).stem + f"_{acfg.method}"
    _stage("attribute", save_saliency, out / f"{stem}.sal", smap)
    _stage("attribute", render_heatmap, smap.values, out / f"{stem}.png")
    gap = "n/a" if smap.completeness_gap is None else f"{smap.completeness_gap:.3g}"
    print(f"{stem}.sal class {target} completeness gap {gap}")
    return 0


def cmd_xrai(args) -> int:
    image = _stage("data", read_image, args.image)
    if args.saliency:
        base = _stage("load", load_saliency, args.saliency)
    else:
        if not args.checkpoint:
            raise StageError("config", "xrai needs --saliency or --checkpoint")
        params = _stage("load", load_checkpoint, args.checkpoint)
        image = _stage("data", _load_image, args.image, params)
        target = forward(params, image).predicted_class
        acfg = _stage("config", AttributionConfig, method=args.method or "ig", steps=args.steps or 128)
        base = _stage("attribute", attribute, CnnOracle(params), image, target, acfg)
    rank_map, regions = _stage("xrai", xrai, base.values.reshape(image.shape), image, DEFAULT_SCALES)
    fraction = args.fraction if args.fraction is not None else 0.1
    mask = _stage("xrai", top_fraction_mask, rank_map, fraction)
    out = ensure_dir(args.out_dir or ".")
    stem = Path(args.image).stem + "_xrai"
    _stage("xrai", save_rank_map, out / f"{stem}.rank", rank_map)
    _stage("xrai", render_overlay, image, mask, out / f"{stem}.png")
    print(f"{len(regions)} regions, {len(rank_map.order)} ranked; top {fraction:g} mask has {int(mask.sum())} px")
    return 0


def cmd_project(args) -> int:
    config = _stage("config", _pipeline_config, args)
    params = _stage("load", load_checkpoint, args.checkpoint)
    dataset = _stage("data", load_data, config, params.spec.input_shape)
    emb = _stage("project", extract_embeddings, params, dataset)
    result = _stage("project", pca_project, emb, 2)
    coords = unit_rms(result.coordinates)
    out = ensure_dir(config.output_dir)
    _stage("project", write_projection_csv, out / "projection.csv", coords, emb.labels, dataset.class_names)
    _, mean = cluster_spread(coords, emb.labels)
    print(f"projected {len(coords)} rows; mean intra-class spread {mean:.4f}")
    return 0


def cmd_pipeline(args) -> int:
    config = _stage("config", _pipeline_config, args)
    try:
        summary = run_pipeline(config)
    except PipelineError as exc:
        raise StageError(exc.stage, str(exc.__cause__)) from exc
    print(json.dumps({k: v for k, v in summary.items() if not isinstance(v, list)}, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pathattr", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, *, data=True):
        p.add_argument("--seed", type=int, default=None, help="run seed (default: 0 or the config's)")
        p.add_argument("--out-dir", default=None, help="output directory")
        p.add_argument("--config", default=None, help="JSON pipeline config; flags override it")
        if data:
            p.add_argument("--manifest", default=None, help="dataset manifest (default: synthetic set)")

    def attribution_flags(p):
        p.add_argument("--method", action="append", default=None,
                       help=f"one of {', '.join(METHODS)} (default ig; repeatable for pipeline)")
        p.add_argument("--steps", type=int, default=None, help="path steps m (default 128)")
        p.add_argument("--fraction", type=float, default=None, help="XRAI top fraction (default 0.1)")

    p = sub.add_parser("synth", help="write the synthetic dataset with masks")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out-dir", default=None, help="default: ./synthetic")
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--samples-per-class", type=int, default=500)
    p.add_argument("--noise", type=float, default=0.08)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the reference CNN and write model.ckpt + metrics")
    common(p)
    p.add_argument("--epochs", type=int, default=None)
    p.set_defaults(func=cmd_train, method=None, steps=None, fraction=None)

    p = sub.add_parser("evaluate", help="metrics of a checkpoint on the held-out split")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_evaluate, method=None, steps=None, fraction=None)

    p = sub.add_parser("attribute", help="saliency map for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--target", type=int, default=None, help="class index (default: predicted)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out-dir", default=None)
    p.add_argument("--method", choices=METHODS, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.set_defaults(func=cmd_attribute)

    p = sub.add_parser("xrai", help="XRAI rank map and top-fraction overlay for one image")
    p.add_argument("--image", required=True)
    p.add_argument("--saliency", default=None, help="existing .sal file to use as the base map")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--out-dir", default=None)
    p.add_argument("--method", choices=METHODS, default=None, help="base method when computing (default ig)")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--fraction", type=float, default=None)
    p.set_defaults(func=cmd_xrai)

    p = sub.add_parser("project", help="PCA projection of penultimate-layer embeddings")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_project, method=None, steps=None, fraction=None)

    p = sub.add_parser("pipeline", help="train, evaluate, attribute, rank and project in one run")
    common(p)
    attribution_flags(p)
    p.add_argument("--epochs", type=int, default=None)
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except StageError as exc:
        print(f"error [{exc.stage}]: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
