"""Command line: ``unshadow {train,eval,infer,augment-preview}``.

Exit codes: 0 success, 2 usage or configuration error, 3 non-finite loss.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, PipelineConfig, dump_config, load_config
from .imaging import ContractError, ShapeError

log = logging.getLogger("unshadow")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
LAYOUTS = ("istd", "istd+", "srd")


class UsageError(Exception):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


def _common(p: argparse.ArgumentParser, config_required: bool = False):
    p.add_argument("--config", type=Path, required=config_required, help="YAML pipeline config")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config entry (repeatable)")
    p.add_argument("--seed", type=int, help="shorthand for --set train.seed=N")
    p.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--device", default="cpu")
    p.add_argument("--dataset-layout", choices=LAYOUTS)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="unshadow", description="Mask-guided shadow removal.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model")
    _common(p, config_required=True)
    p.add_argument("--mode", choices=("weak", "supervised"))
    p.add_argument("--resume", type=Path, help="checkpoint to continue from")
    p.add_argument("--max-steps", type=int, help="stop after this many optimisation steps")

    p = sub.add_parser("eval", help="score a checkpoint on a split")
    _common(p)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--dataset-root", type=Path)
    p.add_argument("--split", help="split name (default: dataset.test_split)")
    p.add_argument("--report", type=Path, required=True, help="output prefix for .json/.csv/.txt")
    p.add_argument("--self-test", action="store_true", help="score ground truth against itself")
    p.add_argument("--bypass-refine", action="store_true")

    p = sub.add_parser("infer", help="remove the shadow from one image")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--mask", type=Path, required=True)
    p.add_argument("--output", type=Path, required=True)
    p.add_argument("--all-stages", action="store_true", help="also write the region, removed region and embedding")
    p.add_argument("--bypass-refine", action="store_true")

    p = sub.add_parser("augment-preview", help="render original / inpainted / illumination variants")
    _common(p, config_required=True)
    p.add_argument("--samples", type=int, default=3)
    p.add_argument("--output", type=Path, required=True)
    p.add_argument("--cell", type=int, default=128, help="cell size in pixels")
    return parser


def _config(args, check_paths: bool) -> PipelineConfig:
    overrides = list(args.overrides)
    if getattr(args, "mode", None):
        overrides.append(f"train.mode={args.mode}")
    if args.seed is not None:
        overrides.append(f"train.seed={args.seed}")
    if args.deterministic is not None:
        overrides.append(f"train.deterministic={str(args.deterministic).lower()}")
    if args.dataset_layout:
        overrides.append(f"dataset.layout={args.dataset_layout}")
    if getattr(args, "dataset_root", None):
        overrides.append(f"dataset.root={args.dataset_root}")
    if args.device != "cpu":
        raise UsageError("device", f"only 'cpu' is supported, got {args.device!r}")
    cfg = load_config(args.config, overrides, check_paths=check_paths)
    for item in overrides:
        log.info("override %s", item)
    return cfg


def _extractor(cfg: PipelineConfig):
    from .networks import VGGPerceptual

    try:
        return VGGPerceptual(cfg.paths.perceptual_weights or None, allow_untrained=cfg.paths.allow_untrained_perceptual)
    except FileNotFoundError as exc:
        raise UsageError("paths.perceptual_weights", str(exc)) from exc


def _split(cfg: PipelineConfig, name: str, require_gt: bool):
    from .datasets import LayoutError, load_split

    try:
        return load_split(cfg.dataset.root, cfg.dataset.layout, name, require_gt=require_gt)
    except (LayoutError, ContractError) as exc:
        raise UsageError("dataset.root", str(exc)) from exc


def cmd_train(args) -> int:
    from .training import fit

    cfg = _config(args, check_paths=True)
    split = _split(cfg, cfg.dataset.split, require_gt=cfg.train.mode == "supervised")
    if len(split) == 0:
        raise UsageError("dataset.root", f"no training triplets under {cfg.dataset.root}")
    out = Path(cfg.paths.checkpoint_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.yaml")
    log.info("training %s mode on %d samples for %d epochs (seed %d)", cfg.train.mode, len(split),
             cfg.train.epochs, cfg.train.seed)
    last = fit(cfg.train, split, out, cfg.network, cfg.augment, _extractor(cfg), resume=args.resume,
               max_steps=args.max_steps)
    print(last)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluation import evaluate
    from .training import load_checkpoint

    cfg = _config(args, check_paths=True)
    if args.checkpoint is None and not args.self_test:
        raise UsageError("checkpoint", "give --checkpoint or --self-test")
    split = _split(cfg, args.split or cfg.dataset.test_split, require_gt=False)
    predict = None
    if not args.self_test:
        from .evaluation import checkpoint_predictor

        predict = checkpoint_predictor(load_checkpoint(args.checkpoint), refine=not args.bypass_refine)
    report = evaluate(predict, split, size=cfg.eval.resize, aggregation=cfg.eval.aggregation,
                      literal=cfg.eval.literal_rmse)
    prefix = args.report
    prefix.parent.mkdir(parents=True, exist_ok=True)
    report.to_json(prefix.with_suffix(".json"))
    report.to_csv(prefix.with_suffix(".csv"))
    table = report.table()
    prefix.with_suffix(".txt").write_text(table + "\n")
    print(table)
    return EXIT_OK


def cmd_infer(args) -> int:
    import torch

    from .imaging import read_image, read_mask, write_image
    from .training import _mask_tensor, _to_numpy, _to_tensor, load_checkpoint, networks_from_checkpoint, remove_shadow

    if args.config is not None or args.overrides:
        _config(args, check_paths=False)
    elif args.device != "cpu":
        raise UsageError("device", f"only 'cpu' is supported, got {args.device!r}")
    image, mask = read_image(args.image), read_mask(args.mask)
    if image.shape[:2] != mask.shape:
        raise UsageError("mask", f"mask {mask.shape} does not match image {image.shape[:2]}")
    deshadower, refiner = networks_from_checkpoint(load_checkpoint(args.checkpoint))
    stages: dict = {}
    with torch.no_grad():
        out = remove_shadow(deshadower, refiner, _to_tensor(image)[None], _mask_tensor(mask)[None],
                            refine=not args.bypass_refine, stages=stages)
    write_image(args.output, _to_numpy(out[0]))
    written = [args.output]
    if args.all_stages:
        stem, suffix = args.output.with_suffix(""), args.output.suffix or ".png"
        for key, name in (("region", "shadow_region"), ("removed", "removed_region"), ("embedded", "embedded")):
            path = Path(f"{stem}_{name}{suffix}")
            write_image(path, _to_numpy(stages[key][0]))
            written.append(path)
    for p in written:
        print(p)
    return EXIT_OK


def preview_grid(split, cfg: PipelineConfig, samples: int, seed: int, cell: int = 128) -> np.ndarray:
    """One row per sample: original, inpainted (when enabled), three illumination variants."""
    from .augmentation import MaskBank, illumination_variants, inpaint_shadow
    from .imaging import Region, resize

    rng = np.random.default_rng(seed)
    inpaint = cfg.train.inpaint and cfg.augment.inpaint_enabled
    bank = MaskBank.from_split(split) if inpaint else None
    rows = []
    for i in range(min(samples, len(split))):
        t = split[i]
        cells = [t.shadow]
        if inpaint:
            cells.append(inpaint_shadow(t, bank, rng, cfg.augment).shadow)
        region = Region(t.shadow * t.mask[..., None], t.mask)
        cells += [v.data for v in illumination_variants(region, cfg.augment.mu)]
        rows.append(np.concatenate([resize(c, cell, cell) for c in cells], axis=1))
    return np.concatenate(rows, axis=0)


def cmd_augment_preview(args) -> int:
    from .imaging import write_image

    cfg = _config(args, check_paths=True)
    if args.samples < 1:
        raise UsageError("samples", "must be at least 1")
    split = _split(cfg, cfg.dataset.split, require_gt=False)
    if len(split) == 0:
        raise UsageError("dataset.root", f"no triplets under {cfg.dataset.root}")
    grid = preview_grid(split, cfg, args.samples, cfg.train.seed, args.cell)
    write_image(args.output, grid)
    print(args.output)
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "infer": cmd_infer, "augment-preview": cmd_augment_preview}


def main(argv=None) -> int:
    from .training import NumericalError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ShapeError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
