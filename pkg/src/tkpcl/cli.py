"""Command-line entry point: ``tkpcl <command> [--config FILE] [--set key=value ...]``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 missing artifact (dataset, checkpoint or mask directory).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any

import numpy as np

from . import checkpoint as ckpt_io
from . import netpbm
from .config import ConfigError, RunConfig, load_config
from .datagen import DatasetError, export_dataset, generate, import_dataset
from .numerics import NonFiniteGradientError, NonFiniteOutputError
from .pipeline import (
    TrainingDiverged,
    background_baseline,
    config_echo,
    evaluate_miou,
    generate_pseudo_masks,
    run_ablation,
    run_sweep,
    train,
    write_masks,
)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_MISSING = 0, 2, 3, 4

log = logging.getLogger("tkpcl")


class MissingArtifact(Exception):
    pass


def write_json(path: Path, doc: Any) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)
    return path


def write_config(directory: Path, config: RunConfig) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    tmp = directory / "config.txt.tmp"
    tmp.write_text(config.dumps())
    os.replace(tmp, directory / "config.txt")


def data_dir(args, config: RunConfig) -> Path:
    return Path(args.data) if args.data else Path(config.output_dir) / "dataset"


def run_dir(args, config: RunConfig) -> Path:
    return Path(args.out) if getattr(args, "out", None) else Path(config.output_dir) / config.run_id


def load_data(path: Path):
    try:
        return import_dataset(path)
    except FileNotFoundError as exc:
        raise MissingArtifact(str(exc)) from None


def split_samples(data, split: str):
    return data[0] if split == "train" else data[1]


def parse_seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"seeds must be comma-separated integers, got {text!r}") from None


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_datagen(args, config: RunConfig) -> int:
    out = data_dir(args, config)
    train_s, val_s = generate(config.dataset)
    export_dataset(out, train_s, val_s, config.dataset)
    write_config(out, config)
    print(f"wrote {len(train_s)} train and {len(val_s)} val samples to {out}")
    return EXIT_OK


def cmd_train(args, config: RunConfig) -> int:
    if args.resume and not Path(args.resume).exists():
        raise MissingArtifact(f"checkpoint {args.resume} does not exist")
    train_s, _ = load_data(data_dir(args, config))
    out = run_dir(args, config)
    res = train(config, train_s, out_dir=out, resume_from=args.resume)
    last = res.records[-1] if res.records else {}
    print(f"trained {res.epochs_completed} epochs; last mce={last.get('mce', float('nan')):.4f}; "
          f"checkpoint {res.checkpoint_path}")
    return EXIT_OK


def _checkpoint(args) -> Path:
    path = Path(args.checkpoint)
    if not path.exists():
        raise MissingArtifact(f"checkpoint {path} does not exist")
    return path


def _read_masks(directory: Path, samples) -> list[np.ndarray]:
    if not directory.is_dir():
        raise MissingArtifact(f"mask directory {directory} does not exist")
    masks = []
    for s in samples:
        path = directory / f"{s.sample_id}.pgm"
        if not path.exists():
            raise MissingArtifact(f"missing mask {path}")
        masks.append(netpbm.read(path).astype(np.int64))
    return masks


def cmd_eval(args, config: RunConfig) -> int:
    samples = split_samples(load_data(data_dir(args, config)), args.split)
    n_cls = config.n_total_classes
    if args.masks:
        masks = _read_masks(Path(args.masks), samples)
    else:
        masks = generate_pseudo_masks(_checkpoint(args), samples, restrict_to_image_labels=args.split == "train")
    report = evaluate_miou(masks, samples, n_cls, config)
    doc = report.to_json()
    doc.update(split=args.split, background_baseline=background_baseline(samples, n_cls).miou,
               source=str(args.masks or args.checkpoint))
    out = Path(args.report) if args.report else run_dir(args, config) / f"eval-{args.split}.json"
    write_json(out, doc)
    print(f"mIoU {report.miou:.4f} over {report.n_samples} samples -> {out}")
    return EXIT_OK


def cmd_infer(args, config: RunConfig) -> int:
    ckpt = _checkpoint(args)
    samples = split_samples(load_data(data_dir(args, config)), args.split)
    restrict = args.split == "train" if args.restrict is None else args.restrict == "yes"
    masks = generate_pseudo_masks(ckpt, samples, restrict_to_image_labels=restrict)
    out = Path(args.masks_out) if args.masks_out else run_dir(args, config) / f"masks-{args.split}"
    write_masks(out, masks)
    write_config(out, config)
    print(f"wrote {len(masks)} masks to {out}")
    return EXIT_OK


def cmd_gradcheck(args, config: RunConfig) -> int:
    from .gradsuite import run_suite

    seeds = parse_seeds(args.seeds)
    results = run_suite(seeds=seeds, h=args.h, tol=args.tol)
    rows = []
    for r in results:
        rows.append({"check": r.name, "seed": r.seed, "max_rel_err": float(r.report.max_rel_err),
                     "passed": bool(r.report.passed), "worst_param": r.report.worst_param})
        print(f"{'ok  ' if r.report.passed else 'FAIL'} {r.name:24s} seed {r.seed}  "
              f"max rel err {r.report.max_rel_err:.2e}  ({r.report.worst_param})")
    passed = all(bool(r.report.passed) for r in results)
    write_json(run_dir(args, config) / "gradcheck.json",
               {"passed": passed, "h": args.h, "tol": args.tol, "checks": rows, "config": config_echo(config)})
    return EXIT_OK if passed else EXIT_NUMERIC


def cmd_ablate(args, config: RunConfig) -> int:
    train_s, val_s = load_data(data_dir(args, config))
    out = run_dir(args, config)
    seeds = parse_seeds(args.seeds) if args.seeds else [config.train.seed]
    rows = run_ablation(config, train_s, val_s or None, seeds=seeds, out_dir=out / "ablation-runs")
    write_json(out / "ablation.json", {"rows": rows, "seeds": seeds, "config": config_echo(config)})
    for r in rows:
        label = r["pooling_mode"] + (" + PCE" if r["pce"] else "")
        print(f"{label:12s} mask mIoU {r['mask_miou']:.4f}")
    return EXIT_OK


def cmd_sweep(args, config: RunConfig) -> int:
    try:
        values = [float(v) for v in args.values.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"sweep values must be numbers, got {args.values!r}") from None
    train_s, _ = load_data(data_dir(args, config))
    out = run_dir(args, config)
    points = run_sweep(args.param, values, config, train_s, out_dir=out / f"sweep-{args.param}-runs")
    write_json(out / f"sweep-{args.param}.json", {"param": args.param, "points": points,
                                                   "config": config_echo(config)})
    for p in points:
        print(f"{args.param}={p[args.param]}  mask mIoU {p['mask_miou']:.4f}")
    return EXIT_OK


COMMANDS = {
    "datagen": cmd_datagen,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (repeatable; last write wins)")
    common.add_argument("--data", help="dataset directory (default: <output_dir>/dataset)")
    common.add_argument("--out", help="run directory (default: <output_dir>/<run_id>)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="tkpcl", description="Top-k pooled patch classifier with patch contrastive error.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("datagen", parents=[common], help="generate and export the synthetic dataset")
    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--resume", help="checkpoint to resume from")
    for name in ("eval", "infer"):
        p = sub.add_parser(name, parents=[common], help=f"{name} pseudo masks")
        p.add_argument("--checkpoint", help="trained checkpoint (default: <run dir>/checkpoint.tkp)")
        p.add_argument("--split", choices=("train", "val"), default="val")
        if name == "eval":
            p.add_argument("--masks", help="evaluate PGM masks from this directory instead of a checkpoint")
            p.add_argument("--report", help="report path (default: <run dir>/eval-<split>.json)")
        else:
            p.add_argument("--restrict", choices=("yes", "no"),
                           help="restrict argmax to image labels (default: yes on train, no on val)")
            p.add_argument("--masks-out", help="mask directory (default: <run dir>/masks-<split>)")
    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p = sub.add_parser("ablate", parents=[common], help="avg / max / top-k / top-k+PCE ablation")
    p.add_argument("--seeds", help="comma-separated seeds (default: the config seed)")
    p = sub.add_parser("sweep", parents=[common], help="sweep k or epsilon")
    p.add_argument("--param", choices=("k", "epsilon"), required=True)
    p.add_argument("--values", required=True, help="comma-separated values")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args.config, args.set)
        if args.command in ("eval", "infer") and not getattr(args, "masks", None) and not args.checkpoint:
            args.checkpoint = str(run_dir(args, config) / "checkpoint.tkp")
        return COMMANDS[args.command](args, config)
    except (ConfigError, DatasetError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDiverged, NonFiniteGradientError, NonFiniteOutputError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (MissingArtifact, ckpt_io.CheckpointError, netpbm.NetpbmError) as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING


if __name__ == "__main__":
    sys.exit(main())
