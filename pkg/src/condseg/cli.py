"""Command-line entry point: ``condseg gen|train|eval|experiment|report``.

Exit codes: 0 success, 2 invalid input (bad arguments, config, data,
checkpoint or a missing file), 3 numerical failure (the NaN guard fired during training).
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
from pathlib import Path

from .conditioning import ConditioningKind
from .errors import CondsegError, NumericalError, ValidationError
from .evaluation import METADATA_MODES, evaluate
from .experiments import PRESETS, RunSettings, load_preset_dataset, report, run_experiment
from .metadata import encode_batch, parse_permutation
from .storage import load_dataset, save_dataset
from .synth import stack_images, stack_masks
from .training import (SegmentationArrays, TrainConfig, load_checkpoint, read_checkpoint, save_checkpoint,
                       train, write_history_csv)
from .unet import UNetConfig, build_unet

logger = logging.getLogger("condseg")

TRAIN_DEFAULTS = {
    "conditioning": "sme",
    "depth": 3,
    "base_channels": 8,
    "subset": "",
    **TrainConfig().to_dict(),
    "threshold": 0.5,
}


def _value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def read_flat_config(path) -> dict:
    """``key = value`` lines (``#`` comments); values parsed as JSON when possible."""
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"config file {path} not found")
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string("[config]\n" + path.read_text())
    except configparser.Error as exc:
        raise ValidationError(f"cannot parse config {path}: {exc}") from None
    if len(parser.sections()) > 1:
        raise ValidationError("config must be flat (no [sections])")
    return {k: _value(v) for k, v in parser["config"].items()}


def _parse_sets(pairs) -> dict:
    out = {}
    for item in pairs or ():
        if "=" not in item:
            raise ValidationError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = _value(v.strip())
    return out


def _seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ValidationError(f"seeds must be comma-separated integers, got {text!r}") from None


# ----------------------------------------------------------------- commands


def cmd_gen(args) -> int:
    settings = RunSettings.from_flat({**_parse_sets(args.set), "data_seed": args.seed})
    ds = load_preset_dataset(args.preset, settings)
    out = save_dataset(ds, args.out, pgm=args.pgm)
    print(f"wrote {len(ds.samples)} samples to {out}")
    for split, counts in ds.counts().items():
        print(f"  {split}: {counts}")
    return 0


def _train_arrays(ds, samples, uses_meta):
    meta = encode_batch(ds.schema, [s.record for s in samples]) if uses_meta else None
    return SegmentationArrays(stack_images(samples), stack_masks(samples), meta)


def cmd_train(args) -> int:
    raw = read_flat_config(args.config)
    for key in ("data", "out"):
        if key not in raw:
            raise ValidationError(f"config needs a {key!r} entry")
    unknown = set(raw) - set(TRAIN_DEFAULTS) - {"data", "out"}
    if unknown:
        raise ValidationError(f"unknown config key(s): {', '.join(sorted(unknown))}")
    cfg = {**TRAIN_DEFAULTS, **raw}
    ds = load_dataset(cfg["data"])
    tags = [t for t in str(cfg["subset"]).split(",") if t] or None
    train_cfg = TrainConfig(**{k: cfg[k] for k in TrainConfig().to_dict()})
    uses_meta = ConditioningKind.parse(cfg["conditioning"]).uses_metadata
    tr, va = ds.split("train", tags), ds.split("val", tags)
    if not tr or not va:
        raise ValidationError("the selected data has no train or val samples")
    model_cfg = UNetConfig(depth=cfg["depth"], base_channels=cfg["base_channels"], in_channels=tr[0].image.shape[0],
                           out_channels=tr[0].mask.shape[0], conditioning=cfg["conditioning"],
                           meta_dim=ds.schema.total_dim if uses_meta else 0)
    model = build_unet(model_cfg, train_cfg.seed)
    result = train(model, _train_arrays(ds, tr, uses_meta), _train_arrays(ds, va, uses_meta), train_cfg)

    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.checkpoint, out / "checkpoint.ckpt")
    write_history_csv(result.history, out / "history.csv")
    test = ds.split("test", tags)
    echo = {**cfg, "model": model_cfg.to_dict()}
    payload = {"config": echo, "best_epoch": result.checkpoint.best_epoch,
               "best_val_loss": result.checkpoint.best_val_loss}
    if test:
        mode = "dummy" if train_cfg.metadata_mode == "dummy" else "correct"
        rep = evaluate(result.model, test, ds.schema, mode, threshold=cfg["threshold"])
        rep.config = echo
        rep.seeds = [train_cfg.seed]
        payload["test"] = rep.to_dict()
        print(f"test {mode}: average F1 {rep.average:.4f} {rep.per_subset}")
    (out / "config.json").write_text(json.dumps(echo, indent=2, sort_keys=True) + "\n")
    (out / "report.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    print(f"best epoch {result.checkpoint.best_epoch} (val loss {result.checkpoint.best_val_loss:.5f}); "
          f"outputs in {out}")
    return 0


def cmd_eval(args) -> int:
    ckpt = read_checkpoint(args.checkpoint)
    model = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    samples = ds.split(args.split)
    if not samples:
        raise ValidationError(f"dataset has no {args.split!r} samples")
    perm = parse_permutation(args.perm) if args.perm else None
    if args.mode == "swap" and perm is None:
        raise ValidationError("--mode swap needs --perm a:b,b:a")
    channel_of = None
    if model.config.out_channels > 1 and samples[0].mask.shape[0] == 1:
        names = ds.schema.fields[0].class_names
        channel_of = {t: i for i, t in enumerate(names)}
    rep = evaluate(model, samples, ds.schema, args.mode, perm, args.threshold, channel_of)
    rep.config = {"checkpoint": str(args.checkpoint), "data": str(args.data), "split": args.split,
                  "mode": args.mode, "perm": args.perm or "", "threshold": args.threshold,
                  "model": ckpt.model_config, "train": ckpt.train_config}
    seed = ckpt.train_config.get("seed")
    rep.seeds = [] if seed is None else [seed]
    text = json.dumps(rep.to_dict(), indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_experiment(args) -> int:
    flat = read_flat_config(args.config) if args.config else {}
    flat.update(_parse_sets(args.set))
    settings = RunSettings.from_flat(flat)
    variants = [v for v in args.variants.split(",") if v] if args.variants else None
    print(run_experiment(args.preset, variants, _seeds(args.seeds), args.out, settings, args.resume), end="")
    return 0


def cmd_report(args) -> int:
    print(report(args.dir), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="condseg", description="Metadata-conditioned U-Net segmentation")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a preset dataset")
    g.add_argument("preset", choices=sorted(PRESETS))
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--pgm", action="store_true", help="also export PGM previews")
    g.add_argument("--set", action="append", metavar="data.KEY=VALUE", help="generator override")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train one model from a flat config file")
    t.add_argument("--config", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--mode", choices=METADATA_MODES, default="correct")
    e.add_argument("--perm", default="", help="swap permutation, e.g. nuclei:anomaly,anomaly:nuclei")
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.add_argument("--threshold", type=float, default=0.5)
    e.add_argument("--out", help="also write the report JSON here")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("experiment", help="run a preset's variant grid over seeds")
    x.add_argument("preset", choices=sorted(PRESETS))
    x.add_argument("--variants", default="", help="comma-separated; default all")
    x.add_argument("--seeds", default="1,2,3")
    x.add_argument("--out", required=True)
    x.add_argument("--config", help="flat settings file")
    x.add_argument("--set", action="append", metavar="KEY=VALUE", help="setting override")
    x.add_argument("--resume", action="store_true", help="keep finished runs whose config matches")
    x.set_defaults(func=cmd_experiment)

    r = sub.add_parser("report", help="aggregate finished runs")
    r.add_argument("dir")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"condseg: numerical failure: {exc}", file=sys.stderr)
        return exc.exit_code
    except CondsegError as exc:
        print(f"condseg: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (ValueError, TypeError, KeyError, OSError) as exc:
        print(f"condseg: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
