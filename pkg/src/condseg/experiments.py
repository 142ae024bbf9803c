"""Experiment presets, the (variant, seed) run grid and result aggregation.

A preset binds a dataset generator, a model/training configuration and the
ordered list of model variants that make up its comparison table. Every run
writes into its own directory::

    <out>/<preset>/<variant>/seed-<n>/
        config.json         every setting used (the config echo)
        history*.csv        per-epoch metrics, one file per trained model
        checkpoint*.ckpt    best-by-validation parameters
        eval-<mode>.csv     per-sample F1 for each metadata mode
        report.json         EvalReports plus extras (e.g. a size sweep)
        timing.json         wall/CPU seconds, kept apart so outputs stay reproducible

``report`` aggregates these into ``summary.csv`` and ``summary.txt``.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .conditioning import ConditioningKind
from .errors import ValidationError
from .evaluation import EvalReport, evaluate, summarize
from .metadata import encode_batch
from .synth import (Dataset, gen_annotation_styles, gen_blobs, gen_continuous, gen_domains, gen_multitask,
                    multilabel_pairs, stack_images, stack_masks)
from .training import SegmentationArrays, TrainConfig, save_checkpoint, train, write_history_csv
from .unet import UNetConfig, build_unet, predict_proba

logger = logging.getLogger(__name__)

THREADS_ENV = "CONDSEG_THREADS"

# Desk-scale runs take ~1k optimizer steps instead of tens of thousands, so the
# cyclic range is scaled up 4x with its 1:4 ratio and cycle count unchanged.
DESK_LR = (8e-4, 3.2e-3)


@dataclass(frozen=True)
class Variant:
    """One row of a comparison table.

    ``scope`` selects what the model is trained on: ``all`` (the pooled
    training split), ``stratified`` (one model per subset tag, each scored on
    its own subset), ``subset:<tag>`` (one model on a single subset),
    ``multilabel`` (samples of images that carry both masks) or ``two-heads``
    (one two-channel model on the multilabel images).
    """

    name: str
    conditioning: str
    train_mode: str = "correct"
    scope: str = "all"

    @property
    def uses_metadata(self) -> bool:
        return ConditioningKind.parse(self.conditioning).uses_metadata

    @property
    def eval_modes(self) -> tuple[str, ...]:
        if not self.uses_metadata:
            return ("correct",)
        if self.train_mode == "dummy":
            return ("dummy",)
        return ("correct", "dummy", "swap")

    @property
    def primary_mode(self) -> str:
        return "dummy" if self.train_mode == "dummy" else "correct"


@dataclass(frozen=True)
class Preset:
    name: str
    generator: Callable[..., Dataset]
    variants: tuple[Variant, ...]
    swap: dict | None = None  # categorical permutation for swap evaluation
    sweep: tuple[float, ...] = ()  # continuous metadata values probed after training

    def variant(self, name: str) -> Variant:
        for v in self.variants:
            if v.name == name:
                return v
        raise ValidationError(f"unknown variant {name!r} for preset {self.name!r}; "
                              f"choose from {', '.join(v.name for v in self.variants)}")


def _styles_dataset(seed: int = 0, train: int = 144, val: int = 24, test: int = 32, size: int = 32,
                    fine: float = 2.0, coarse: float = 3.5) -> Dataset:
    base = gen_blobs({"train": train, "val": val, "test": test}, seed=seed, size=size)
    return gen_annotation_styles(base, seed, (0.0, fine, coarse))


def _domains_dataset(seed: int = 0, styles: int = 7, train: int = 24, val: int = 8, test: int = 16,
                     size: int = 32) -> Dataset:
    return gen_domains(styles, {"train": train, "val": val, "test": test}, seed, size)


def _multitask_dataset(seed: int = 0, nuclei_n: int = 400, anomaly_n: int = 48, val_nuclei: int = 48,
                       val_anomaly: int = 16, test_nuclei: int = 48, test_anomaly: int = 24,
                       size: int = 32) -> Dataset:
    return gen_multitask(seed, nuclei_n, anomaly_n, None, (val_nuclei, val_anomaly),
                         (test_nuclei, test_anomaly), size)


def _continuous_dataset(seed: int = 0, n: int = 320, val_n: int = 32, test_n: int = 48,
                        size: int = 32) -> Dataset:
    return gen_continuous(seed, n, val_n, test_n, size)


PRESETS: dict[str, Preset] = {
    "domains": Preset("domains", _domains_dataset, (
        Variant("baseline-stratified", "se", scope="stratified"),
        Variant("baseline", "se"),
        Variant("film", "film"),
        Variant("film-dummy", "film", "dummy"),
        Variant("me", "me"),
        Variant("sme-dummy", "sme", "dummy"),
        Variant("sme", "sme"),
    )),
    "styles": Preset("styles", _styles_dataset, (
        Variant("baseline-1/3", "se", scope="subset:accurate"),
        Variant("baseline", "se"),
        Variant("film", "film"),
        Variant("me", "me"),
        Variant("sme-dummy", "sme", "dummy"),
        Variant("sme", "sme"),
    )),
    "multitask": Preset("multitask", _multitask_dataset, (
        Variant("baseline-stratified", "se", scope="stratified"),
        Variant("me", "me"),
        Variant("sme-dummy", "sme", "dummy"),
        Variant("sme", "sme"),
        Variant("two-heads", "se", scope="two-heads"),
        Variant("sme-multilabel", "sme", scope="multilabel"),
    ), swap={"nuclei": "anomaly", "anomaly": "nuclei"}),
    "continuous": Preset("continuous", _continuous_dataset, (
        Variant("baseline", "se"),
        Variant("film", "film"),
        Variant("me", "me"),
        Variant("sme", "sme"),
    ), sweep=(0.0, 0.2, 0.4, 0.6, 0.8, 1.0)),
}


def get_preset(name: str) -> Preset:
    try:
        return PRESETS[name]
    except KeyError:
        raise ValidationError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}") from None


# ------------------------------------------------------------------- config

@dataclass(frozen=True)
class RunSettings:
    """Everything a run depends on besides (preset, variant, seed)."""

    depth: int = 3
    base_channels: int = 8
    epochs: int = 20
    batch_size: int = 8
    lr_min: float = DESK_LR[0]
    lr_max: float = DESK_LR[1]
    cycles: int = 8
    checkpoint_policy: str = "best_val_loss"
    threshold: float = 0.5
    data_seed: int = 0
    step_matched: bool = True  # subset models get the pooled model's optimizer-step budget
    data: tuple = ()  # sorted (key, value) generator overrides

    @classmethod
    def from_flat(cls, flat: dict | None) -> "RunSettings":
        """Build from flat ``key: value`` pairs; ``data.<key>`` entries go to the generator."""
        flat = dict(flat or {})
        data = {k[5:]: v for k, v in flat.items() if k.startswith("data.")}
        rest = {k: v for k, v in flat.items() if not k.startswith("data.")}
        known = set(cls.__dataclass_fields__) - {"data"}
        unknown = set(rest) - known
        if unknown:
            raise ValidationError(f"unknown setting(s): {', '.join(sorted(unknown))}")
        return cls(**rest, data=tuple(sorted(data.items())))

    def to_flat(self) -> dict:
        out = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "data"}
        out.update({f"data.{k}": v for k, v in self.data})
        return out


@lru_cache(maxsize=8)
def _dataset(preset: str, seed: int, data: tuple) -> Dataset:
    return get_preset(preset).generator(seed, **dict(data))


def load_preset_dataset(preset: str, settings: RunSettings | None = None) -> Dataset:
    settings = settings or RunSettings()
    try:
        return _dataset(preset, settings.data_seed, settings.data)
    except TypeError as exc:
        raise ValidationError(f"bad data setting for preset {preset!r}: {exc}") from None


# --------------------------------------------------------------------- runs


def _arrays(ds: Dataset, samples, uses_meta: bool) -> SegmentationArrays:
    meta = encode_batch(ds.schema, [s.record for s in samples]) if uses_meta else None
    return SegmentationArrays(stack_images(samples), stack_masks(samples), meta)


def _pair_arrays(pairs) -> SegmentationArrays:
    images = np.stack([n.image for n, _ in pairs]).astype(np.float32)
    masks = np.stack([np.concatenate([n.mask, a.mask]) for n, a in pairs]).astype(np.float32)
    return SegmentationArrays(images, masks, None)


def _batches(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)


@dataclass
class _Job:
    label: str  # "" for single-model variants, else subset tag
    train: SegmentationArrays
    val: SegmentationArrays
    test: list  # samples scored by this model
    out_channels: int = 1
    channel_of: dict | None = None


def _plan(ds: Dataset, variant: Variant) -> list[_Job]:
    meta = variant.uses_metadata
    if variant.scope == "all":
        return [_Job("", _arrays(ds, ds.split("train"), meta), _arrays(ds, ds.split("val"), meta),
                     ds.split("test"))]
    if variant.scope == "stratified" or variant.scope.startswith("subset:"):
        tags = ds.tags if variant.scope == "stratified" else [variant.scope.split(":", 1)[1]]
        jobs = []
        for tag in tags:
            tr, va = ds.split("train", [tag]), ds.split("val", [tag])
            if not tr or not va:
                raise ValidationError(f"subset {tag!r} has no train or val samples")
            test = ds.split("test", [tag]) if variant.scope == "stratified" else ds.split("test")
            jobs.append(_Job(tag, _arrays(ds, tr, meta), _arrays(ds, va, meta), test))
        return jobs
    if variant.scope == "multilabel":
        pick = lambda split: [s for pair in multilabel_pairs(ds, split) for s in pair]
        return [_Job("", _arrays(ds, pick("train"), meta), _arrays(ds, pick("val"), meta), ds.split("test"))]
    if variant.scope == "two-heads":
        tags = ds.schema.fields[0].class_names
        return [_Job("", _pair_arrays(multilabel_pairs(ds, "train")), _pair_arrays(multilabel_pairs(ds, "val")),
                     ds.split("test"), out_channels=len(tags), channel_of={t: i for i, t in enumerate(tags)})]
    raise ValidationError(f"unknown variant scope {variant.scope!r}")


def run_dir(out_dir, preset: str, variant: str, seed: int) -> Path:
    return Path(out_dir) / preset / variant.replace("/", "_") / f"seed-{seed}"


def _write_eval_csv(report: EvalReport, path: Path) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("sample_id", "subset", "f1"))
        for row in zip(report.sample_ids, report.sample_subsets, report.sample_f1):
            w.writerow((row[0], row[1], repr(float(row[2]))))


def _sweep(model, samples, values: Sequence[float], threshold: float) -> dict:
    """Mean predicted foreground pixels per image for each metadata value."""
    images = stack_images(samples)
    counts = []
    for v in values:
        meta = np.full((len(samples), model.config.meta_dim), float(v))
        counts.append(float((predict_proba(model, images, meta) >= threshold).sum() / len(samples)))
    return {"values": [float(v) for v in values], "mean_pixels": counts}


def run_one(preset: str, variant: str, seed: int, out_dir, settings: RunSettings | None = None) -> dict:
    """Train and evaluate one (variant, seed) cell and write its run directory."""
    settings = settings or RunSettings()
    pre = get_preset(preset)
    var = pre.variant(variant)
    t0, c0 = time.perf_counter(), time.process_time()
    ds = load_preset_dataset(preset, settings)
    jobs = _plan(ds, var)
    directory = run_dir(out_dir, preset, variant, seed)
    directory.mkdir(parents=True, exist_ok=True)

    pooled_steps = settings.epochs * _batches(len(ds.split("train")), settings.batch_size)
    meta_dim = ds.schema.total_dim if var.uses_metadata else 0
    modes = [m for m in var.eval_modes if m != "swap" or pre.swap]
    scores: dict[str, list] = {m: [] for m in modes}
    models = []
    trained = []
    for job in jobs:
        epochs = settings.epochs
        if settings.step_matched and var.scope != "all":
            epochs = max(1, round(pooled_steps / _batches(len(job.train), settings.batch_size)))
        mcfg = UNetConfig(depth=settings.depth, base_channels=settings.base_channels,
                          in_channels=job.train.images.shape[1], out_channels=job.out_channels,
                          conditioning=var.conditioning, meta_dim=meta_dim)
        tcfg = TrainConfig(epochs=epochs, batch_size=settings.batch_size, seed=seed,
                           metadata_mode=var.train_mode, lr_min=settings.lr_min, lr_max=settings.lr_max,
                           cycles=settings.cycles, checkpoint_policy=settings.checkpoint_policy)
        model = build_unet(mcfg, seed)
        result = train(model, job.train, job.val, tcfg)
        suffix = f"-{job.label}" if job.label else ""
        write_history_csv(result.history, directory / f"history{suffix}.csv")
        save_checkpoint(result.checkpoint, directory / f"checkpoint{suffix}.ckpt")
        trained.append({"label": job.label, "epochs": epochs, "n_train": len(job.train),
                        "best_epoch": result.checkpoint.best_epoch, "model": mcfg.to_dict(),
                        "train": tcfg.to_dict()})
        for mode in modes:
            r = evaluate(result.model, job.test, ds.schema, mode, pre.swap if mode == "swap" else None,
                         settings.threshold, job.channel_of, preset)
            scores[mode].append(r)
        models.append(result.model)

    # re-order pooled per-sample scores to the dataset's test order
    test_order = {s.sample_id: i for i, s in enumerate(ds.split("test"))}
    reports = {}
    for mode, parts in scores.items():
        rows = sorted((test_order[i], i, t, f) for r in parts
                      for i, t, f in zip(r.sample_ids, r.sample_subsets, r.sample_f1))
        reports[mode] = summarize([r[1] for r in rows], [r[2] for r in rows], [r[3] for r in rows], mode,
                                  preset, settings.to_flat(), [seed])
        _write_eval_csv(reports[mode], directory / f"eval-{mode}.csv")

    config = {"preset": preset, "variant": variant, "seed": seed, "conditioning": var.conditioning,
              "train_mode": var.train_mode, "scope": var.scope, **settings.to_flat(),
              "dataset": {"name": ds.name, "seed": ds.seed, "version": ds.version, "params": ds.params},
              "models": trained}
    (directory / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")

    payload = {"preset": preset, "variant": variant, "seed": seed, "primary_mode": var.primary_mode,
               "subsets": list(dict.fromkeys(s.subset_tag for s in ds.split("test"))),
               "reports": {m: r.to_dict() for m, r in reports.items()}}
    if pre.sweep and var.uses_metadata and len(models) == 1:
        payload["sweep"] = _sweep(models[0], ds.split("test"), pre.sweep, settings.threshold)
    (directory / "report.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    timing = {"wall_seconds": time.perf_counter() - t0, "cpu_seconds": time.process_time() - c0}
    (directory / "timing.json").write_text(json.dumps(timing, indent=2) + "\n")
    logger.info("%s/%s seed %d: %s in %.1fs", preset, variant, seed,
                {m: round(r.average, 4) for m, r in reports.items()}, timing["wall_seconds"])
    return payload


def _run_job(args) -> dict:
    return run_one(*args)


def is_complete(out_dir, preset: str, variant: str, seed: int, settings: RunSettings) -> bool:
    """True when the cell already holds a report produced with ``settings``."""
    d = run_dir(out_dir, preset, variant, seed)
    if not (d / "report.json").exists() or not (d / "config.json").exists():
        return False
    try:
        cfg = json.loads((d / "config.json").read_text())
    except json.JSONDecodeError:
        return False
    want = json.loads(json.dumps(settings.to_flat()))
    return all(cfg.get(k) == v for k, v in want.items()) and not (set(cfg) - set(want) - _CONFIG_EXTRAS)


_CONFIG_EXTRAS = {"preset", "variant", "seed", "conditioning", "train_mode", "scope", "dataset", "models"}


def max_workers(n_jobs: int) -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        cap = os.cpu_count() or 1
    else:
        try:
            cap = int(raw)
        except ValueError:
            raise ValidationError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
        if cap < 1:
            raise ValidationError(f"{THREADS_ENV} must be >= 1")
    return max(1, min(cap, n_jobs))


def run_experiment(preset: str, variants: Iterable[str] | None, seeds: Sequence[int], out_dir,
                   settings: RunSettings | None = None, resume: bool = False) -> str:
    """Run every (variant, seed) cell, then aggregate; returns the text table.

    With ``resume`` cells whose stored config matches ``settings`` are kept.
    """
    pre = get_preset(preset)
    names = [v.name for v in pre.variants] if not variants else list(variants)
    for n in names:
        pre.variant(n)
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ValidationError("need at least one seed")
    settings = settings or RunSettings()
    jobs = [(preset, n, s, str(out_dir), settings) for n in names for s in seeds
            if not (resume and is_complete(out_dir, preset, n, s, settings))]
    workers = max_workers(max(1, len(jobs)))
    if workers == 1:
        for job in jobs:
            _run_job(job)
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            list(pool.map(_run_job, jobs))
    return report(out_dir)


# ------------------------------------------------------------------- report


def _variant_rank(preset: str, variant: str) -> tuple:
    names = [v.name for v in PRESETS[preset].variants] if preset in PRESETS else []
    return (names.index(variant), "") if variant in names else (len(names), variant)


def collect_runs(out_dir) -> list[dict]:
    out_dir = Path(out_dir)
    runs = []
    if out_dir.is_dir():
        for path in sorted(out_dir.rglob("report.json")):
            try:
                runs.append(json.loads(path.read_text()))
            except json.JSONDecodeError:
                raise ValidationError(f"unreadable run file {path}") from None
    if not runs:
        raise ValidationError(f"no runs found in {out_dir}")
    return runs


def aggregate(runs: list[dict]) -> list[dict]:
    """One row per (preset, variant, mode) with mean/sd over seeds per column."""
    cells: dict[tuple, dict] = {}
    for run in runs:
        for mode, rep in run["reports"].items():
            key = (run["preset"], run["variant"], mode)
            cell = cells.setdefault(key, {"seeds": [], "values": {}, "primary": mode == run["primary_mode"],
                                          "subsets": run["subsets"]})
            cell["seeds"].append(run["seed"])
            for col, val in [*rep["per_subset"].items(), ("average", rep["average"])]:
                cell["values"].setdefault(col, []).append(val)
    rows = []
    for (preset, variant, mode), cell in cells.items():
        stats = {}
        for col, vals in cell["values"].items():
            arr = np.asarray(vals, dtype=float)
            sd = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
            stats[col] = (float(arr.mean()), sd, len(arr))
        rows.append({"preset": preset, "variant": variant, "mode": mode, "primary": cell["primary"],
                     "seeds": sorted(cell["seeds"]), "subsets": cell["subsets"], "stats": stats})
    modes = ("correct", "dummy", "swap")
    rows.sort(key=lambda r: (r["preset"], not r["primary"], _variant_rank(r["preset"], r["variant"]),
                             modes.index(r["mode"]) if r["mode"] in modes else len(modes)))
    return rows


def _flag_best(rows: list[dict]) -> set[tuple]:
    """(preset, variant, mode, column) of the best primary mean per column."""
    best: dict[tuple, tuple] = {}
    for r in rows:
        if not r["primary"]:
            continue
        for col, (mean, _, _) in r["stats"].items():
            key = (r["preset"], col)
            if key not in best or mean > best[key][0]:
                best[key] = (mean, (r["preset"], r["variant"], r["mode"], col))
    return {v[1] for v in best.values()}


def report(out_dir) -> str:
    """Write ``summary.csv`` and ``summary.txt`` into ``out_dir``; return the text."""
    rows = aggregate(collect_runs(out_dir))
    best = _flag_best(rows)
    out_dir = Path(out_dir)
    with (out_dir / "summary.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("preset", "variant", "mode", "column", "mean", "sd", "n", "best"))
        for r in rows:
            for col in [*r["subsets"], "average"]:
                if col not in r["stats"]:
                    continue
                mean, sd, n = r["stats"][col]
                flag = int((r["preset"], r["variant"], r["mode"], col) in best)
                w.writerow((r["preset"], r["variant"], r["mode"], col, f"{mean:.6f}", f"{sd:.6f}", n, flag))

    blocks = []
    for preset in sorted({r["preset"] for r in rows}):
        prow = [r for r in rows if r["preset"] == preset]
        cols = list(dict.fromkeys(c for r in prow for c in [*r["subsets"], "average"]))
        header = ["variant", "mode", *cols, "seeds"]
        table = [header]
        for r in prow:
            line = [r["variant"], r["mode"]]
            for col in cols:
                if col not in r["stats"]:
                    line.append("-")
                    continue
                mean, sd, _ = r["stats"][col]
                mark = "*" if (r["preset"], r["variant"], r["mode"], col) in best else " "
                line.append(f"{mean:.3f} ± {sd:.3f}{mark}")
            line.append(",".join(str(s) for s in r["seeds"]))
            table.append(line)
        widths = [max(len(row[i]) for row in table) for i in range(len(header))]
        text = [f"[{preset}]"]
        for k, row in enumerate(table):
            text.append("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip())
            if k == 0:
                text.append("  ".join("-" * w for w in widths))
        blocks.append("\n".join(text))
    body = "\n\n".join(blocks) + "\n\n* best primary-mode mean in its column\n"
    (out_dir / "summary.txt").write_text(body)
    return body


def load_run(out_dir, preset: str, variant: str, seed: int) -> dict:
    path = run_dir(out_dir, preset, variant, seed) / "report.json"
    if not path.exists():
        raise ValidationError(f"missing run file {path}")
    return json.loads(path.read_text())


__all__ = ["PRESETS", "Preset", "Variant", "RunSettings", "get_preset", "load_preset_dataset", "run_one",
           "run_experiment", "is_complete", "report", "aggregate", "collect_runs", "load_run", "run_dir", "max_workers",
           "DESK_LR", "THREADS_ENV"]
