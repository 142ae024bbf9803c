"""Per-image F1 scoring under correct, dummy or swapped metadata."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import ShapeError, ValidationError
from .metadata import MetadataEncoder, MetadataSchema

METADATA_MODES = ("correct", "dummy", "swap")


def f1_score(pred, target) -> float:
    """2TP / (2TP + FP + FN) on binary masks; two empty masks score 1."""
    p = np.asarray(pred) > 0
    t = np.asarray(target) > 0
    if p.shape != t.shape:
        raise ShapeError(f"prediction shape {p.shape} != target shape {t.shape}", dim="shape")
    tp = np.count_nonzero(p & t)
    denom = np.count_nonzero(p) + np.count_nonzero(t)
    return 1.0 if denom == 0 else 2.0 * tp / denom


def per_image_f1(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    """F1 for every image of an (N, K, H, W) batch, averaged over the K classes."""
    p = np.asarray(pred) > 0
    t = np.asarray(target) > 0
    if p.shape != t.shape:
        raise ShapeError(f"prediction shape {p.shape} != target shape {t.shape}", dim="shape")
    axes = tuple(range(2, p.ndim))
    tp = np.count_nonzero(p & t, axis=axes)
    denom = np.count_nonzero(p, axis=axes) + np.count_nonzero(t, axis=axes)
    with np.errstate(invalid="ignore", divide="ignore"):
        f1 = np.where(denom == 0, 1.0, 2.0 * tp / np.maximum(denom, 1))
    return f1.mean(axis=1)


def mean_f1(pred: np.ndarray, target: np.ndarray) -> float:
    return float(per_image_f1(pred, target).mean())


@dataclass
class EvalReport:
    preset: str
    mode: str
    per_subset: dict[str, float]
    average: float
    counts: dict[str, int]
    sample_ids: list[str] = field(default_factory=list)
    sample_subsets: list[str] = field(default_factory=list)
    sample_f1: list[float] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    seeds: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "preset": self.preset,
            "mode": self.mode,
            "per_subset": self.per_subset,
            "average": self.average,
            "counts": self.counts,
            "config": self.config,
            "seeds": self.seeds,
        }


def summarize(ids: Sequence[str], subsets: Sequence[str], scores: Sequence[float], mode: str,
              preset: str = "", config: dict | None = None, seeds: Sequence[int] = ()) -> EvalReport:
    """Group per-sample scores by subset; the average is over samples."""
    scores = [float(s) for s in scores]
    order: dict[str, list[float]] = {}
    for tag, s in zip(subsets, scores):
        order.setdefault(tag, []).append(s)
    return EvalReport(
        preset=preset,
        mode=mode,
        per_subset={t: float(np.mean(v)) for t, v in order.items()},
        average=float(np.mean(scores)) if scores else float("nan"),
        counts={t: len(v) for t, v in order.items()},
        sample_ids=list(ids),
        sample_subsets=list(subsets),
        sample_f1=scores,
        config=dict(config or {}),
        seeds=list(seeds),
    )


def evaluate(model, samples, schema: MetadataSchema | None, mode: str = "correct", permutation=None,
             threshold: float = 0.5, channel_of: Mapping[str, int] | Callable | None = None,
             preset: str = "", batch_size: int = 32) -> EvalReport:
    """Predict every sample and score it against its own mask.

    ``mode`` rewrites metadata before encoding: ``dummy`` zeroes it, ``swap``
    relabels the categorical field through ``permutation``. Models without
    metadata ignore it. ``channel_of`` picks one output channel per sample
    (by subset tag or callable) for multi-head models.
    """
    from .unet import predict_proba

    if mode not in METADATA_MODES:
        raise ValidationError(f"unknown metadata mode {mode!r}")
    samples = list(samples)
    uses_meta = model.config.conditioning.uses_metadata
    if uses_meta:
        if schema is None:
            raise ValidationError("a metadata model needs the dataset schema")
        if schema.total_dim != model.config.meta_dim:
            raise ValidationError(f"schema width {schema.total_dim} != model meta_dim {model.config.meta_dim}")
        encoder = MetadataEncoder(schema, mode, permutation).fit()
    elif mode == "swap":
        # still validate the permutation so a bad request fails loudly
        MetadataEncoder(schema, mode, permutation).fit()

    scores = []
    for lo in range(0, len(samples), batch_size):
        chunk = samples[lo:lo + batch_size]
        images = np.stack([s.image for s in chunk])
        meta = encoder.transform([s.record for s in chunk]) if uses_meta else None
        prob = predict_proba(model, images, meta)
        pred = (prob >= threshold).astype(np.uint8)
        targets = np.stack([s.mask for s in chunk])
        if channel_of is not None:
            pick = [channel_of(s) if callable(channel_of) else channel_of[s.subset_tag] for s in chunk]
            pred = np.stack([pred[i, c:c + 1] for i, c in enumerate(pick)])
        if pred.shape != targets.shape:
            raise ShapeError(f"prediction {pred.shape[1:]} vs target {targets.shape[1:]}", dim="K")
        scores.extend(per_image_f1(pred, targets))
    return summarize([s.sample_id for s in samples], [s.subset_tag for s in samples], scores, mode, preset)
