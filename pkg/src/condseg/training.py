"""Adam with a triangular cyclic learning rate, best-by-validation training.

Runs are deterministic: the only randomness is the shuffling generator seeded
from :attr:`TrainConfig.seed`, whose state is saved with the checkpoint.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter
from .errors import CheckpointError, CorruptFileError, NumericalError, ShapeError, ValidationError
from .evaluation import mean_f1
from .storage import decode_tensor, encode_tensor
from .unet import ConditionedUNet, UNetConfig, build_unet

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"CSEGCKPT"
CHECKPOINT_VERSION = 1
HISTORY_COLUMNS = ("epoch", "train_loss", "val_loss", "val_f1", "lr_last")


# ------------------------------------------------------------------ schedule


@dataclass(frozen=True)
class CyclicLRConfig:
    total_batches: int
    lr_min: float = 2e-4
    lr_max: float = 8e-4
    cycles: int = 8

    def __post_init__(self):
        if not self.lr_min < self.lr_max:
            raise ValidationError("lr_min must be below lr_max")
        if self.cycles < 1:
            raise ValidationError("cycles must be >= 1")
        if self.total_batches < 1:
            raise ValidationError("total_batches must be >= 1")


def cyclic_lr(cfg: CyclicLRConfig, batch_index: int) -> float:
    """Triangular schedule: lr_min at each cycle start, lr_max half-way."""
    if not 0 <= batch_index < cfg.total_batches:
        raise ValidationError(f"batch index {batch_index} outside [0, {cfg.total_batches})")
    length = cfg.total_batches / cfg.cycles
    phase = (batch_index % length) / length
    return cfg.lr_min + (cfg.lr_max - cfg.lr_min) * (1.0 - abs(2.0 * phase - 1.0))


# ---------------------------------------------------------------------- adam


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: Sequence[Parameter], lr: float) -> None:
    """One bias-corrected Adam update in place; gradients are zeroed after."""
    for p in params:
        if p.tensor.grad is None:
            raise ValidationError(f"parameter {p.name!r} has no gradient")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p in params:
        theta, g = p.tensor.data, p.tensor.grad
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(theta)
            state.v[p.name] = np.zeros_like(theta)
        v = state.v[p.name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        theta -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        g.fill(0)


# -------------------------------------------------------------------- config


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 8
    seed: int = 0
    loss: str = "bce"
    metadata_mode: str = "correct"
    lr_min: float = 2e-4
    lr_max: float = 8e-4
    cycles: int = 8
    class_weights: tuple[float, float] | None = None
    checkpoint_policy: str = "best_val_loss"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.seed is None:
            raise ValidationError("a seed is mandatory")
        if self.loss != "bce":
            raise ValidationError(f"unsupported loss {self.loss!r}")
        if self.metadata_mode not in ("correct", "dummy"):
            raise ValidationError(f"metadata_mode must be correct or dummy, got {self.metadata_mode!r}")
        if self.checkpoint_policy not in ("best_val_loss", "last"):
            raise ValidationError(f"unknown checkpoint policy {self.checkpoint_policy!r}")
        if self.class_weights is not None:
            self.class_weights = tuple(float(w) for w in self.class_weights)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["class_weights"] = list(self.class_weights) if self.class_weights else None
        return d


@dataclass
class SegmentationArrays:
    """Stacked inputs for one split: images (N, C, H, W), masks (N, K, H, W)."""

    images: np.ndarray
    masks: np.ndarray
    meta: np.ndarray | None = None

    def __post_init__(self):
        if self.images.ndim != 4 or self.masks.ndim != 4:
            raise ShapeError("images and masks must be rank 4", dim="rank")
        if len(self.images) != len(self.masks):
            raise ShapeError("images and masks differ in length", dim="N")
        if self.images.shape[2:] != self.masks.shape[2:]:
            raise ShapeError("image and mask spatial sizes differ", dim="H")
        if self.meta is not None and len(self.meta) != len(self.images):
            raise ShapeError("metadata and images differ in length", dim="N")

    def __len__(self) -> int:
        return len(self.images)


@dataclass
class Checkpoint:
    model_config: dict
    train_config: dict
    params: dict[str, np.ndarray]
    best_val_loss: float
    best_epoch: int
    rng_state: dict
    format_version: int = CHECKPOINT_VERSION


@dataclass
class TrainResult:
    model: ConditionedUNet
    checkpoint: Checkpoint
    history: list[dict]


def _model_meta(model: ConditionedUNet, data: SegmentationArrays, mode: str) -> np.ndarray | None:
    if not model.config.conditioning.uses_metadata:
        return None
    if data.meta is None:
        raise ValidationError("this model needs metadata but the data has none")
    if data.meta.shape[1] != model.config.meta_dim:
        raise ValidationError(f"data metadata width {data.meta.shape[1]} != model meta_dim {model.config.meta_dim}")
    return np.zeros_like(data.meta) if mode == "dummy" else data.meta


def _check_finite(value: float, where: str) -> None:
    if not math.isfinite(value):
        raise NumericalError(f"loss became {value} during {where}")


def validate(model: ConditionedUNet, data: SegmentationArrays, mode: str = "correct",
             batch_size: int = 32, class_weights=None) -> tuple[float, float]:
    """(mean BCE, mean per-image F1) on ``data`` without recording gradients."""
    meta = _model_meta(model, data, mode)
    losses, preds = [], []
    with ad.no_grad():
        for lo in range(0, len(data), batch_size):
            sl = slice(lo, lo + batch_size)
            logits = model(data.images[sl], None if meta is None else meta[sl])
            loss = ad.bce_with_logits(logits, data.masks[sl], class_weights)
            losses.append(float(loss.data) * logits.data.size)
            preds.append(logits.data >= 0)
    total = sum(losses) / data.masks.size
    return total, mean_f1(np.concatenate(preds), data.masks)


def train(model: ConditionedUNet, train_data: SegmentationArrays, val_data: SegmentationArrays,
          cfg: TrainConfig) -> TrainResult:
    """Train in place and leave the best epoch's parameters in ``model``."""
    if len(train_data) == 0 or len(val_data) == 0:
        raise ValidationError("training needs non-empty train and val splits")
    if train_data.masks.shape[1] != model.config.out_channels:
        raise ShapeError(
            f"masks have {train_data.masks.shape[1]} channels, model outputs {model.config.out_channels}",
            dim="K",
        )
    rng = np.random.default_rng(cfg.seed)
    meta = _model_meta(model, train_data, cfg.metadata_mode)
    params = model.parameters()
    n = len(train_data)
    per_epoch = math.ceil(n / cfg.batch_size)
    sched = CyclicLRConfig(cfg.epochs * per_epoch, cfg.lr_min, cfg.lr_max, cfg.cycles)
    state = AdamState()
    model.zero_grad()

    history: list[dict] = []
    best = (math.inf, -1, None, None)
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        running = 0.0
        lr = cfg.lr_min
        for b in range(per_epoch):
            idx = np.sort(order[b * cfg.batch_size:(b + 1) * cfg.batch_size])
            logits = model(train_data.images[idx], None if meta is None else meta[idx])
            loss = ad.bce_with_logits(logits, train_data.masks[idx], cfg.class_weights)
            value = float(loss.data)
            _check_finite(value, f"epoch {epoch} batch {b}")
            ad.backward(loss)
            lr = cyclic_lr(sched, step)
            adam_step(state, params, lr)
            running += value * len(idx)
            step += 1
        val_loss, val_f1 = validate(model, val_data, cfg.metadata_mode, class_weights=cfg.class_weights)
        _check_finite(val_loss, f"validation after epoch {epoch}")
        row = {"epoch": epoch, "train_loss": running / n, "val_loss": val_loss, "val_f1": val_f1, "lr_last": lr}
        history.append(row)
        logger.debug("epoch %d train %.4f val %.4f f1 %.4f", epoch, row["train_loss"], val_loss, val_f1)
        if cfg.checkpoint_policy == "last" or val_loss < best[0]:
            best = (val_loss, epoch, model.state_dict(), rng.bit_generator.state)

    best_loss, best_epoch, best_params, rng_state = best
    model.load_state_dict(best_params)
    ckpt = Checkpoint(model.config.to_dict(), cfg.to_dict(), best_params, float(best_loss), best_epoch,
                      _jsonable(rng_state))
    return TrainResult(model, ckpt, history)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (np.integer,)):
        return int(obj)
    return obj


# --------------------------------------------------------------- persistence


def checkpoint_from_model(model: ConditionedUNet, train_config: dict | None = None) -> Checkpoint:
    return Checkpoint(model.config.to_dict(), train_config or {}, model.state_dict(), math.nan, 0, {})


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    names = list(ckpt.params)
    header = {
        "model_config": ckpt.model_config,
        "train_config": ckpt.train_config,
        "best_val_loss": None if math.isnan(ckpt.best_val_loss) else ckpt.best_val_loss,
        "best_epoch": ckpt.best_epoch,
        "rng_state": ckpt.rng_state,
        "params": names,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    body = CHECKPOINT_MAGIC + struct.pack("<HI", ckpt.format_version, len(head)) + head
    body += b"".join(encode_tensor(ckpt.params[n]) for n in names)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_checkpoint(buf: bytes) -> Checkpoint:
    if len(buf) < len(CHECKPOINT_MAGIC) + 10 or buf[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CorruptFileError("not a checkpoint file (bad magic or truncated)")
    pos = len(CHECKPOINT_MAGIC)
    version, head_len = struct.unpack_from("<HI", buf, pos)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint format version {version} is not supported (expected {CHECKPOINT_VERSION})")
    (crc,) = struct.unpack_from("<I", buf, len(buf) - 4)
    if zlib.crc32(buf[:-4]) != crc:
        raise CorruptFileError("checkpoint checksum mismatch (truncated or corrupt file)")
    pos += 6
    try:
        header = json.loads(buf[pos:pos + head_len])
    except (json.JSONDecodeError, UnicodeDecodeError):
        raise CorruptFileError("checkpoint header is not valid JSON") from None
    pos += head_len
    params = {}
    for name in header["params"]:
        params[name], pos = decode_tensor(buf, pos)
    if pos != len(buf) - 4:
        raise CorruptFileError("unexpected bytes after checkpoint tensors")
    best = header["best_val_loss"]
    return Checkpoint(header["model_config"], header["train_config"], params,
                      math.nan if best is None else best, header["best_epoch"], header["rng_state"], version)


def save_checkpoint(ckpt: Checkpoint | ConditionedUNet, path) -> Path:
    if isinstance(ckpt, ConditionedUNet):
        ckpt = checkpoint_from_model(ckpt)
    path = Path(path)
    path.write_bytes(encode_checkpoint(ckpt))
    return path


def read_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


def load_checkpoint(path, config: UNetConfig | None = None) -> ConditionedUNet:
    """Rebuild the network stored at ``path``.

    With ``config`` the parameters are loaded into that architecture instead,
    and any disagreement raises :class:`ShapeError` naming the first
    offending parameter.
    """
    ckpt = read_checkpoint(path)
    if config is None:
        config = UNetConfig(**ckpt.model_config)
    model = build_unet(config, 0)
    model.load_state_dict(ckpt.params)
    return model


def write_history_csv(history: Sequence[dict], path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for row in history:
            w.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in HISTORY_COLUMNS])
    return path
