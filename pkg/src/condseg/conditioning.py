"""Channel-modulation blocks that optionally take a metadata vector.

``SE`` gates channels from pooled feature statistics, ``ME`` gates them from
metadata alone, ``SME`` from the concatenation of both, and ``FiLM`` applies
a per-channel affine transform predicted from metadata.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import MetadataError, ShapeError, ValidationError


class ConditioningKind(str, enum.Enum):
    NONE = "none"
    SE = "se"
    ME = "me"
    SME = "sme"
    FILM = "film"

    @property
    def uses_metadata(self) -> bool:
        return self in (ConditioningKind.ME, ConditioningKind.SME, ConditioningKind.FILM)

    @classmethod
    def parse(cls, value) -> "ConditioningKind":
        if isinstance(value, cls):
            return value
        if value is None:
            return cls.NONE
        try:
            return cls(str(value).lower())
        except ValueError:
            names = ", ".join(k.value for k in cls)
            raise ValidationError(f"unknown conditioning kind {value!r} (expected one of {names})") from None


def hidden_width(channels: int) -> int:
    """Bottleneck width: a quarter of the channel count, at least 1."""
    return max(1, channels // 4)


def fc1_input_width(kind: ConditioningKind, channels: int, meta_dim: int) -> int:
    return {
        ConditioningKind.SE: channels,
        ConditioningKind.ME: meta_dim,
        ConditioningKind.SME: channels + meta_dim,
        ConditioningKind.FILM: meta_dim,
    }[kind]


@dataclass
class ConditioningBlock:
    kind: ConditioningKind
    channels: int
    meta_dim: int
    hidden: int
    fc1_weight: Tensor
    fc1_bias: Tensor
    fc2_weight: Tensor
    fc2_bias: Tensor
    name: str = field(default="cond")

    def parameters(self, prefix: str | None = None) -> list[Parameter]:
        p = prefix if prefix is not None else self.name
        return [
            Parameter(f"{p}.fc1.weight", self.fc1_weight),
            Parameter(f"{p}.fc1.bias", self.fc1_bias),
            Parameter(f"{p}.fc2.weight", self.fc2_weight),
            Parameter(f"{p}.fc2.bias", self.fc2_bias),
        ]

    def __call__(self, x: Tensor, meta: Tensor | None = None) -> Tensor:
        return apply_block(self, x, meta)


def _uniform(rng: np.random.Generator, bound: float, shape) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape)


def make_block(kind, channels: int, meta_dim: int, rng: np.random.Generator,
               name: str = "cond") -> ConditioningBlock:
    """Build a block with fc1 Kaiming-uniform, fc2 Xavier-uniform, zero biases.

    FiLM starts as the identity: fc2 weights are zero and the bias is one on
    the scale half, zero on the shift half.
    """
    kind = ConditioningKind.parse(kind)
    if kind is ConditioningKind.NONE:
        raise ValidationError("no block is built for conditioning kind 'none'")
    if channels < 1:
        raise ValidationError(f"channels must be >= 1, got {channels}")
    if meta_dim < 0:
        raise ValidationError(f"meta_dim must be >= 0, got {meta_dim}")
    if kind.uses_metadata and meta_dim == 0:
        raise MetadataError(f"{kind.value} blocks need meta_dim > 0")
    hidden = hidden_width(channels)
    n_in = fc1_input_width(kind, channels, meta_dim)
    n_out = 2 * channels if kind is ConditioningKind.FILM else channels

    fc1_w = _uniform(rng, np.sqrt(6.0 / n_in), (hidden, n_in))
    if kind is ConditioningKind.FILM:
        fc2_w = np.zeros((n_out, hidden))
        fc2_b = np.concatenate([np.ones(channels), np.zeros(channels)])
    else:
        fc2_w = _uniform(rng, np.sqrt(6.0 / (hidden + n_out)), (n_out, hidden))
        fc2_b = np.zeros(n_out)
    return ConditioningBlock(
        kind=kind,
        channels=channels,
        meta_dim=meta_dim if kind.uses_metadata else 0,
        hidden=hidden,
        fc1_weight=Tensor(fc1_w, requires_grad=True),
        fc1_bias=Tensor(np.zeros(hidden), requires_grad=True),
        fc2_weight=Tensor(fc2_w, requires_grad=True),
        fc2_bias=Tensor(fc2_b, requires_grad=True),
        name=name,
    )


def _check(block: ConditioningBlock, x: Tensor, meta: Tensor | None, kind: ConditioningKind) -> None:
    if block.kind is not kind:
        raise ValidationError(f"block is {block.kind.value}, not {kind.value}")
    if x.ndim != 4 or x.shape[1] != block.channels:
        raise ShapeError(
            f"{kind.value} block expects {block.channels} channels, got input shape {x.shape}", dim="C"
        )
    if kind.uses_metadata:
        if meta is None:
            raise MetadataError(f"{kind.value} block needs a metadata vector")
        if meta.ndim != 2 or meta.shape[1] != block.meta_dim:
            raise MetadataError(f"{kind.value} block expects metadata width {block.meta_dim}, got {meta.shape}")
        if meta.shape[0] != x.shape[0]:
            raise ShapeError(f"metadata batch {meta.shape[0]} != image batch {x.shape[0]}", dim="B")


def _excite(block: ConditioningBlock, z: Tensor) -> Tensor:
    h = ad.relu(ad.linear(z, block.fc1_weight, block.fc1_bias))
    return ad.linear(h, block.fc2_weight, block.fc2_bias)


def se_forward(block: ConditioningBlock, x: Tensor) -> Tensor:
    _check(block, x, None, ConditioningKind.SE)
    gate = ad.sigmoid(_excite(block, ad.global_avg_pool(x)))
    return ad.channel_scale(x, gate)


def me_forward(block: ConditioningBlock, x: Tensor, meta: Tensor) -> Tensor:
    _check(block, x, meta, ConditioningKind.ME)
    gate = ad.sigmoid(_excite(block, meta))
    return ad.channel_scale(x, gate)


def sme_forward(block: ConditioningBlock, x: Tensor, meta: Tensor) -> Tensor:
    _check(block, x, meta, ConditioningKind.SME)
    gate = ad.sigmoid(_excite(block, ad.concat_vec(ad.global_avg_pool(x), meta)))
    return ad.channel_scale(x, gate)


def film_forward(block: ConditioningBlock, x: Tensor, meta: Tensor) -> Tensor:
    _check(block, x, meta, ConditioningKind.FILM)
    params = _excite(block, meta)
    c = block.channels
    gamma = ad.slice_vec(params, 0, c)
    beta = ad.slice_vec(params, c, 2 * c)
    return ad.channel_shift(ad.channel_scale(x, gamma), beta)


def apply_block(block: ConditioningBlock, x: Tensor, meta: Tensor | None = None) -> Tensor:
    kind = block.kind
    if kind is ConditioningKind.SE:
        return se_forward(block, x)
    if kind is ConditioningKind.ME:
        return me_forward(block, x, meta)
    if kind is ConditioningKind.SME:
        return sme_forward(block, x, meta)
    return film_forward(block, x, meta)


def block_param_count(kind, channels: int, meta_dim: int) -> int:
    """Closed-form number of scalars in one block."""
    kind = ConditioningKind.parse(kind)
    if kind is ConditioningKind.NONE:
        return 0
    h = hidden_width(channels)
    n_in = fc1_input_width(kind, channels, meta_dim)
    n_out = 2 * channels if kind is ConditioningKind.FILM else channels
    return n_in * h + h + h * n_out + n_out
