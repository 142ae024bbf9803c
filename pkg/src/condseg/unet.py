"""Small U-Net with one conditioning block after every double convolution."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .conditioning import ConditioningBlock, ConditioningKind, apply_block, make_block
from .errors import MetadataError, ShapeError, ValidationError


@dataclass
class UNetConfig:
    depth: int = 3
    base_channels: int = 16
    in_channels: int = 1
    out_channels: int = 1
    conditioning: ConditioningKind = ConditioningKind.NONE
    meta_dim: int = 0

    def __post_init__(self):
        self.conditioning = ConditioningKind.parse(self.conditioning)
        if self.depth < 1:
            raise ValidationError(f"depth must be >= 1, got {self.depth}")
        if self.base_channels < 4:
            raise ValidationError(f"base_channels must be >= 4, got {self.base_channels}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValidationError("in_channels and out_channels must be >= 1")
        if self.meta_dim < 0:
            raise ValidationError("meta_dim must be >= 0")
        if self.conditioning.uses_metadata and self.meta_dim == 0:
            raise ValidationError(f"conditioning {self.conditioning.value} needs meta_dim > 0")
        if not self.conditioning.uses_metadata:
            self.meta_dim = 0

    def channels(self, level: int) -> int:
        return self.base_channels * 2 ** level

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conditioning"] = self.conditioning.value
        return d


def _kaiming_conv(rng: np.random.Generator, cout: int, cin: int, k: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (cin * k * k))
    return rng.uniform(-bound, bound, size=(cout, cin, k, k))


@dataclass
class _Conv:
    weight: Tensor
    bias: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias, padding="same")


@dataclass
class _Stage:
    convs: list[_Conv]
    cond: ConditioningBlock | None
    up: _Conv | None = None


@dataclass
class ConditionedUNet:
    """Encoder-decoder network; construct through :func:`build_unet`."""

    config: UNetConfig
    encoder: list[_Stage]
    bottleneck: _Stage
    decoder: list[_Stage]  # decoder[i] sits at resolution level i
    head: _Conv
    _registry: dict[str, Tensor] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._registry = {p.name: p.tensor for p in self._walk()}

    def _walk(self) -> list[Parameter]:
        out: list[Parameter] = []

        def stage(prefix: str, s: _Stage):
            if s.up is not None:
                out.append(Parameter(f"{prefix}.up.weight", s.up.weight))
                out.append(Parameter(f"{prefix}.up.bias", s.up.bias))
            for j, conv in enumerate(s.convs, start=1):
                out.append(Parameter(f"{prefix}.conv{j}.weight", conv.weight))
                out.append(Parameter(f"{prefix}.conv{j}.bias", conv.bias))
            if s.cond is not None:
                out.extend(s.cond.parameters(f"{prefix}.cond"))

        for i, s in enumerate(self.encoder):
            stage(f"enc{i}", s)
        stage("bottleneck", self.bottleneck)
        for i in reversed(range(len(self.decoder))):
            stage(f"dec{i}", self.decoder[i])
        out.append(Parameter("head.weight", self.head.weight))
        out.append(Parameter("head.bias", self.head.bias))
        return out

    def parameters(self) -> list[Parameter]:
        return [Parameter(n, t) for n, t in self._registry.items()]

    def named_tensors(self) -> dict[str, Tensor]:
        return dict(self._registry)

    def conditioning_blocks(self) -> list[ConditioningBlock]:
        stages = [*self.encoder, self.bottleneck, *reversed(self.decoder)]
        return [s.cond for s in stages if s.cond is not None]

    def n_parameters(self) -> int:
        return sum(t.data.size for t in self._registry.values())

    @property
    def dtype(self):
        return self.head.weight.dtype

    def zero_grad(self) -> None:
        for t in self._registry.values():
            t.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._registry.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        """Copy arrays into the parameters, checking names and shapes first."""
        for name, t in self._registry.items():
            if name not in state:
                raise ShapeError(f"state is missing parameter {name!r}", dim=name)
            if tuple(state[name].shape) != t.shape:
                raise ShapeError(
                    f"parameter {name!r}: stored shape {tuple(state[name].shape)} != model shape {t.shape}",
                    dim=name,
                )
        extra = set(state) - set(self._registry)
        if extra:
            raise ShapeError(f"state has unknown parameter {sorted(extra)[0]!r}", dim=sorted(extra)[0])
        for name, t in self._registry.items():
            t.data[...] = state[name]

    def forward(self, image, meta=None) -> Tensor:
        """Logits of shape (B, out_channels, H, W); no final activation."""
        return forward(self, image, meta)

    __call__ = forward

    def with_metadata(self, meta):
        """Bind a fixed metadata batch; the result maps images to logits."""
        bound = _as_meta(self, meta)
        return lambda image: forward(self, image, bound)


def build_unet(config: UNetConfig, rng: np.random.Generator | int) -> ConditionedUNet:
    """Deterministically initialise a network from ``rng`` (or an int seed)."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    kind = config.conditioning

    def conv(cin: int, cout: int, k: int = 3) -> _Conv:
        return _Conv(
            Tensor(_kaiming_conv(rng, cout, cin, k), requires_grad=True),
            Tensor(np.zeros(cout), requires_grad=True),
        )

    def block(c: int) -> ConditioningBlock | None:
        if kind is ConditioningKind.NONE:
            return None
        return make_block(kind, c, config.meta_dim, rng)

    encoder = []
    cin = config.in_channels
    for level in range(config.depth):
        c = config.channels(level)
        encoder.append(_Stage([conv(cin, c), conv(c, c)], block(c)))
        cin = c
    cb = config.channels(config.depth)
    bottleneck = _Stage([conv(cin, cb), conv(cb, cb)], block(cb))
    decoder: list[_Stage | None] = [None] * config.depth
    for level in reversed(range(config.depth)):
        c = config.channels(level)
        up = conv(config.channels(level + 1), c)
        decoder[level] = _Stage([conv(2 * c, c), conv(c, c)], block(c), up=up)
    head = conv(config.channels(0), config.out_channels, k=1)
    return ConditionedUNet(config, encoder, bottleneck, decoder, head)


def _as_meta(model: ConditionedUNet, meta) -> Tensor | None:
    kind = model.config.conditioning
    if not kind.uses_metadata:
        if meta is not None:
            raise MetadataError(f"a {kind.value} model takes no metadata")
        return None
    if meta is None:
        raise MetadataError(f"a {kind.value} model needs metadata")
    meta = meta if isinstance(meta, Tensor) else Tensor(meta, dtype=model.dtype)
    if meta.ndim != 2 or meta.shape[1] != model.config.meta_dim:
        raise MetadataError(f"metadata must be (B, {model.config.meta_dim}), got {meta.shape}")
    return meta


def _run_stage(s: _Stage, x: Tensor, meta: Tensor | None) -> Tensor:
    for conv in s.convs:
        x = ad.relu(conv(x))
    if s.cond is not None:
        x = apply_block(s.cond, x, meta)
    return x


def forward(model: ConditionedUNet, image, meta=None) -> Tensor:
    cfg = model.config
    x = image if isinstance(image, Tensor) else Tensor(image, dtype=model.dtype)
    if x.ndim != 4:
        raise ShapeError(f"image batch must be (B, C, H, W), got {x.shape}", dim="rank")
    if x.shape[1] != cfg.in_channels:
        raise ShapeError(f"expected {cfg.in_channels} input channels, got {x.shape[1]}", dim="C")
    step = 2 ** cfg.depth
    for dim, n in (("H", x.shape[2]), ("W", x.shape[3])):
        if n % step:
            raise ShapeError(f"{dim}={n} is not divisible by 2**depth={step}", dim=dim)
    meta = _as_meta(model, meta)
    if meta is not None and meta.shape[0] != x.shape[0]:
        raise ShapeError(f"metadata batch {meta.shape[0]} != image batch {x.shape[0]}", dim="B")

    skips = []
    for s in model.encoder:
        x = _run_stage(s, x, meta)
        skips.append(x)
        x = ad.maxpool2(x)
    x = _run_stage(model.bottleneck, x, meta)
    for level in reversed(range(cfg.depth)):
        s = model.decoder[level]
        x = s.up(ad.upsample_nearest2(x))
        x = ad.concat_channels(skips[level], x)
        x = _run_stage(s, x, meta)
    return model.head(x)


def predict_proba(model: ConditionedUNet, image, meta=None) -> np.ndarray:
    with ad.no_grad():
        logits = forward(model, image, meta).data
    return ad._stable_sigmoid(logits)


def predict_mask(model: ConditionedUNet, image, meta=None, threshold: float = 0.5) -> np.ndarray:
    """Binary mask: sigmoid(logits) >= threshold (ties count as positive)."""
    return (predict_proba(model, image, meta) >= threshold).astype(np.uint8)
