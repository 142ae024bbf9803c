"""Deterministic synthetic segmentation datasets.

Four generators cover the experiments: several visual domains of one blob
task (``gen_domains``), mixed annotation coarseness (``gen_annotation_styles``),
a majority/minority task pair on shared images (``gen_multitask``), and lesions
whose size is given as continuous metadata (``gen_continuous``).

Every sample draws from its own generator seeded by
``(seed, stream, split, index)``, so output does not depend on generation
order or thread count.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ValidationError
from .metadata import Categorical, Continuous, MetadataSchema, encode_batch
from .polygon import polygonize_mask

GENERATOR_VERSION = 1
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class Style:
    """Texture parameters of one visual domain."""

    name: str
    bg: float
    fg: float
    noise: float
    axis_ratio: float = 1.0  # minor/major axis of the blobs
    radius: tuple[float, float] = (3.0, 5.0)
    count: tuple[int, int] = (2, 5)
    texture: float = 0.05  # amplitude of the smooth background field


DOMAIN_STYLES: tuple[Style, ...] = (
    Style("bright", bg=0.20, fg=0.70, noise=0.08),
    Style("dark", bg=0.75, fg=0.30, noise=0.08),
    Style("faint", bg=0.40, fg=0.55, noise=0.06, texture=0.04),
    Style("grainy", bg=0.30, fg=0.70, noise=0.20),
    Style("elongated", bg=0.25, fg=0.60, noise=0.10, axis_ratio=0.45, radius=(3.5, 6.5)),
    Style("small", bg=0.55, fg=0.85, noise=0.10, axis_ratio=0.8, radius=(2.0, 3.5), count=(3, 7)),
    Style("murky", bg=0.60, fg=0.35, noise=0.15, axis_ratio=0.7, texture=0.10),
)

# large round objects so that polygonization at a few pixels stays meaningful
STENCIL_BASE_STYLE = Style("stencil", bg=0.25, fg=0.65, noise=0.10, radius=(4.5, 7.5), count=(2, 4))


@dataclass(frozen=True)
class SceneSpec:
    size: int = 64
    style: Style = DOMAIN_STYLES[0]
    seed: int = 0

    def __post_init__(self):
        if self.size < 8:
            raise ValidationError("scene size must be >= 8")
        if 2 * self.style.radius[1] >= self.size:
            raise ValidationError("blob radii must fit inside the image")
        for v in (self.style.bg, self.style.fg):
            if not 0.0 <= v <= 1.0:
                raise ValidationError("style intensities must lie in [0, 1]")


@dataclass
class Sample:
    image: np.ndarray  # (1, H, W) float32
    mask: np.ndarray  # (K, H, W) uint8
    record: dict
    subset_tag: str
    split: str
    sample_id: str
    image_id: str


@dataclass
class Dataset:
    """Samples plus everything needed to regenerate them bit-for-bit."""

    name: str
    schema: MetadataSchema
    samples: list[Sample]
    seed: int
    params: dict = field(default_factory=dict)
    version: int = GENERATOR_VERSION

    def split(self, name: str, tags: Iterable[str] | None = None) -> list[Sample]:
        tags = None if tags is None else set(tags)
        return [s for s in self.samples if s.split == name and (tags is None or s.subset_tag in tags)]

    @property
    def tags(self) -> list[str]:
        seen: dict[str, None] = {}
        for s in self.samples:
            seen.setdefault(s.subset_tag, None)
        return list(seen)

    def counts(self) -> dict[str, dict[str, int]]:
        out: dict[str, dict[str, int]] = {}
        for sp in SPLITS:
            c = Counter(s.subset_tag for s in self.samples if s.split == sp)
            out[sp] = {t: c[t] for t in self.tags if c[t]}
        return out


def stack_images(samples: Sequence[Sample]) -> np.ndarray:
    return np.stack([s.image for s in samples]).astype(np.float32)


def stack_masks(samples: Sequence[Sample]) -> np.ndarray:
    return np.stack([s.mask for s in samples]).astype(np.float32)


def stack_meta(schema: MetadataSchema, samples: Sequence[Sample]) -> np.ndarray:
    return encode_batch(schema, [s.record for s in samples])


def _rng(seed: int, stream: int, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, stream, SPLITS.index(split), index]))


def _smooth_field(rng: np.random.Generator, size: int) -> np.ndarray:
    """Low-frequency field in [-1, 1] from a few random cosine waves."""
    yy, xx = np.mgrid[:size, :size] / size
    out = np.zeros((size, size))
    for _ in range(3):
        fy, fx = rng.uniform(0.3, 1.5, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        out += np.cos(2 * np.pi * (fy * yy + fx * xx) + phase)
    return out / 3.0


def _ellipse(size: int, cy: float, cx: float, ry: float, rx: float, angle: float) -> np.ndarray:
    yy, xx = np.mgrid[:size, :size]
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(angle), np.sin(angle)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def _blob_mask(rng: np.random.Generator, size: int, style: Style, avoid: np.ndarray | None = None,
               tries: int = 20) -> np.ndarray:
    """Union of random ellipses; with ``avoid``, blobs touching it are redrawn."""
    mask = np.zeros((size, size), dtype=bool)
    for _ in range(int(rng.integers(style.count[0], style.count[1] + 1))):
        for _ in range(tries):
            r = rng.uniform(*style.radius)
            rx, ry = r, max(1.0, r * style.axis_ratio)
            margin = r + 1
            cy, cx = rng.uniform(margin, size - 1 - margin, size=2)
            blob = _ellipse(size, cy, cx, ry, rx, rng.uniform(0, np.pi))
            if avoid is None or not (blob & avoid).any():
                mask |= blob
                break
    return mask


def render_scene(spec: SceneSpec, rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    """One blob image and its mask, both (H, W)."""
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    st, size = spec.style, spec.size
    mask = _blob_mask(rng, size, st)
    image = st.bg + (st.fg - st.bg) * mask + st.texture * _smooth_field(rng, size)
    image = image + rng.normal(0.0, st.noise, size=(size, size))
    return np.clip(image, 0.0, 1.0).astype(np.float32), mask.astype(np.uint8)


def _split_counts(counts) -> dict[str, int]:
    if isinstance(counts, int):
        counts = {"train": counts, "val": max(1, counts // 4), "test": max(1, counts // 4)}
    out = {sp: int(counts.get(sp, 0)) for sp in SPLITS}
    if any(v < 0 for v in out.values()):
        raise ValidationError("split counts must be >= 0")
    return out


# ------------------------------------------------------------------ domains


def gen_domains(styles: int = 7, per_style=None, seed: int = 0, size: int = 32) -> Dataset:
    """Blob segmentation in ``styles`` visual domains, one-hot domain metadata."""
    if not 2 <= styles <= len(DOMAIN_STYLES):
        raise ValidationError(f"styles must be between 2 and {len(DOMAIN_STYLES)}")
    per_style = _split_counts(per_style or {"train": 64, "val": 16, "test": 16})
    table = DOMAIN_STYLES[:styles]
    schema = MetadataSchema((Categorical("domain", tuple(s.name for s in table)),))
    samples = []
    for split in SPLITS:
        for k, style in enumerate(table):
            spec = SceneSpec(size=size, style=style, seed=seed)
            for i in range(per_style[split]):
                image, mask = render_scene(spec, _rng(seed, 1000 + k, split, i))
                sid = f"{split}-{style.name}-{i:04d}"
                samples.append(Sample(image[None], mask[None], {"domain": style.name},
                                      style.name, split, sid, sid))
    return Dataset("domains", schema, samples, seed,
                   {"styles": styles, "per_style": per_style, "size": size})


def gen_blobs(counts=None, seed: int = 0, size: int = 32, style: Style = STENCIL_BASE_STYLE) -> Dataset:
    """Single-domain blob dataset; the base for annotation styles."""
    counts = _split_counts(counts or {"train": 96, "val": 24, "test": 32})
    spec = SceneSpec(size=size, style=style, seed=seed)
    schema = MetadataSchema((Categorical("style", ("accurate",)),))
    samples = []
    for split in SPLITS:
        for i in range(counts[split]):
            image, mask = render_scene(spec, _rng(seed, 1, split, i))
            sid = f"{split}-{i:04d}"
            samples.append(Sample(image[None], mask[None], {"style": "accurate"}, "accurate", split, sid, sid))
    return Dataset("blobs", schema, samples, seed, {"counts": counts, "size": size})


# --------------------------------------------------------- annotation styles

ANNOTATION_STYLES = ("accurate", "fine", "coarse")


def gen_annotation_styles(base: Dataset, seed: int = 0,
                          tolerances: tuple[float, float, float] = (0.0, 2.0, 3.5)) -> Dataset:
    """Degrade two thirds of the training masks by polygonization.

    The shuffled training split is cut into thirds labelled accurate / fine /
    coarse and redrawn at the matching tolerance; any remainder stays
    accurate. Validation and test masks are untouched and labelled accurate.
    """
    if len(tolerances) != 3:
        raise ValidationError("need three tolerances (accurate, fine, coarse)")
    schema = MetadataSchema((Categorical("style", ANNOTATION_STYLES),))
    train = base.split("train")
    order = np.random.default_rng(np.random.SeedSequence([seed, 2])).permutation(len(train))
    third = len(train) // 3
    style_of = {}
    for rank, idx in enumerate(order):
        k = rank // third if third else 0
        style_of[idx] = ANNOTATION_STYLES[k] if k < 3 else "accurate"
    samples = []
    for idx, s in enumerate(train):
        style = style_of[idx]
        tol = tolerances[ANNOTATION_STYLES.index(style)]
        mask = np.stack([polygonize_mask(m, tol) for m in s.mask])
        samples.append(Sample(s.image, mask, {"style": style}, style, "train", s.sample_id, s.image_id))
    for split in ("val", "test"):
        for s in base.split(split):
            samples.append(Sample(s.image, s.mask, {"style": "accurate"}, "accurate", split,
                                  s.sample_id, s.image_id))
    params = {"base": {"name": base.name, "seed": base.seed, "params": base.params},
              "tolerances": list(tolerances)}
    return Dataset("styles", schema, samples, seed, params)


# ---------------------------------------------------------------- multitask

TASKS = ("nuclei", "anomaly")
NUCLEUS_STYLE = Style("cells", bg=0.25, fg=0.65, noise=0.08, radius=(2.5, 4.5), count=(2, 5))


def _artifacts(rng: np.random.Generator, size: int, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Streaks and blotches: (intensity offset field, mask)."""
    yy, xx = np.mgrid[:size, :size]
    offset = np.zeros((size, size))
    mask = np.zeros((size, size), dtype=bool)
    for _ in range(n):
        if rng.random() < 0.5:
            # straight streak of width ~2 px across part of the image
            angle = rng.uniform(0, np.pi)
            cy, cx = rng.uniform(0.25 * size, 0.75 * size, size=2)
            half_len = rng.uniform(0.3, 0.6) * size
            dy, dx = yy - cy, xx - cx
            along = dx * np.cos(angle) + dy * np.sin(angle)
            across = -dx * np.sin(angle) + dy * np.cos(angle)
            m = (np.abs(across) <= 1.0) & (np.abs(along) <= half_len)
            offset[m] += 0.30
        else:
            r = rng.uniform(0.15, 0.25) * size
            cy, cx = rng.uniform(r, size - r, size=2)
            m = _ellipse(size, cy, cx, r * rng.uniform(0.6, 1.0), r, rng.uniform(0, np.pi))
            offset[m] -= 0.15
        mask |= m
    return offset, mask


def _multitask_scene(rng: np.random.Generator, size: int, n_artifacts: int):
    st = NUCLEUS_STYLE
    offset, anomaly = _artifacts(rng, size, n_artifacts)
    # nuclei keep a one-pixel gap from artifacts so the two masks never overlap
    grown = anomaly.copy()
    grown[1:] |= anomaly[:-1]
    grown[:-1] |= anomaly[1:]
    grown[:, 1:] |= anomaly[:, :-1]
    grown[:, :-1] |= anomaly[:, 1:]
    nuclei = _blob_mask(rng, size, st, avoid=grown)
    image = st.bg + (st.fg - st.bg) * nuclei + st.texture * _smooth_field(rng, size)
    image = image + offset + rng.normal(0.0, st.noise, size=(size, size))
    return np.clip(image, 0, 1).astype(np.float32), nuclei.astype(np.uint8), anomaly.astype(np.uint8)


def gen_multitask(seed: int = 0, nuclei_n: int = 400, anomaly_n: int = 48, multilabel_n: int | None = None,
                  val: tuple[int, int] = (48, 16), test: tuple[int, int] = (48, 24), size: int = 32,
                  artifact_rate: float = 0.5) -> Dataset:
    """Nuclei (majority) and anomaly (minority) masks selected by a task label.

    ``nuclei_n``/``anomaly_n`` are training counts; ``val``/``test`` give
    (nuclei, anomaly) counts. Every anomaly image carries at least one
    artifact. The first ``multilabel_n`` anomaly images of the training split
    (all of them in val/test) are also emitted as nuclei samples of the same
    image, forming the multilabel subset. Plain nuclei images show artifacts
    with probability ``artifact_rate`` but those are never labelled.
    """
    multilabel_n = anomaly_n if multilabel_n is None else multilabel_n
    if not 0 <= multilabel_n <= anomaly_n:
        raise ValidationError("multilabel_n must lie between 0 and anomaly_n")
    schema = MetadataSchema((Categorical("task", TASKS),))
    plan = {"train": (nuclei_n, anomaly_n, multilabel_n),
            "val": (val[0], val[1], val[1]),
            "test": (test[0], test[1], test[1])}
    samples = []
    for split, (n_nuc, n_anom, n_pair) in plan.items():
        if n_pair > n_nuc:
            raise ValidationError(f"{split}: multilabel images outnumber nuclei samples")
        for i in range(n_anom):
            rng = _rng(seed, 3, split, i)
            image, nuc, anom = _multitask_scene(rng, size, int(rng.integers(1, 3)))
            iid = f"{split}-a{i:04d}"
            samples.append(Sample(image[None], anom[None], {"task": "anomaly"}, "anomaly", split,
                                  f"{iid}-anomaly", iid))
            if i < n_pair:
                samples.append(Sample(image[None], nuc[None], {"task": "nuclei"}, "nuclei", split,
                                      f"{iid}-nuclei", iid))
        for i in range(n_nuc - n_pair):
            rng = _rng(seed, 4, split, i)
            n_art = int(rng.integers(1, 3)) if rng.random() < artifact_rate else 0
            image, nuc, _ = _multitask_scene(rng, size, n_art)
            iid = f"{split}-n{i:04d}"
            samples.append(Sample(image[None], nuc[None], {"task": "nuclei"}, "nuclei", split,
                                  f"{iid}-nuclei", iid))
    params = {"nuclei_n": nuclei_n, "anomaly_n": anomaly_n, "multilabel_n": multilabel_n,
              "val": list(val), "test": list(test), "size": size, "artifact_rate": artifact_rate}
    return Dataset("multitask", schema, samples, seed, params)


def multilabel_pairs(dataset: Dataset, split: str) -> list[tuple[Sample, Sample]]:
    """(nuclei, anomaly) sample pairs that share an image."""
    by_image: dict[str, dict[str, Sample]] = {}
    for s in dataset.split(split):
        by_image.setdefault(s.image_id, {})[s.subset_tag] = s
    return [(d["nuclei"], d["anomaly"]) for d in by_image.values() if len(d) == 2]


# --------------------------------------------------------------- continuous

LESION_RADIUS = (2.0, 7.0)


@dataclass(frozen=True)
class LesionScene:
    size: int
    organ: tuple[float, float, float, float, float]  # cy, cx, ry, rx, angle
    lesion_center: tuple[float, float]
    texture: np.ndarray = field(repr=False, compare=False)
    noise: np.ndarray = field(repr=False, compare=False)

    def render(self, radius: float, contrast: float = 0.10) -> tuple[np.ndarray, np.ndarray]:
        size = self.size
        organ = _ellipse(size, *self.organ)
        yy, xx = np.mgrid[:size, :size]
        cy, cx = self.lesion_center
        lesion = ((yy - cy) ** 2 + (xx - cx) ** 2 <= radius ** 2) & organ
        image = 0.15 + 0.30 * organ + contrast * lesion + 0.05 * self.texture + self.noise
        return np.clip(image, 0, 1).astype(np.float32), lesion.astype(np.uint8)


def _lesion_scene(rng: np.random.Generator, size: int) -> LesionScene:
    c = size / 2
    ry, rx = rng.uniform(0.36, 0.44, size=2) * size
    organ = (c + rng.uniform(-1, 1), c + rng.uniform(-1, 1), ry, rx, rng.uniform(0, np.pi))
    # lesion centre well inside the organ so the largest lesion stays inside
    ang = rng.uniform(0, 2 * np.pi)
    dist = rng.uniform(0, 0.25) * size
    centre = (organ[0] + dist * np.sin(ang), organ[1] + dist * np.cos(ang))
    return LesionScene(size, organ, centre, _smooth_field(rng, size), rng.normal(0, 0.06, size=(size, size)))


def gen_continuous(seed: int = 0, n: int = 160, val_n: int = 32, test_n: int = 48, size: int = 32) -> Dataset:
    """Faint lesions inside an organ; metadata is the lesion radius."""
    lo, hi = LESION_RADIUS
    schema = MetadataSchema((Continuous("size", lo, hi),))
    samples = []
    for split, count in zip(SPLITS, (n, val_n, test_n)):
        for i in range(count):
            rng = _rng(seed, 5, split, i)
            scene = _lesion_scene(rng, size)
            radius = float(rng.uniform(lo, hi))
            image, mask = scene.render(radius)
            sid = f"{split}-{i:04d}"
            samples.append(Sample(image[None], mask[None], {"size": radius}, "lesion", split, sid, sid))
    return Dataset("continuous", schema, samples, seed,
                   {"n": n, "val_n": val_n, "test_n": test_n, "size": size})


# ------------------------------------------------------------- regeneration


def regenerate(name: str, seed: int, params: dict) -> Dataset:
    """Rebuild a dataset from the (name, seed, params) echoed in a manifest."""
    p = dict(params)
    if name == "domains":
        return gen_domains(p["styles"], p["per_style"], seed, p["size"])
    if name == "blobs":
        return gen_blobs(p["counts"], seed, p["size"])
    if name == "styles":
        b = p["base"]
        base = regenerate(b["name"], b["seed"], b["params"])
        return gen_annotation_styles(base, seed, tuple(p["tolerances"]))
    if name == "multitask":
        return gen_multitask(seed, p["nuclei_n"], p["anomaly_n"], p["multilabel_n"],
                             tuple(p["val"]), tuple(p["test"]), p["size"], p["artifact_rate"])
    if name == "continuous":
        return gen_continuous(seed, p["n"], p["val_n"], p["test_n"], p["size"])
    raise ValidationError(f"unknown generator {name!r}")
