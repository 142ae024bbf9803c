"""On-disk formats: the CSEG tensor container, dataset manifests, PGM export.

CSEG layout (all little-endian)::

    b"CSEG" | u16 format version | u8 dtype tag | u8 rank | u32 extent * rank | payload
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import CorruptFileError, ValidationError
from .metadata import MetadataSchema
from .synth import Dataset, Sample, regenerate

MAGIC = b"CSEG"
FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("u1"), 4: np.dtype("<i4")}
_TAGS = {(dt.kind, dt.itemsize): tag for tag, dt in _DTYPES.items()}


def encode_tensor(array) -> bytes:
    a = np.asarray(array)
    tag = _TAGS.get((a.dtype.kind, a.dtype.itemsize))
    if tag is None:
        raise ValidationError(f"CSEG cannot store dtype {a.dtype}")
    header = MAGIC + struct.pack("<HBB", FORMAT_VERSION, tag, a.ndim)
    header += struct.pack(f"<{a.ndim}I", *a.shape)
    return header + np.ascontiguousarray(a, dtype=_DTYPES[tag]).tobytes()


def decode_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one container starting at ``offset``; return (array, end offset)."""
    if buf[offset:offset + 4] != MAGIC:
        raise CorruptFileError("not a CSEG container (bad magic)")
    if len(buf) < offset + 8:
        raise CorruptFileError("truncated CSEG header")
    version, tag, rank = struct.unpack_from("<HBB", buf, offset + 4)
    if version != FORMAT_VERSION:
        raise CorruptFileError(f"unsupported CSEG version {version}")
    if tag not in _DTYPES:
        raise CorruptFileError(f"unknown CSEG dtype tag {tag}")
    pos = offset + 8
    if len(buf) < pos + 4 * rank:
        raise CorruptFileError("truncated CSEG extents")
    shape = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    dt = _DTYPES[tag]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    if len(buf) < pos + nbytes:
        raise CorruptFileError("truncated CSEG payload")
    arr = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(shape).copy()
    return arr, pos + nbytes


def write_tensor(path, array) -> None:
    Path(path).write_bytes(encode_tensor(array))


def read_tensor(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = decode_tensor(buf)
    if end != len(buf):
        raise CorruptFileError(f"{path}: trailing bytes after CSEG payload")
    return arr


def write_pgm(path, image) -> None:
    """8-bit binary PGM of a 2-D array scaled from [0, 1]."""
    a = np.asarray(image, dtype=float)
    if a.ndim == 3 and a.shape[0] == 1:
        a = a[0]
    if a.ndim != 2:
        raise ValidationError("PGM export needs a single 2-D plane")
    px = np.clip(np.round(a * 255), 0, 255).astype(np.uint8)
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (px.shape[1], px.shape[0]) + px.tobytes())


def save_dataset(dataset: Dataset, out_dir, pgm: bool = False) -> Path:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(exist_ok=True)
    if pgm:
        (out / "pgm").mkdir(exist_ok=True)
    index = []
    written_images: set[str] = set()
    for s in dataset.samples:
        img_rel = f"images/{s.image_id}.cseg"
        mask_rel = f"masks/{s.sample_id}.cseg"
        if s.image_id not in written_images:
            write_tensor(out / img_rel, s.image.astype(np.float32))
            written_images.add(s.image_id)
            if pgm:
                write_pgm(out / "pgm" / f"{s.image_id}.pgm", s.image)
        write_tensor(out / mask_rel, s.mask.astype(np.uint8))
        if pgm:
            write_pgm(out / "pgm" / f"{s.sample_id}.mask.pgm", s.mask.max(axis=0))
        index.append({"id": s.sample_id, "image_id": s.image_id, "split": s.split,
                      "subset": s.subset_tag, "record": s.record, "image": img_rel, "mask": mask_rel})
    manifest = {
        "format": "condseg-dataset",
        "format_version": FORMAT_VERSION,
        "generator": {"name": dataset.name, "version": dataset.version, "seed": dataset.seed,
                      "params": dataset.params},
        "schema": dataset.schema.to_dict(),
        "counts": dataset.counts(),
        "samples": index,
    }
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def read_manifest(data_dir) -> dict:
    path = Path(data_dir) / MANIFEST_NAME
    if not path.exists():
        raise ValidationError(f"no {MANIFEST_NAME} in {data_dir}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CorruptFileError(f"{path}: {exc}") from None
    if manifest.get("format") != "condseg-dataset":
        raise ValidationError(f"{path} is not a condseg dataset manifest")
    return manifest


def load_dataset(data_dir) -> Dataset:
    """Read a dataset written by :func:`save_dataset`, checking declared counts."""
    root = Path(data_dir)
    manifest = read_manifest(root)
    schema = MetadataSchema.from_dict(manifest["schema"])
    images: dict[str, np.ndarray] = {}
    samples = []
    for e in manifest["samples"]:
        if e["image_id"] not in images:
            images[e["image_id"]] = read_tensor(root / e["image"])
        samples.append(Sample(images[e["image_id"]], read_tensor(root / e["mask"]), dict(e["record"]),
                              e["subset"], e["split"], e["id"], e["image_id"]))
    gen = manifest["generator"]
    ds = Dataset(gen["name"], schema, samples, gen["seed"], gen["params"], gen["version"])
    if ds.counts() != manifest["counts"]:
        raise CorruptFileError("manifest counts do not match the sample index")
    return ds


def regenerate_from_manifest(data_dir) -> Dataset:
    gen = read_manifest(data_dir)["generator"]
    return regenerate(gen["name"], gen["seed"], gen["params"])
