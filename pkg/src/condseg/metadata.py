"""Metadata schemas: records in, fixed-length float vectors out.

Categorical fields become one-hot blocks in declared class order; continuous
fields are min-max scaled to [0, 1]. Fields are concatenated in schema order.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Mapping, Sequence, Union

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .errors import MetadataError, ValidationError

logger = logging.getLogger(__name__)

Record = Mapping[str, Union[str, float]]


@dataclass(frozen=True)
class Categorical:
    name: str
    class_names: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "class_names", tuple(self.class_names))
        if not self.class_names:
            raise ValidationError(f"categorical field {self.name!r} has no classes")
        if len(set(self.class_names)) != len(self.class_names):
            raise ValidationError(f"categorical field {self.name!r} has duplicate class names")

    @property
    def dim(self) -> int:
        return len(self.class_names)

    def to_dict(self) -> dict:
        return {"type": "categorical", "name": self.name, "classes": list(self.class_names)}


@dataclass(frozen=True)
class Continuous:
    name: str
    min: float
    max: float

    def __post_init__(self):
        if not self.min < self.max:
            raise ValidationError(f"continuous field {self.name!r} needs min < max")

    @property
    def dim(self) -> int:
        return 1

    def to_dict(self) -> dict:
        return {"type": "continuous", "name": self.name, "min": self.min, "max": self.max}


Field = Union[Categorical, Continuous]


@dataclass(frozen=True)
class MetadataSchema:
    fields: tuple[Field, ...]

    def __post_init__(self):
        object.__setattr__(self, "fields", tuple(self.fields))
        names = [f.name for f in self.fields]
        if len(set(names)) != len(names):
            raise ValidationError("metadata field names must be unique")
        if self.total_dim < 1:
            raise ValidationError("metadata schema must encode at least one value")

    @property
    def total_dim(self) -> int:
        return sum(f.dim for f in self.fields)

    def field(self, name: str) -> Field:
        for f in self.fields:
            if f.name == name:
                return f
        raise MetadataError(f"schema has no field {name!r}")

    def to_dict(self) -> dict:
        return {"fields": [f.to_dict() for f in self.fields]}

    @classmethod
    def from_dict(cls, d: Mapping) -> "MetadataSchema":
        fields: list[Field] = []
        for f in d["fields"]:
            if f["type"] == "categorical":
                fields.append(Categorical(f["name"], tuple(f["classes"])))
            elif f["type"] == "continuous":
                fields.append(Continuous(f["name"], float(f["min"]), float(f["max"])))
            else:
                raise ValidationError(f"unknown metadata field type {f['type']!r}")
        return cls(tuple(fields))


def encode(schema: MetadataSchema, record: Record) -> np.ndarray:
    """Vector of length ``schema.total_dim`` for one record."""
    parts = []
    for f in schema.fields:
        if f.name not in record:
            raise MetadataError(f"record is missing field {f.name!r}")
        value = record[f.name]
        if isinstance(f, Categorical):
            if value not in f.class_names:
                raise MetadataError(f"unknown class {value!r} for field {f.name!r}")
            one_hot = np.zeros(f.dim)
            one_hot[f.class_names.index(value)] = 1.0
            parts.append(one_hot)
        else:
            v = float(value)
            if math.isnan(v):
                raise MetadataError(f"field {f.name!r} is NaN")
            if v < f.min or v > f.max:
                logger.warning("clamping %s=%g into [%g, %g]", f.name, v, f.min, f.max)
                v = min(max(v, f.min), f.max)
            parts.append(np.array([(v - f.min) / (f.max - f.min)]))
    return np.concatenate(parts)


def encode_batch(schema: MetadataSchema, records: Sequence[Record]) -> np.ndarray:
    if not records:
        return np.zeros((0, schema.total_dim))
    return np.stack([encode(schema, r) for r in records])


def dummy(schema: MetadataSchema) -> np.ndarray:
    """The all-zeros control vector."""
    return np.zeros(schema.total_dim)


def _categorical_field(schema: MetadataSchema, field: str | None) -> Categorical:
    if field is not None:
        f = schema.field(field)
        if not isinstance(f, Categorical):
            raise MetadataError(f"field {field!r} is not categorical")
        return f
    cats = [f for f in schema.fields if isinstance(f, Categorical)]
    if len(cats) != 1:
        raise MetadataError("name the categorical field to permute")
    return cats[0]


def permutation_map(schema: MetadataSchema, permutation, field: str | None = None) -> dict[str, str]:
    """Normalise a permutation to a full class-name -> class-name mapping.

    ``permutation`` is either a sequence of class indices (``perm[i]`` is
    the new index of class ``i``) or a partial mapping of class names; names
    that are not mentioned map to themselves.
    """
    f = _categorical_field(schema, field)
    names = f.class_names
    if isinstance(permutation, Mapping):
        mapping = {n: n for n in names}
        for a, b in permutation.items():
            if a not in names or b not in names:
                raise MetadataError(f"permutation mentions unknown class ({a!r} -> {b!r})")
            mapping[a] = b
    else:
        perm = list(permutation)
        if len(perm) != len(names):
            raise MetadataError(f"permutation has {len(perm)} entries, field {f.name!r} has {len(names)} classes")
        try:
            mapping = {names[i]: names[j] for i, j in enumerate(perm)}
        except (IndexError, TypeError):
            raise MetadataError(f"invalid index permutation {perm!r}") from None
    if sorted(mapping.values()) != sorted(names):
        raise MetadataError(f"permutation is not a bijection over {names}")
    return mapping


def parse_permutation(text: str) -> dict[str, str]:
    """``"a:b,b:a"`` -> ``{"a": "b", "b": "a"}``"""
    mapping = {}
    for item in filter(None, (s.strip() for s in text.split(","))):
        if ":" not in item:
            raise MetadataError(f"bad permutation item {item!r}; expected src:dst")
        a, b = (s.strip() for s in item.split(":", 1))
        mapping[a] = b
    return mapping


def swap(schema: MetadataSchema, record: Record, permutation, field: str | None = None) -> dict:
    """Copy of ``record`` with its categorical label relabelled."""
    f = _categorical_field(schema, field)
    mapping = permutation_map(schema, permutation, f.name)
    out = dict(record)
    out[f.name] = mapping[record[f.name]]
    return out


class MetadataEncoder(TransformerMixin, BaseEstimator):
    """Transformer from records to metadata vectors.

    ``mode`` is ``"correct"``, ``"dummy"`` or ``"swap"`` (the latter with
    ``permutation``). ``fit`` only validates the configuration.
    """

    def __init__(self, schema: MetadataSchema | None = None, mode: str = "correct",
                 permutation=None, field: str | None = None):
        self.schema = schema
        self.mode = mode
        self.permutation = permutation
        self.field = field

    def fit(self, records=None, y=None):
        if self.schema is None:
            raise ValidationError("MetadataEncoder needs a schema")
        if self.mode not in ("correct", "dummy", "swap"):
            raise ValidationError(f"unknown metadata mode {self.mode!r}")
        if self.mode == "swap":
            if self.permutation is None:
                raise ValidationError("swap mode needs a permutation")
            self.mapping_ = permutation_map(self.schema, self.permutation, self.field)
        self.n_features_out_ = self.schema.total_dim
        return self

    def transform(self, records) -> np.ndarray:
        if not hasattr(self, "n_features_out_"):
            self.fit()
        records = list(records)
        if self.mode == "dummy":
            return np.zeros((len(records), self.schema.total_dim))
        if self.mode == "swap":
            records = [swap(self.schema, r, self.mapping_, self.field) for r in records]
        return encode_batch(self.schema, records)
