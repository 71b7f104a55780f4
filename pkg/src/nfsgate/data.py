"""Field schema, hashed ingestion, planted synthetic data, splits and batching."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .tensor_core import sigmoid

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
MASK64 = 0xFFFFFFFFFFFFFFFF
MISSING = "<MISSING>"
FIELD_SEP = "\x1f"


class DataFormatError(ValueError):
    pass


@dataclass(frozen=True)
class FieldSpec:
    name: str
    kind: str = "categorical"  # or "integer"
    vocab_size: int = 10000

    def __post_init__(self):
        if self.kind not in ("categorical", "integer"):
            raise ValueError(f"unknown field kind {self.kind!r}")
        if self.vocab_size < 2:
            raise ValueError(f"field {self.name!r}: vocab_size must be >= 2")


@dataclass(frozen=True)
class DatasetSchema:
    fields: tuple[FieldSpec, ...]
    label_column: str = "label"

    def __post_init__(self):
        object.__setattr__(self, "fields", tuple(self.fields))
        if not self.fields:
            raise ValueError("schema needs at least one field")
        names = [f.name for f in self.fields]
        if len(set(names)) != len(names):
            raise ValueError("field names must be unique")

    @property
    def num_fields(self) -> int:
        return len(self.fields)

    @property
    def vocab_sizes(self) -> list[int]:
        return [f.vocab_size for f in self.fields]

    @classmethod
    def uniform(cls, num_fields: int, vocab_size: int, kind: str = "categorical"):
        return cls(tuple(FieldSpec(f"f{i}", kind, vocab_size) for i in range(num_fields)))

    def to_dict(self) -> dict:
        return {"label_column": self.label_column,
                "fields": [{"name": f.name, "kind": f.kind, "vocab_size": f.vocab_size}
                           for f in self.fields]}

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSchema":
        return cls(tuple(FieldSpec(**f) for f in d["fields"]), d.get("label_column", "label"))


@dataclass
class ExampleBatch:
    indices: np.ndarray  # (batch, M) int64
    labels: np.ndarray   # (batch,) float64 in {0, 1}

    def __len__(self):
        return len(self.labels)


@dataclass
class Dataset:
    schema: DatasetSchema
    indices: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.indices = np.ascontiguousarray(self.indices, dtype=np.int64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.float64)
        if self.indices.ndim != 2 or self.indices.shape[1] != self.schema.num_fields:
            raise ValueError(f"indices shape {self.indices.shape} does not match "
                             f"{self.schema.num_fields} fields")
        if len(self.labels) != len(self.indices):
            raise ValueError("labels and indices disagree on row count")
        vocab = np.asarray(self.schema.vocab_sizes)
        if len(self.indices) and ((self.indices < 0).any() or (self.indices >= vocab).any()):
            raise ValueError("bucket index outside vocabulary range")

    def __len__(self):
        return len(self.labels)

    def subset(self, rows) -> "Dataset":
        return Dataset(self.schema, self.indices[rows], self.labels[rows])


@dataclass(frozen=True)
class PlantedSpec:
    informative_fields: tuple[int, ...]
    weight_scale: float = 2.0
    bias: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "informative_fields",
                           tuple(sorted(int(i) for i in self.informative_fields)))
        if not self.informative_fields:
            raise ValueError("planted spec needs at least one informative field")


@dataclass
class SyntheticDataset(Dataset):
    planted: PlantedSpec | None = None
    true_weights: dict[int, np.ndarray] = field(default_factory=dict)


def fnv1a_64(data: bytes) -> int:
    h = FNV_OFFSET
    for b in data:
        h ^= b
        h = (h * FNV_PRIME) & MASK64
    return h


def hash_value(field_name: str, raw: str, vocab_size: int) -> int:
    """Bucket id of ``raw`` within a field, salted with the field name."""
    if vocab_size < 2:
        raise ValueError("vocab_size must be >= 2")
    return fnv1a_64((field_name + FIELD_SEP + raw).encode("utf-8")) % vocab_size


def integer_bucket_key(value: str) -> str:
    return str(math.floor(math.log1p(max(int(value), 0))))


def load_delimited(path, schema: DatasetSchema, delimiter: str = "\t") -> Dataset:
    indices, labels = [], []
    m = schema.num_fields
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line:
                continue
            cols = line.split(delimiter)
            if len(cols) != m + 1:
                raise DataFormatError(f"line {lineno}: expected {m + 1} columns, got {len(cols)}")
            if cols[0] not in ("0", "1"):
                raise DataFormatError(f"line {lineno}: non-binary label {cols[0]!r}")
            row = []
            for spec, raw in zip(schema.fields, cols[1:]):
                if raw == "":
                    key = MISSING
                elif spec.kind == "integer":
                    try:
                        key = integer_bucket_key(raw)
                    except ValueError:
                        raise DataFormatError(
                            f"line {lineno}: field {spec.name!r} is not an integer: {raw!r}"
                        ) from None
                else:
                    key = raw
                row.append(hash_value(spec.name, key, spec.vocab_size))
            indices.append(row)
            labels.append(int(cols[0]))
    return Dataset(schema, np.asarray(indices, dtype=np.int64).reshape(-1, m),
                   np.asarray(labels, dtype=np.float64))


def generate_synthetic(num_fields: int, vocab_size: int, rows: int,
                       planted: PlantedSpec) -> SyntheticDataset:
    """Uniform bucket draws; only the planted fields move the click logit."""
    if rows < 1:
        raise ValueError("rows must be >= 1")
    if len(planted.informative_fields) > num_fields:
        raise ValueError("more informative fields than fields")
    if any(not 0 <= i < num_fields for i in planted.informative_fields):
        raise ValueError("informative field index out of range")
    rng = np.random.default_rng(planted.seed)
    weights = {i: rng.normal(0.0, planted.weight_scale, size=vocab_size)
               for i in planted.informative_fields}
    idx = rng.integers(0, vocab_size, size=(rows, num_fields))
    logit = np.full(rows, float(planted.bias))
    for i, w in weights.items():
        logit += w[idx[:, i]]
    labels = (rng.random(rows) < sigmoid(logit)).astype(np.float64)
    schema = DatasetSchema.uniform(num_fields, vocab_size)
    return SyntheticDataset(schema, idx, labels, planted=planted, true_weights=weights)


def export_synthetic(ds: SyntheticDataset, path, delimiter: str = "\t") -> Path:
    """Write bucket ids as raw tokens plus a ``.planted.json`` sidecar.

    Raw tokens are the decimal bucket ids; reloading re-hashes them, so the
    sidecar carries the schema and the true weight tables keyed by token.
    """
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for label, row in zip(ds.labels.astype(int), ds.indices):
            fh.write(delimiter.join([str(label), *map(str, row)]) + "\n")
    sidecar = {
        "schema": ds.schema.to_dict(),
        "rows": len(ds),
        "planted": None if ds.planted is None else {
            "informative_fields": list(ds.planted.informative_fields),
            "weight_scale": ds.planted.weight_scale,
            "bias": ds.planted.bias,
            "seed": ds.planted.seed,
        },
        "true_weights": {str(k): v.tolist() for k, v in ds.true_weights.items()},
    }
    side = sidecar_path(path)
    side.write_text(json.dumps(sidecar, indent=1))
    return side


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".planted.json")


def load_sidecar(path) -> tuple[DatasetSchema, PlantedSpec | None]:
    d = json.loads(sidecar_path(path).read_text())
    planted = None if d.get("planted") is None else PlantedSpec(
        tuple(d["planted"]["informative_fields"]), d["planted"]["weight_scale"],
        d["planted"]["bias"], d["planted"]["seed"])
    return DatasetSchema.from_dict(d["schema"]), planted


def split(ds: Dataset, ratios: Sequence[float], seed: int) -> list[Dataset]:
    """Seeded shuffle then contiguous slices proportional to ``ratios``."""
    ratios = np.asarray(ratios, dtype=np.float64)
    if ratios.ndim != 1 or (ratios <= 0).any() or not np.isclose(ratios.sum(), 1.0):
        raise ValueError(f"invalid split ratios {ratios.tolist()}")
    n = len(ds)
    perm = np.random.default_rng(seed).permutation(n)
    bounds = np.rint(np.cumsum(ratios) * n).astype(int)
    bounds[-1] = n
    starts = np.concatenate([[0], bounds[:-1]])
    parts = []
    for a, b in zip(starts, bounds):
        if b <= a:
            raise ValueError(f"split {ratios.tolist()} of {n} rows gives an empty partition")
        parts.append(ds.subset(perm[a:b]))
    return parts


def batches(ds: Dataset, batch_size: int, seed: int, epoch: int) -> Iterator[ExampleBatch]:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.random.default_rng([seed, epoch]).permutation(len(ds))
    for start in range(0, len(order), batch_size):
        rows = order[start:start + batch_size]
        yield ExampleBatch(ds.indices[rows], ds.labels[rows])


def num_batches(ds: Dataset, batch_size: int) -> int:
    return -(-len(ds) // batch_size)
