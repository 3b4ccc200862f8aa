"""Per-field embedding lookup and stacking into the network input ``x0``."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensor import DTYPE, ShapeError, as_vector, uniform


class InvalidFieldError(ValueError):
    pass


def embed_dim_rule(cardinality: int) -> int:
    """Embedding width ``floor(6 * cardinality ** 0.25)``, at least 1."""
    if cardinality < 1:
        raise InvalidFieldError(f"cardinality must be >= 1, got {cardinality}")
    # integer fourth root avoids 1296 ** 0.25 landing a hair under 6
    root = math.isqrt(math.isqrt(cardinality))
    if root**4 == cardinality:
        return max(1, 6 * root)
    return max(1, math.floor(6 * cardinality**0.25))


@dataclass(frozen=True)
class FieldSpec:
    """A categorical field. ``vocab_size`` counts the OOV slot, which is the last column."""

    field_id: int
    vocab_size: int
    embed_dim: int

    def __post_init__(self):
        if self.vocab_size < 1:
            raise InvalidFieldError(f"field {self.field_id}: vocab_size must be >= 1")
        if self.embed_dim < 1:
            raise InvalidFieldError(f"field {self.field_id}: embed_dim must be >= 1")

    @property
    def oov_id(self) -> int:
        return self.vocab_size - 1


class EmbeddingTable:
    """One ``embed_dim x vocab_size`` matrix per field."""

    def __init__(self, fields: Sequence[FieldSpec], matrices: Sequence[np.ndarray] | None = None):
        self.fields = list(fields)
        if matrices is None:
            matrices = [np.zeros((f.embed_dim, f.vocab_size), dtype=DTYPE) for f in self.fields]
        if len(matrices) != len(self.fields):
            raise ShapeError("one embedding matrix per field is required")
        self.matrices = [np.asarray(m, dtype=DTYPE) for m in matrices]
        for f, m in zip(self.fields, self.matrices):
            if m.shape != (f.embed_dim, f.vocab_size):
                raise ShapeError(
                    f"field {f.field_id}: matrix shape {m.shape} != {(f.embed_dim, f.vocab_size)}"
                )

    @classmethod
    def initialize(cls, fields: Sequence[FieldSpec], rng: np.random.Generator) -> "EmbeddingTable":
        mats = [uniform(rng, 1.0 / math.sqrt(f.embed_dim), (f.embed_dim, f.vocab_size)) for f in fields]
        return cls(fields, mats)

    @property
    def total_dim(self) -> int:
        return sum(f.embed_dim for f in self.fields)

    def route(self, field: int, ids) -> np.ndarray:
        """Map ids outside ``[0, vocab_size)`` to the field's OOV slot."""
        spec = self.fields[field]
        ids = np.asarray(ids, dtype=np.int64)
        return np.where((ids < 0) | (ids >= spec.vocab_size), spec.oov_id, ids)


def embed_lookup(table: EmbeddingTable, field: int, category_id: int) -> np.ndarray:
    col = int(table.route(field, category_id))
    return table.matrices[field][:, col].copy()


def embed_lookup_batch(table: EmbeddingTable, field: int, ids) -> np.ndarray:
    """Rows of the result are the looked-up columns, shape ``(batch, embed_dim)``."""
    return table.matrices[field][:, table.route(field, ids)].T


def stack(embeddings: Sequence, dense) -> np.ndarray:
    parts = [as_vector(e) for e in embeddings] + [as_vector(dense)]
    return np.concatenate(parts) if parts else np.zeros(0, dtype=DTYPE)


def stack_batch(embeddings: Sequence[np.ndarray], dense: np.ndarray) -> np.ndarray:
    """Batched ``stack``: ``[embed_1, ..., embed_k, dense]`` along axis 1."""
    dense = np.asarray(dense, dtype=DTYPE)
    return np.concatenate(list(embeddings) + [dense], axis=1)


@dataclass
class ColumnGradient:
    """Sparse gradient for one embedding matrix: ``columns[:, k]`` belongs to ``ids[k]``."""

    ids: np.ndarray
    columns: np.ndarray

    def to_dense(self, vocab_size: int) -> np.ndarray:
        out = np.zeros((self.columns.shape[0], vocab_size), dtype=DTYPE)
        np.add.at(out.T, self.ids, self.columns.T)
        return out


def embed_backward(grad_x0_slice, category_id: int, embed_dim: int | None = None) -> ColumnGradient:
    g = as_vector(grad_x0_slice)
    if embed_dim is not None and g.shape[0] != embed_dim:
        raise ShapeError(f"gradient slice has length {g.shape[0]}, field width is {embed_dim}")
    return ColumnGradient(np.array([category_id], dtype=np.int64), g.reshape(-1, 1).copy())


def embed_backward_batch(grad_slices: np.ndarray, ids: np.ndarray) -> ColumnGradient:
    """Merge per-example slices; repeated ids are summed, ids come out sorted."""
    grad_slices = np.asarray(grad_slices, dtype=DTYPE)
    ids = np.asarray(ids, dtype=np.int64)
    if grad_slices.ndim != 2 or grad_slices.shape[0] != ids.shape[0]:
        raise ShapeError("need one gradient slice per id")
    uniq, inverse = np.unique(ids, return_inverse=True)
    cols = np.zeros((grad_slices.shape[1], uniq.shape[0]), dtype=DTYPE)
    np.add.at(cols.T, inverse, grad_slices)
    return ColumnGradient(uniq, cols)


OOV_TOKEN = "<OOV>"


def write_vocab(path: str | Path, tokens: Sequence[str]) -> None:
    """Line ``i`` holds the token with id ``i``; the OOV slot is appended last."""
    with open(path, "w", encoding="utf-8") as f:
        for t in tokens:
            f.write(t + "\n")
        f.write(OOV_TOKEN + "\n")


def read_vocab(path: str | Path) -> dict[str, int]:
    with open(path, encoding="utf-8") as f:
        lines = [line.rstrip("\n") for line in f]
    if not lines or lines[-1] != OOV_TOKEN:
        raise ValueError(f"{path}: vocabulary file must end with the {OOV_TOKEN} slot")
    return {tok: i for i, tok in enumerate(lines[:-1])} | {OOV_TOKEN: len(lines) - 1}
