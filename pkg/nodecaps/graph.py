"""Sparse graph representation and normalization arithmetic.

:class:`SparseMatrix` is a thin immutable CSR record. Products go through
``scipy.sparse`` kernels, which walk each row's stored entries in order; since
column indices are kept strictly increasing per row, every row reduction runs
in ascending column order and results are bit-reproducible.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .errors import ShapeError, StructureError, ValidationError

__all__ = [
    "SparseMatrix",
    "GraphDataset",
    "normalize_adjacency",
    "normalized_laplacian",
    "symmetric_renormalize",
    "spmm",
]

log = logging.getLogger(__name__)

SPLIT_NAMES = ("train", "val", "test")


@dataclass(frozen=True, eq=False)
class SparseMatrix:
    """CSR sparse real matrix with sorted, duplicate-free rows."""

    n_rows: int
    n_cols: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        offsets = np.array(self.row_offsets, dtype=np.int64)
        cols = np.array(self.col_indices, dtype=np.int64)
        vals = np.array(self.values, dtype=np.float64)
        for arr in (offsets, cols, vals):
            arr.setflags(write=False)
        object.__setattr__(self, "row_offsets", offsets)
        object.__setattr__(self, "col_indices", cols)
        object.__setattr__(self, "values", vals)

        if offsets.shape != (self.n_rows + 1,):
            raise StructureError(
                f"row_offsets must have length {self.n_rows + 1}, got {offsets.shape[0]}"
            )
        if offsets[0] != 0 or np.any(np.diff(offsets) < 0):
            raise StructureError("row_offsets must start at 0 and be non-decreasing")
        if offsets[-1] != len(vals) or len(cols) != len(vals):
            raise StructureError(
                f"row_offsets end ({offsets[-1]}), col_indices ({len(cols)}) and "
                f"values ({len(vals)}) disagree"
            )
        if len(cols) and (cols.min() < 0 or cols.max() >= self.n_cols):
            raise StructureError(f"column index out of range for {self.n_cols} columns")
        # strictly increasing columns within each row
        step = np.diff(cols)
        row_starts = offsets[1:-1]
        within_row = np.ones(len(step), dtype=bool)
        within_row[row_starts[(row_starts > 0) & (row_starts < len(cols))] - 1] = False
        if np.any(step[within_row] <= 0):
            raise StructureError("col_indices must be strictly increasing within each row")

    # -- construction -----------------------------------------------------

    @classmethod
    def from_scipy(cls, matrix: sp.spmatrix | sp.sparray) -> SparseMatrix:
        csr = sp.csr_matrix(matrix, dtype=np.float64, copy=True)
        csr.sum_duplicates()
        csr.sort_indices()
        return cls(csr.shape[0], csr.shape[1], csr.indptr, csr.indices, csr.data)

    @classmethod
    def from_dense(cls, dense: np.ndarray) -> SparseMatrix:
        return cls.from_scipy(sp.csr_matrix(np.asarray(dense, dtype=np.float64)))

    @classmethod
    def from_triplets(
        cls, n_rows: int, n_cols: int, rows, cols, values
    ) -> SparseMatrix:
        coo = sp.coo_matrix(
            (
                np.asarray(values, dtype=np.float64),
                (np.asarray(rows, dtype=np.int64), np.asarray(cols, dtype=np.int64)),
            ),
            shape=(n_rows, n_cols),
        )
        return cls.from_scipy(coo)

    @classmethod
    def identity(cls, n: int) -> SparseMatrix:
        return cls(n, n, np.arange(n + 1), np.arange(n), np.ones(n))

    # -- views ------------------------------------------------------------

    @property
    def shape(self) -> tuple[int, int]:
        return self.n_rows, self.n_cols

    @property
    def nnz(self) -> int:
        return int(len(self.values))

    @cached_property
    def _csr(self) -> sp.csr_matrix:
        return sp.csr_matrix(
            (self.values, self.col_indices, self.row_offsets), shape=self.shape
        )

    def to_scipy(self) -> sp.csr_matrix:
        return self._csr.copy()

    def to_dense(self) -> np.ndarray:
        return self.to_scipy().toarray()

    def row(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        start, stop = self.row_offsets[i], self.row_offsets[i + 1]
        return self.col_indices[start:stop], self.values[start:stop]

    def row_nnz(self) -> np.ndarray:
        return np.diff(self.row_offsets)

    def diagonal(self) -> np.ndarray:
        return self.to_scipy().diagonal()

    def is_symmetric(self, atol: float = 0.0) -> bool:
        if self.n_rows != self.n_cols:
            return False
        m = self.to_scipy()
        diff = (m - m.T).tocsr()
        diff.eliminate_zeros()
        if diff.nnz == 0:
            return True
        return bool(np.max(np.abs(diff.data)) <= atol) and _same_pattern(m, m.T.tocsr())

    def transpose(self) -> SparseMatrix:
        return SparseMatrix.from_scipy(self.to_scipy().T)

    def fingerprint(self) -> str:
        """Stable content hash, used as a cache key."""
        digest = hashlib.sha256()
        digest.update(np.array([self.n_rows, self.n_cols], dtype=np.int64).tobytes())
        digest.update(self.row_offsets.tobytes())
        digest.update(self.col_indices.tobytes())
        digest.update(self.values.tobytes())
        return digest.hexdigest()

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SparseMatrix):
            return NotImplemented
        return (
            self.shape == other.shape
            and np.array_equal(self.row_offsets, other.row_offsets)
            and np.array_equal(self.col_indices, other.col_indices)
            and np.array_equal(self.values, other.values)
        )

    __hash__ = None  # type: ignore[assignment]


def _same_pattern(a: sp.csr_matrix, b: sp.csr_matrix) -> bool:
    a = a.copy()
    b = b.copy()
    a.sort_indices()
    b.sort_indices()
    return np.array_equal(a.indptr, b.indptr) and np.array_equal(a.indices, b.indices)


@dataclass(frozen=True, eq=False)
class GraphDataset:
    """An undirected attributed graph with labels and named split masks."""

    adjacency: SparseMatrix
    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    splits: dict[str, np.ndarray] = field(default_factory=dict)
    name: str = "unnamed"

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(
            self, "splits", {k: np.asarray(v, dtype=bool) for k, v in self.splits.items()}
        )

        n = self.adjacency.n_rows
        if self.adjacency.shape != (n, n):
            raise ShapeError(f"adjacency must be square, got {self.adjacency.shape}")
        if features.ndim != 2 or features.shape[0] != n:
            raise ShapeError(f"features must be {n} x f, got {features.shape}")
        if labels.shape != (n,):
            raise ShapeError(f"labels must have length {n}, got {labels.shape}")
        if len(labels) and (labels.min() < 0 or labels.max() >= self.n_classes):
            raise ValidationError(f"labels must lie in [0, {self.n_classes})")
        if not self.adjacency.is_symmetric():
            raise StructureError("adjacency must be symmetric")

        seen = np.zeros(n, dtype=np.int64)
        for key, mask in self.splits.items():
            if mask.shape != (n,):
                raise ShapeError(f"split {key!r} must have length {n}")
            seen += mask
        if np.any(seen > 1):
            raise ValidationError("split masks must be disjoint")

    @property
    def n_nodes(self) -> int:
        return self.adjacency.n_rows

    @property
    def n_features(self) -> int:
        return int(self.features.shape[1])

    def mask(self, split: str) -> np.ndarray:
        try:
            return self.splits[split]
        except KeyError:
            raise ValidationError(f"dataset {self.name!r} has no {split!r} split") from None

    def with_splits(self, splits: dict[str, np.ndarray]) -> GraphDataset:
        return GraphDataset(
            self.adjacency, self.features, self.labels, self.n_classes, dict(splits), self.name
        )

    def with_features(self, features: np.ndarray) -> GraphDataset:
        return GraphDataset(
            self.adjacency, features, self.labels, self.n_classes, dict(self.splits), self.name
        )


def _check_adjacency(adjacency: SparseMatrix) -> None:
    if adjacency.n_rows != adjacency.n_cols:
        raise StructureError(f"adjacency must be square, got {adjacency.shape}")
    if np.any(adjacency.values < 0):
        raise ValidationError("adjacency has negative entries")
    if not adjacency.is_symmetric():
        raise StructureError("adjacency is not symmetric")
    if np.any(adjacency.diagonal() != 0):
        raise StructureError("adjacency already has diagonal entries; self-loops are added once")


def symmetric_renormalize(matrix: sp.csr_matrix) -> sp.csr_matrix:
    """Apply D^-1/2 M D^-1/2 with D the row sums of ``matrix``."""
    degree = np.asarray(matrix.sum(axis=1)).ravel()
    with np.errstate(divide="ignore"):
        inv_sqrt = 1.0 / np.sqrt(degree)
    inv_sqrt[~np.isfinite(inv_sqrt)] = 0.0
    scale = sp.diags(inv_sqrt)
    out = (scale @ matrix @ scale).tocsr()
    out.sort_indices()
    return out


def normalize_adjacency(adjacency: SparseMatrix) -> SparseMatrix:
    """Return (D+I)^-1/2 (A+I) (D+I)^-1/2."""
    _check_adjacency(adjacency)
    a_hat = adjacency.to_scipy() + sp.eye(adjacency.n_rows, format="csr")
    return SparseMatrix.from_scipy(symmetric_renormalize(a_hat.tocsr()))


def normalized_laplacian(adjacency: SparseMatrix) -> SparseMatrix:
    """Return I - Ã, the Laplacian of the self-loop augmented graph."""
    a_tilde = normalize_adjacency(adjacency).to_scipy()
    laplacian = sp.eye(adjacency.n_rows, format="csr") - a_tilde
    return SparseMatrix.from_scipy(laplacian)


def spmm(m: SparseMatrix, dense: np.ndarray) -> np.ndarray:
    """Exact sparse-dense product; extra trailing axes of ``dense`` are carried."""
    dense = np.asarray(dense, dtype=np.float64)
    if dense.ndim == 0 or dense.shape[0] != m.n_cols:
        raise ShapeError(
            f"cannot multiply {m.n_rows}x{m.n_cols} sparse by dense of shape {dense.shape}"
        )
    trailing = dense.shape[1:]
    flat = dense.reshape(m.n_cols, -1)
    out = m._csr @ flat
    return np.asarray(out).reshape((m.n_rows, *trailing))
