"""Dataset ingestion, label normalization, splitting and vertical partitioning."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import scipy.sparse as sp

from .core import (
    EmptyData,
    FeaturePartition,
    LabelAccessError,
    ModelState,
    ParseError,
    PartyRole,
    assign_roles,
    make_partition,
)


class SparseRow(NamedTuple):
    indices: np.ndarray
    values: np.ndarray
    size: int


@dataclass
class RawDataset:
    X: np.ndarray | sp.csr_matrix
    y: np.ndarray
    # (min, max) of the original labels when min-max normalized
    label_range: tuple[float, float] | None = None

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def is_sparse(self) -> bool:
        return sp.issparse(self.X)

    def dense(self) -> np.ndarray:
        return self.X.toarray() if self.is_sparse else np.asarray(self.X)

    def subset(self, idx: np.ndarray) -> "RawDataset":
        return RawDataset(self.X[idx], self.y[idx], self.label_range)

    def inverse_labels(self, y: np.ndarray) -> np.ndarray:
        if self.label_range is None:
            return np.asarray(y, dtype=float)
        lo, hi = self.label_range
        return np.asarray(y, dtype=float) * (hi - lo) + lo


# ---------------------------------------------------------------------------
# parsers
# ---------------------------------------------------------------------------


def _read_text(path) -> str:
    try:
        return Path(path).read_bytes().decode("utf-8")
    except UnicodeDecodeError as exc:
        # locate the offending line for the error message
        raw = Path(path).read_bytes()
        line = raw[: exc.start].count(b"\n") + 1
        raise ParseError("invalid UTF-8", line=line) from None


def parse_libsvm(path, n_features: int | None = None) -> RawDataset:
    """Read ``label idx:val ...`` lines (1-based indices) into a CSR matrix.

    ``n_features`` overrides the inferred dimension (max index seen) so train
    and test files can share a width.
    """
    text = _read_text(path)
    labels: list[float] = []
    indptr = [0]
    indices: list[int] = []
    values: list[float] = []
    max_idx = 0
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        try:
            label = float(tokens[0])
        except ValueError:
            raise ParseError(f"bad label {tokens[0]!r}", line=lineno) from None
        if not math.isfinite(label):
            raise ParseError(f"non-finite label {tokens[0]!r}", line=lineno)
        last = 0
        for tok in tokens[1:]:
            key, sep, val = tok.partition(":")
            if not sep:
                raise ParseError(f"expected idx:val, got {tok!r}", line=lineno)
            if key == "qid":
                continue
            try:
                idx = int(key)
                v = float(val)
            except ValueError:
                raise ParseError(f"bad feature {tok!r}", line=lineno) from None
            if idx < 1:
                raise ParseError(f"feature index must be >= 1, got {idx}", line=lineno)
            if idx <= last:
                raise ParseError("feature indices must be strictly increasing", line=lineno)
            if not math.isfinite(v):
                raise ParseError(f"non-finite value in {tok!r}", line=lineno)
            last = idx
            indices.append(idx - 1)
            values.append(v)
        max_idx = max(max_idx, last)
        labels.append(label)
        indptr.append(len(indices))
    if not labels:
        raise EmptyData(f"{path}: no samples")
    d = max_idx
    if n_features is not None:
        if n_features < max_idx:
            raise ParseError(f"file uses index {max_idx} > n_features={n_features}")
        d = n_features
    X = sp.csr_matrix(
        (np.asarray(values, dtype=float), np.asarray(indices, dtype=np.int64), np.asarray(indptr)),
        shape=(len(labels), d),
    )
    return RawDataset(X, np.asarray(labels, dtype=float))


def write_libsvm(path, data: RawDataset) -> None:
    X = sp.csr_matrix(data.X)
    with open(path, "w", encoding="utf-8") as fh:
        for i in range(X.shape[0]):
            lo, hi = X.indptr[i], X.indptr[i + 1]
            feats = " ".join(f"{j + 1}:{float(v)!r}" for j, v in zip(X.indices[lo:hi], X.data[lo:hi]))
            fh.write(f"{float(data.y[i])!r} {feats}".rstrip() + "\n")


def parse_csv(path, label_column: int | str = 0, classification: bool = True) -> RawDataset:
    """Numeric CSV with a header row. Labels {0,1} map to {-1,+1} when
    ``classification`` is set."""
    text = _read_text(path)
    reader = csv.reader(io.StringIO(text))
    try:
        table = list(reader)
    except csv.Error as exc:
        raise ParseError(str(exc), line=reader.line_num) from None
    if not table:
        raise EmptyData(f"{path}: empty file")
    header = table[0]
    if isinstance(label_column, str) and not label_column.lstrip("-").isdigit():
        try:
            label_idx = header.index(label_column)
        except ValueError:
            raise ParseError(f"no column named {label_column!r}", line=1) from None
    else:
        label_idx = int(label_column)
        if not -len(header) <= label_idx < len(header):
            raise ParseError(f"label column {label_idx} out of range", line=1)
        label_idx %= len(header)
    rows = []
    for lineno, row in enumerate(table[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise ParseError(f"expected {len(header)} cells, got {len(row)}", line=lineno)
        vals = []
        for col, cell in enumerate(row, start=1):
            try:
                v = float(cell)
            except ValueError:
                raise ParseError(f"non-numeric cell {cell!r}", line=lineno, column=col) from None
            if not math.isfinite(v):
                raise ParseError(f"non-finite cell {cell!r}", line=lineno, column=col)
            vals.append(v)
        rows.append(vals)
    if not rows:
        raise EmptyData(f"{path}: no samples")
    M = np.asarray(rows, dtype=float)
    y = M[:, label_idx]
    X = np.delete(M, label_idx, axis=1)
    if classification:
        y = _map_binary_labels(y)
    return RawDataset(X, y)


def _map_binary_labels(y: np.ndarray) -> np.ndarray:
    vals = set(np.unique(y).tolist())
    if vals <= {0.0, 1.0}:
        return np.where(y > 0, 1.0, -1.0)
    if vals <= {-1.0, 1.0}:
        return y.astype(float)
    raise ParseError(f"classification labels must be in {{0,1}} or {{-1,+1}}, got {sorted(vals)[:5]}")


def write_csv(path, data: RawDataset, label_name: str = "label") -> None:
    X = data.dense()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([label_name] + [f"x{j}" for j in range(X.shape[1])])
        for yi, row in zip(data.y, X):
            w.writerow([repr(float(yi))] + [repr(float(v)) for v in row])


# ---------------------------------------------------------------------------
# transforms
# ---------------------------------------------------------------------------


def minmax_normalize_labels(data: RawDataset) -> RawDataset:
    lo, hi = float(np.min(data.y)), float(np.max(data.y))
    if hi == lo:
        y = np.zeros_like(data.y, dtype=float)
    else:
        y = (data.y - lo) / (hi - lo)
    return RawDataset(data.X, y, (lo, hi))


def minmax_normalize_features(data: RawDataset) -> RawDataset:
    """Per-feature scaling to [0, 1]; constant columns become 0."""
    X = data.dense()
    lo = X.min(axis=0)
    span = X.max(axis=0) - lo
    span[span == 0] = 1.0
    X = (X - lo) / span
    return replace(data, X=sp.csr_matrix(X) if data.is_sparse else X)


def train_test_split(data: RawDataset, test_fraction: float, seed: int) -> tuple[RawDataset, RawDataset]:
    if not 0 < test_fraction < 1:
        raise ValueError(f"test_fraction must be in (0, 1), got {test_fraction}")
    if data.n < 2:
        raise EmptyData("need at least 2 samples to split")
    n_test = min(max(int(round(data.n * test_fraction)), 1), data.n - 1)
    perm = np.random.default_rng(seed).permutation(data.n)
    test_idx, train_idx = np.sort(perm[:n_test]), np.sort(perm[n_test:])
    return data.subset(train_idx), data.subset(test_idx)


# ---------------------------------------------------------------------------
# vertical partitioning
# ---------------------------------------------------------------------------


@dataclass
class PartitionedDataset:
    """Samples split column-wise into per-party blocks.

    Labels are only reachable through :meth:`labels_for`, which refuses
    passive parties. :meth:`pooled_labels` exists for the non-federated
    baseline and for evaluation, which see the integrated data by definition.
    """

    partition: FeaturePartition
    blocks: list
    _labels: np.ndarray = field(repr=False)
    roles: list[PartyRole] | None = None
    label_range: tuple[float, float] | None = None

    def __post_init__(self):
        self._sparse = [sp.issparse(b) for b in self.blocks]
        for ell, b in enumerate(self.blocks):
            if b.shape[1] != self.partition.sizes[ell]:
                raise ValueError(f"block {ell} has {b.shape[1]} columns, partition says {self.partition.sizes[ell]}")

    @property
    def n(self) -> int:
        return len(self._labels)

    @property
    def q(self) -> int:
        return self.partition.q

    @property
    def d(self) -> int:
        return self.partition.d

    def with_roles(self, m: int) -> "PartitionedDataset":
        return replace(self, roles=assign_roles(self.q, m))

    @property
    def active_parties(self) -> list[int]:
        if self.roles is None:
            return []
        return [r.party_id for r in self.roles if r.is_active]

    def labels_for(self, party_id: int) -> np.ndarray:
        if self.roles is None or not self.roles[party_id].is_active:
            raise LabelAccessError(f"party {party_id} is not an active party")
        return self._labels

    def pooled_labels(self) -> np.ndarray:
        return self._labels

    def is_sparse(self, ell: int) -> bool:
        return self._sparse[ell]

    def row(self, ell: int, i: int):
        """Sample ``i`` restricted to block ``ell``: ndarray, or SparseRow."""
        B = self.blocks[ell]
        if self._sparse[ell]:
            lo, hi = B.indptr[i], B.indptr[i + 1]
            return SparseRow(B.indices[lo:hi], B.data[lo:hi], B.shape[1])
        return B[i]

    def partial(self, ell: int, i: int, w_block: np.ndarray) -> float:
        x = self.row(ell, i)
        if self._sparse[ell]:
            return float(x.values @ w_block[x.indices])
        return float(x @ w_block)

    def all_partials(self, model: ModelState) -> np.ndarray:
        """n x q matrix of per-block inner products."""
        out = np.empty((self.n, self.q))
        for ell in range(self.q):
            out[:, ell] = self.blocks[ell] @ model.block(ell)
        return out

    def inner_products(self, model: ModelState) -> np.ndarray:
        return self.all_partials(model).sum(axis=1)

    def assemble(self) -> np.ndarray:
        """Dense n x d matrix in original feature order."""
        X = np.empty((self.n, self.d))
        for ell, b in enumerate(self.partition.blocks):
            B = self.blocks[ell]
            X[:, b] = B.toarray() if self._sparse[ell] else B
        return X


def partition_like(data: RawDataset, partition: FeaturePartition) -> PartitionedDataset:
    if data.d != partition.d:
        raise ValueError(f"dataset has {data.d} features, partition covers {partition.d}")
    X = sp.csc_matrix(data.X) if data.is_sparse else np.asarray(data.X, dtype=float)
    blocks = []
    for b in partition.blocks:
        if data.is_sparse:
            blocks.append(sp.csr_matrix(X[:, b]))
        else:
            blocks.append(np.ascontiguousarray(X[:, b]))
    return PartitionedDataset(partition, blocks, np.asarray(data.y, dtype=float), label_range=data.label_range)


def vertical_partition_dataset(data: RawDataset, q: int, seed: int) -> PartitionedDataset:
    return partition_like(data, make_partition(data.d, q, seed))


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


def make_synthetic(
    n: int,
    d: int,
    seed: int,
    task: str = "classification",
    weights: Sequence[float] | None = None,
    noise: float = 0.1,
) -> RawDataset:
    """Gaussian features scaled to unit expected row norm, linear ground truth.

    ``weights`` fixes the generating model; otherwise it is drawn at random.
    Classification labels are ``sign(w^T x + noise)``.
    """
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d)) / math.sqrt(d)
    w = rng.standard_normal(d) * 2.0 if weights is None else np.asarray(weights, dtype=float)
    z = X @ w + noise * rng.standard_normal(n)
    if task == "classification":
        y = np.where(z >= 0, 1.0, -1.0)
    elif task == "regression":
        y = z
    else:
        raise ValueError(f"unknown task {task!r}")
    return RawDataset(X, y)
