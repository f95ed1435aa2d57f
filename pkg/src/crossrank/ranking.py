"""Exact Euclidean distance matrices and 1-based ascending ranks."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.typing import NDArray

from .embedstore import DimensionError, EmbeddingSet

# rows per block when forming the Gram product; bounds peak memory at
# block_rows * cols * 8 bytes
DEFAULT_BLOCK_ROWS = 4096


@dataclass(frozen=True)
class DistanceMatrix:
    values: NDArray[np.float64]
    row_ids: tuple[str, ...]
    col_ids: tuple[str, ...]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class RankMatrix:
    """``ranks[i, j]`` is the 1-based position of column j in row i's
    ascending-distance order; ``order[i]`` is that order itself."""

    ranks: NDArray[np.int64]
    order: NDArray[np.int64]

    @property
    def shape(self) -> tuple[int, int]:
        return self.ranks.shape


def _as_matrix(x) -> tuple[np.ndarray, tuple[str, ...]]:
    if isinstance(x, EmbeddingSet):
        return x.vectors, x.ids
    arr = np.atleast_2d(np.asarray(x, dtype=np.float64))
    return arr, tuple(str(k) for k in range(arr.shape[0]))


def euclidean_distances(
    a: np.ndarray, b: np.ndarray, block_rows: int = DEFAULT_BLOCK_ROWS
) -> np.ndarray:
    """Blocked ``||a_i - b_j||`` via ``|a|^2 + |b|^2 - 2 a.b``."""
    if a.shape[1] != b.shape[1]:
        raise DimensionError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    b_sq = np.einsum("ij,ij->i", b, b)
    out = np.empty((a.shape[0], b.shape[0]), dtype=np.float64)
    for start in range(0, a.shape[0], block_rows):
        blk = a[start : start + block_rows]
        sq = np.einsum("ij,ij->i", blk, blk)[:, None] + b_sq[None, :] - 2.0 * (blk @ b.T)
        np.maximum(sq, 0.0, out=sq)
        out[start : start + block_rows] = np.sqrt(sq)
    return out


def pairwise_distances(a, b=None, block_rows: int = DEFAULT_BLOCK_ROWS) -> DistanceMatrix:
    """Distances between rows of ``a`` and rows of ``b``.

    With ``b`` omitted or the same object as ``a``, the result is forced
    exactly symmetric with a zero diagonal.
    """
    same = b is None or b is a
    a_mat, a_ids = _as_matrix(a)
    if same:
        b_mat, b_ids = a_mat, a_ids
    else:
        b_mat, b_ids = _as_matrix(b)
    values = euclidean_distances(a_mat, b_mat, block_rows=block_rows)
    if same:
        upper = np.triu(values, k=1)
        values = upper + upper.T
    values.setflags(write=False)
    return DistanceMatrix(values=values, row_ids=a_ids, col_ids=b_ids)


def rank_vector(d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Stable ascending order of a 1-D distance vector and its 1-based ranks."""
    order = np.argsort(d, kind="stable")
    ranks = np.empty(order.shape[0], dtype=np.int64)
    ranks[order] = np.arange(1, order.shape[0] + 1)
    return order, ranks


def rank_rows(d: DistanceMatrix | np.ndarray) -> RankMatrix:
    """Rank every row; ties go to the lower column index.

    When rows and columns are the same set the self item (distance 0) takes
    rank 1.
    """
    values = d.values if isinstance(d, DistanceMatrix) else np.atleast_2d(np.asarray(d))
    order = np.argsort(values, axis=1, kind="stable").astype(np.int64)
    ranks = np.empty_like(order)
    n_rows, n_cols = values.shape
    ranks[np.arange(n_rows)[:, None], order] = np.arange(1, n_cols + 1)[None, :]
    order.setflags(write=False)
    ranks.setflags(write=False)
    return RankMatrix(ranks=ranks, order=order)


def dump_matrix_csv(
    path: str | Path,
    values: np.ndarray,
    row_ids: Sequence[str],
    col_ids: Sequence[str],
) -> None:
    """Debug dump: header row of column ids, one line per row id."""
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", *col_ids])
        fmt = repr if np.issubdtype(values.dtype, np.floating) else str
        for rid, row in zip(row_ids, values.tolist()):
            writer.writerow([rid, *(fmt(v) for v in row)])
