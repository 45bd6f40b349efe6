"""Sparse/dense kernels, row-block partitioning and the 7-point Poisson generator.

All reductions here accumulate strictly left to right.  Bitwise reproducibility
of the solver under recovery depends on it, so no pairwise or blocked sums.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np
import scipy.linalg

from .errors import NotSPDError, RangeError, ShapeError, SizeError

MAX_ROWS = 2**31 - 1


@dataclass(eq=False)
class CsrMatrix:
    n_rows: int
    n_cols: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.row_offsets = np.ascontiguousarray(self.row_offsets, dtype=np.int64)
        self.col_indices = np.ascontiguousarray(self.col_indices, dtype=np.int64)
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        self.validate()

    def validate(self) -> None:
        ro, ci = self.row_offsets, self.col_indices
        if self.n_rows < 0 or self.n_cols < 0:
            raise ShapeError("negative dimension")
        if len(ro) != self.n_rows + 1 or ro[0] != 0:
            raise ShapeError("row_offsets must have n_rows+1 entries starting at 0")
        if np.any(np.diff(ro) < 0):
            raise ShapeError("row_offsets must be non-decreasing")
        if ro[-1] != len(ci) or len(ci) != len(self.values):
            raise ShapeError("row_offsets[-1], len(col_indices) and len(values) disagree")
        if len(ci) and (ci.min() < 0 or ci.max() >= self.n_cols):
            raise RangeError("column index out of range")
        # strictly increasing columns within each row
        if len(ci) > 1:
            step = np.diff(ci)
            same_row = np.ones(len(ci) - 1, dtype=bool)
            starts = ro[1:-1]
            starts = starts[(starts > 0) & (starts < len(ci))]
            same_row[starts - 1] = False
            if np.any(step[same_row] <= 0):
                raise ShapeError("column indices must be strictly increasing within a row")

    @property
    def nnz(self) -> int:
        return len(self.values)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_rows, self.n_cols)

    def row_lengths(self) -> np.ndarray:
        return np.diff(self.row_offsets)

    def row_ids(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_rows), self.row_lengths())

    def diagonal(self) -> np.ndarray:
        d = np.zeros(min(self.n_rows, self.n_cols))
        rows = self.row_ids()
        on_diag = rows == self.col_indices
        d[rows[on_diag]] = self.values[on_diag]
        return d

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        out[self.row_ids(), self.col_indices] = self.values
        return out

    @classmethod
    def from_dense(cls, dense, tol: float = 0.0) -> "CsrMatrix":
        dense = np.atleast_2d(np.asarray(dense, dtype=np.float64))
        rows, cols = np.nonzero(np.abs(dense) > tol)
        counts = np.bincount(rows, minlength=dense.shape[0])
        offsets = np.concatenate([[0], np.cumsum(counts)])
        return cls(dense.shape[0], dense.shape[1], offsets, cols, dense[rows, cols])

    @classmethod
    def identity(cls, n: int) -> "CsrMatrix":
        return cls(n, n, np.arange(n + 1), np.arange(n), np.ones(n))

    def is_symmetric(self) -> bool:
        if self.n_rows != self.n_cols:
            return False
        rows = self.row_ids()
        fwd = sorted(zip(rows.tolist(), self.col_indices.tolist(), self.values.tolist()))
        bwd = sorted(zip(self.col_indices.tolist(), rows.tolist(), self.values.tolist()))
        return fwd == bwd

    @cached_property
    def kernel(self) -> "RowKernel":
        return RowKernel(self.n_rows, self.row_offsets, self.col_indices, self.values)


class RowKernel:
    """Row-by-row product that adds each row's terms in stored order.

    Works on any column numbering (a rank's local block maps columns to
    [own entries | halo entries], which is not sorted).  Layer k holds the
    k-th stored entry of every row long enough to have one.
    """

    def __init__(self, n_rows: int, row_offsets, cols, vals):
        self.n_rows = n_rows
        row_offsets = np.asarray(row_offsets, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        vals = np.asarray(vals, dtype=np.float64)
        self.nnz = len(vals)
        lengths = np.diff(row_offsets)
        self.layers = []
        for k in range(int(lengths.max()) if n_rows else 0):
            rows = np.nonzero(lengths > k)[0]
            pos = row_offsets[rows] + k
            self.layers.append((rows, cols[pos], vals[pos]))

    def apply(self, v: np.ndarray) -> np.ndarray:
        out = np.zeros(self.n_rows)
        for rows, cols, vals in self.layers:
            out[rows] = out[rows] + vals * v[cols]
        return out


def spmv(A: CsrMatrix, v) -> np.ndarray:
    """Return ``A @ v``; each row is summed in stored column order."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (A.n_cols,):
        raise ShapeError(f"vector of length {v.shape} does not match {A.n_cols} columns")
    return A.kernel.apply(v)


def dot(u, v) -> float:
    """Inner product accumulated sequentially from index 0 upwards."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape or u.ndim != 1:
        raise ShapeError(f"dot of shapes {u.shape} and {v.shape}")
    if len(u) == 0:
        return 0.0
    return float(np.cumsum(u * v)[-1])


def gen_poisson_7pt(nx: int, ny: int, nz: int) -> CsrMatrix:
    """7-point Laplacian on an nx*ny*nz grid, x index fastest.

    Neighbours outside the grid are dropped and the diagonal stays 6.  Rows
    touching the boundary are then strictly diagonally dominant and interior
    rows weakly so; the pattern is irreducible, hence the matrix is SPD.
    """
    for d in (nx, ny, nz):
        if int(d) != d or d < 1:
            raise SizeError(f"grid dimensions must be positive integers, got {(nx, ny, nz)}")
    nx, ny, nz = int(nx), int(ny), int(nz)
    n = nx * ny * nz
    if n > MAX_ROWS or 7 * n > np.iinfo(np.int64).max // 8:
        raise SizeError(f"grid of {n} cells is too large")
    idx = np.arange(n)
    ix = idx % nx
    iy = (idx // nx) % ny
    iz = idx // (nx * ny)
    # offsets in ascending column order
    stencil = [
        (-nx * ny, iz > 0, -1.0),
        (-nx, iy > 0, -1.0),
        (-1, ix > 0, -1.0),
        (0, np.ones(n, dtype=bool), 6.0),
        (1, ix < nx - 1, -1.0),
        (nx, iy < ny - 1, -1.0),
        (nx * ny, iz < nz - 1, -1.0),
    ]
    present = np.stack([m for _, m, _ in stencil], axis=1)
    cols = idx[:, None] + np.array([o for o, _, _ in stencil])[None, :]
    vals = np.broadcast_to(np.array([w for _, _, w in stencil]), present.shape)
    counts = present.sum(axis=1)
    offsets = np.concatenate([[0], np.cumsum(counts)])
    return CsrMatrix(n, n, offsets, cols[present], vals[present])


def submatrix(A: CsrMatrix, rows, cols: Iterable[int]) -> CsrMatrix:
    """Extract ``A[rows, cols]``; columns are renumbered by position in sorted ``cols``."""
    if isinstance(rows, range):
        if rows.step != 1:
            raise RangeError("row range must be contiguous")
        start, stop = rows.start, rows.stop
    else:
        start, stop = rows
    if not 0 <= start <= stop <= A.n_rows:
        raise RangeError(f"row range [{start}, {stop}) outside [0, {A.n_rows})")
    cols = np.unique(np.fromiter(cols, dtype=np.int64))
    if len(cols) and (cols[0] < 0 or cols[-1] >= A.n_cols):
        raise RangeError("column index out of range")
    remap = np.full(A.n_cols, -1, dtype=np.int64)
    remap[cols] = np.arange(len(cols))
    lo, hi = A.row_offsets[start], A.row_offsets[stop]
    ci = remap[A.col_indices[lo:hi]]
    keep = ci >= 0
    row_of = np.repeat(np.arange(stop - start), np.diff(A.row_offsets[start:stop + 1]))
    counts = np.bincount(row_of[keep], minlength=stop - start)
    offsets = np.concatenate([[0], np.cumsum(counts)])
    return CsrMatrix(stop - start, len(cols), offsets, ci[keep], A.values[lo:hi][keep])


def cholesky_factor(A_dense) -> tuple[np.ndarray, bool]:
    A_dense = np.asarray(A_dense, dtype=np.float64)
    if A_dense.ndim != 2 or A_dense.shape[0] != A_dense.shape[1]:
        raise ShapeError(f"expected a square matrix, got {A_dense.shape}")
    try:
        return scipy.linalg.cho_factor(A_dense, lower=True, check_finite=True)
    except np.linalg.LinAlgError as exc:
        raise NotSPDError(f"matrix is not positive definite: {exc}") from None


def cholesky_solve(A_dense, w) -> np.ndarray:
    """Solve ``A_dense @ y = w`` for SPD ``A_dense``."""
    w = np.asarray(w, dtype=np.float64)
    factor = cholesky_factor(A_dense)
    if w.shape != (factor[0].shape[0],):
        raise ShapeError(f"right-hand side {w.shape} vs matrix {factor[0].shape}")
    if len(w) == 0:
        return w.copy()
    return scipy.linalg.cho_solve(factor, w)


@dataclass(frozen=True)
class Partition:
    """Contiguous, balanced row blocks; rank s owns ``blocks[s]``."""

    n: int
    proc: int
    blocks: tuple[tuple[int, int], ...] = field(repr=False)

    @classmethod
    def balanced(cls, n: int, proc: int) -> "Partition":
        if proc < 1:
            raise ShapeError("need at least one rank")
        if n < proc:
            raise ShapeError(f"cannot split {n} rows over {proc} ranks")
        base, extra = divmod(n, proc)
        sizes = [base + (s < extra) for s in range(proc)]
        edges = np.concatenate([[0], np.cumsum(sizes)]).tolist()
        return cls(n, proc, tuple(zip(edges[:-1], edges[1:])))

    def block(self, s: int) -> range:
        lo, hi = self.blocks[s]
        return range(lo, hi)

    def size(self, s: int) -> int:
        lo, hi = self.blocks[s]
        return hi - lo

    def owner_of(self, i: int) -> int:
        starts = [lo for lo, _ in self.blocks]
        return int(np.searchsorted(starts, i, side="right") - 1)

    def indices(self, ranks: Iterable[int]) -> np.ndarray:
        ranks = sorted(set(ranks))
        if not ranks:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate([np.arange(*self.blocks[s]) for s in ranks])

    def split(self, v) -> list[np.ndarray]:
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.n,):
            raise ShapeError(f"vector of shape {v.shape} vs partition of {self.n}")
        return [v[lo:hi].copy() for lo, hi in self.blocks]

    def assemble(self, slices: Sequence[np.ndarray]) -> np.ndarray:
        if len(slices) != self.proc:
            raise ShapeError("one slice per rank required")
        return np.concatenate([np.asarray(s, dtype=np.float64) for s in slices])


@dataclass(frozen=True, eq=False)
class Preconditioner:
    """Diagonal preconditioner: identity or Jacobi (inverse diagonal of A)."""

    kind: str
    diag_inverse: np.ndarray

    @classmethod
    def identity(cls, n: int) -> "Preconditioner":
        return cls("identity", np.ones(n))

    @classmethod
    def jacobi(cls, A: CsrMatrix) -> "Preconditioner":
        d = A.diagonal()
        if np.any(~(d > 0)):
            raise NotSPDError("Jacobi needs a strictly positive diagonal")
        return cls("jacobi", 1.0 / d)

    @classmethod
    def build(cls, kind: str, A: CsrMatrix) -> "Preconditioner":
        if kind == "jacobi":
            return cls.jacobi(A)
        if kind == "identity":
            return cls.identity(A.n_rows)
        raise ValueError(f"unknown preconditioner {kind!r}")

    def apply(self, r, idx=None) -> np.ndarray:
        d = self.diag_inverse if idx is None else self.diag_inverse[idx]
        return d * r

    def solve_block(self, v, idx) -> np.ndarray:
        """Solve ``P[idx, idx] @ r = v``; P is diagonal so this is a division."""
        return v / self.diag_inverse[idx]
