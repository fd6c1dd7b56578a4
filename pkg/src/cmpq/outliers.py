"""Outlier protection: salient channels and worst quantization residuals.

Two disjoint sets are kept in fp16 instead of being quantized:

* whole channels whose activation norm ranks in the top ``ratio_act``
  fraction (rows of the weight matrix);
* individual elements whose first-pass quantization residual ranks in the
  top ``ratio_q`` fraction of all entries.

Both sets are materialized as one CSR matrix that the inference path adds
back onto the quantized reconstruction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, EmptyInputError, InternalError, NumericError, ShapeError


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


@dataclass(eq=False)
class ChannelOutlierSet:
    """Protected channel indices (ascending) and their fp16 rows."""

    indices: np.ndarray           # int64, strictly increasing
    rows: np.ndarray              # float16, shape (len(indices), d_out)

    @property
    def count(self) -> int:
        return int(self.indices.size)


@dataclass(eq=False)
class ElementOutlierSet:
    """Protected element coordinates in (row, col) lexicographic order."""

    rows: np.ndarray              # int64
    cols: np.ndarray              # int64
    values: np.ndarray            # float16

    @property
    def count(self) -> int:
        return int(self.rows.size)


@dataclass(eq=False)
class SparseMatrixCSR:
    """Compressed-sparse-row fp16 matrix (row_ptr / col_idx / values)."""

    row_ptr: np.ndarray           # int64, length d_in + 1, nondecreasing
    col_idx: np.ndarray           # int64, strictly increasing within a row
    values: np.ndarray            # float16
    n_cols: int

    @property
    def n_rows(self) -> int:
        return int(self.row_ptr.size - 1)

    @property
    def nnz(self) -> int:
        return int(self.row_ptr[-1])

    def validate(self) -> None:
        if self.row_ptr[0] != 0 or np.any(np.diff(self.row_ptr) < 0):
            raise InternalError("row_ptr must start at 0 and be nondecreasing")
        if self.col_idx.size != self.nnz or self.values.size != self.nnz:
            raise InternalError("col_idx/values length disagrees with row_ptr")
        if self.col_idx.size and (self.col_idx.min() < 0 or self.col_idx.max() >= self.n_cols):
            raise InternalError("column index out of range")
        for r in range(self.n_rows):
            cols = self.col_idx[self.row_ptr[r] : self.row_ptr[r + 1]]
            if cols.size > 1 and np.any(np.diff(cols) <= 0):
                raise InternalError(f"row {r} columns are not strictly increasing")

    def densify(self, dtype=np.float32) -> np.ndarray:
        out = np.zeros((self.n_rows, self.n_cols), dtype=dtype)
        rows = np.repeat(np.arange(self.n_rows), np.diff(self.row_ptr))
        out[rows, self.col_idx] = self.values.astype(dtype)
        return out

    def occupancy_mask(self) -> np.ndarray:
        """Boolean d_in x d_out mask of stored coordinates."""
        mask = np.zeros((self.n_rows, self.n_cols), dtype=bool)
        rows = np.repeat(np.arange(self.n_rows), np.diff(self.row_ptr))
        mask[rows, self.col_idx] = True
        return mask

    def matmul(self, x: np.ndarray, dtype=np.float32) -> np.ndarray:
        """x @ self for x of shape (n, d_in); row loop over occupied rows."""
        x = np.asarray(x)
        out = np.zeros((x.shape[0], self.n_cols), dtype=dtype)
        occupied = np.flatnonzero(np.diff(self.row_ptr))
        for r in occupied:
            lo, hi = int(self.row_ptr[r]), int(self.row_ptr[r + 1])
            vals = self.values[lo:hi].astype(dtype)
            out[:, self.col_idx[lo:hi]] += x[:, r, None].astype(dtype) * vals[None, :]
        return out


def top_k_indices(values: np.ndarray, k: int) -> np.ndarray:
    """Positions of the k largest values; ties resolved to lower position.

    Two-phase selection: argpartition isolates the candidates, then the
    boundary value's ties are filled in ascending position order.
    """
    n = values.size
    if k <= 0:
        return np.empty(0, dtype=np.int64)
    if k >= n:
        return np.arange(n, dtype=np.int64)
    part = np.argpartition(-values, k - 1)[:k]
    threshold = values[part].min()
    sure = np.flatnonzero(values > threshold)
    fill = np.flatnonzero(values == threshold)[: k - sure.size]
    return np.sort(np.concatenate([sure, fill]))


def extract_activation_outliers(
    weights: np.ndarray,
    norms,
    ratio_act: float,
) -> tuple[np.ndarray, ChannelOutlierSet]:
    """Zero out the most activation-salient channels and return them.

    The round(ratio_act * d_in) channels with the largest norms (ties to
    lower index) are copied into the outlier set as fp16 rows; the
    remaining matrix has those rows zeroed.
    """
    w = np.asarray(weights, dtype=np.float32)
    if w.ndim != 2:
        raise ShapeError(f"weight matrix must be 2-D, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise NumericError("weights contain non-finite values")
    a = np.asarray(getattr(norms, "values", norms), dtype=np.float64)
    if a.shape != (w.shape[0],):
        raise ShapeError(f"norms length {a.shape} does not match d_in {w.shape[0]}")
    if not 0.0 <= ratio_act < 1.0:
        raise DomainError(f"ratio_act {ratio_act} outside [0, 1)")

    d_in = w.shape[0]
    count = _round_half_up(ratio_act * d_in)
    if count >= d_in:
        raise EmptyInputError("activation-outlier ratio leaves no channels to quantize")
    picked = top_k_indices(a, count)
    w_prime = w.copy()
    rows = w[picked].astype(np.float16)
    w_prime[picked] = 0.0
    return w_prime, ChannelOutlierSet(indices=picked, rows=rows)


def extract_quant_outliers(
    w_prime: np.ndarray,
    w_prime_q: np.ndarray,
    ratio_q: float,
    protected=(),
) -> ElementOutlierSet:
    """Select the elements the first quantization pass served worst.

    Picks the round(ratio_q * d_in * d_out) coordinates with the largest
    absolute residual |w_prime - w_prime_q| outside protected channels;
    ties resolve in (row, col) lexicographic order.  Values are the
    originals from w_prime, stored fp16.
    """
    wp = np.asarray(w_prime, dtype=np.float64)
    wq = np.asarray(w_prime_q, dtype=np.float64)
    if wp.shape != wq.shape or wp.ndim != 2:
        raise ShapeError(f"shape mismatch {wp.shape} vs {wq.shape}")
    if not 0.0 <= ratio_q < 1.0:
        raise DomainError(f"ratio_q {ratio_q} outside [0, 1)")

    d_in, d_out = wp.shape
    count = _round_half_up(ratio_q * d_in * d_out)
    residual = np.abs(wp - wq)
    protected = np.asarray(list(protected), dtype=np.int64)
    if protected.size:
        residual[protected] = -np.inf
        # never let the selection spill into protected rows
        count = min(count, (d_in - protected.size) * d_out)
    flat = top_k_indices(residual.reshape(-1), count)
    rows, cols = np.divmod(flat, d_out)
    values = wp[rows, cols].astype(np.float16)
    return ElementOutlierSet(rows=rows, cols=cols, values=values)


def to_csr(
    channels: ChannelOutlierSet,
    elements: ElementOutlierSet,
    d_in: int,
    d_out: int,
) -> SparseMatrixCSR:
    """Merge both outlier sets into one CSR matrix.

    Protected channels contribute full rows, element outliers single
    cells; the two must be disjoint by the extraction contracts.
    """
    if np.isin(elements.rows, channels.indices).any():
        raise InternalError("element outlier falls inside a protected channel")

    ch_rows = np.repeat(channels.indices, d_out)
    ch_cols = np.tile(np.arange(d_out, dtype=np.int64), channels.count)
    ch_vals = channels.rows.reshape(-1)

    rows = np.concatenate([ch_rows, elements.rows])
    cols = np.concatenate([ch_cols, elements.cols])
    vals = np.concatenate([ch_vals, elements.values])

    order = np.lexsort((cols, rows))
    rows, cols, vals = rows[order], cols[order], vals[order]
    row_ptr = np.zeros(d_in + 1, dtype=np.int64)
    np.add.at(row_ptr, rows + 1, 1)
    np.cumsum(row_ptr, out=row_ptr)

    csr = SparseMatrixCSR(
        row_ptr=row_ptr,
        col_idx=cols,
        values=vals.astype(np.float16),
        n_cols=d_out,
    )
    csr.validate()
    return csr
