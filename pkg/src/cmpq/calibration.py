"""Per-channel activation L2 norms accumulated over calibration batches.

Sums of squares are kept in float64 and rooted once at the end, so any
split of the same rows into batches produces bitwise-identical norms.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import DomainError, NumericError, ShapeError


@dataclass(eq=False)
class ActivationNorms:
    """Length-d_in nonnegative norm vector plus the token count behind it."""

    values: np.ndarray            # float64
    token_count: int = 0

    @property
    def d_in(self) -> int:
        return int(self.values.shape[0])


def accumulate_norms(batches: Iterable[np.ndarray]) -> ActivationNorms:
    """Accumulate sqrt(sum of squares) per channel over activation batches.

    Every batch is an (n, d_in) matrix of finite values; all batches must
    agree on d_in.  The result does not depend on how rows are grouped
    into batches.
    """
    sumsq: np.ndarray | None = None
    tokens = 0
    for batch in batches:
        x = np.asarray(batch, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
            raise ShapeError(f"activation batch must be (n, d_in), got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise NumericError("activation batch contains non-finite values")
        if sumsq is None:
            sumsq = np.zeros(x.shape[1], dtype=np.float64)
        elif x.shape[1] != sumsq.shape[0]:
            raise ShapeError(
                f"batch has d_in {x.shape[1]}, expected {sumsq.shape[0]}"
            )
        # One fold step per row: the running sum then never depends on how
        # rows were grouped into batches, so split invariance is bitwise.
        for row in x:
            sumsq += row * row
        tokens += x.shape[0]
    if sumsq is None:
        raise ShapeError("no activation batches supplied")
    return ActivationNorms(values=np.sqrt(sumsq), token_count=tokens)


def load_norms(tensors, name: str) -> ActivationNorms:
    """Adopt a pre-computed 1-D norm tensor from a loaded tensor set."""
    values = tensors.entries[name] if hasattr(tensors, "entries") else tensors[name]
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1:
        raise ShapeError(f"norm tensor {name!r} must be 1-D, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise NumericError(f"norm tensor {name!r} contains non-finite values")
    if np.any(v < 0):
        raise DomainError(f"norm tensor {name!r} has negative entries")
    return ActivationNorms(values=v.copy(), token_count=0)
