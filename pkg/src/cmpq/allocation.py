"""Channel-wise precision allocation under a fractional average-bit budget.

Given per-channel activation norms and a target average width b in [2, 4],
channels get 2, 3 or 4 bits:

* b > 3: the most salient channels are promoted to 4 bits, the rest stay
  at 3;
* b < 3: the least salient channels are demoted to 2 bits, the rest stay
  at 3;
* b == 3: the bottom 1% are demoted and the top 1% promoted;
* b == 2 / b == 4: uniform 2-bit / 4-bit maps.

Counts come from nearest-rank quantiles (round-half-up), and selection is
purely order-based, so scaling all norms by any positive factor leaves the
allocation unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, EmptyInputError, NumericError


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


@dataclass(frozen=True)
class Thresholds:
    """Norm values at the selection boundaries, for inspection reports."""

    low: float | None = None
    high: float | None = None


@dataclass(eq=False)
class PrecisionMap:
    """Per-channel bit widths plus the set of fp16-protected channels.

    ``bits[i]`` is 2, 3 or 4 for quantized channels and 0 for protected
    (fp16) channels; ``fp16_channels`` lists the protected indices in
    ascending order.
    """

    bits: np.ndarray
    fp16_channels: np.ndarray = field(
        default_factory=lambda: np.empty(0, dtype=np.int64)
    )
    thresholds: Thresholds | None = None

    @property
    def d_in(self) -> int:
        return int(self.bits.shape[0])

    def quantized_channels(self) -> np.ndarray:
        """Indices of channels that carry a codebook (ascending)."""
        return np.flatnonzero(self.bits > 0)

    def histogram(self) -> dict[str, int]:
        counts = {"fp16": int(self.fp16_channels.size)}
        for width in (2, 3, 4):
            counts[f"{width}bit"] = int(np.count_nonzero(self.bits == width))
        return counts


def _quantile_count(q: float, n: int) -> int:
    """Nearest-rank count for fraction q of n items, clamped to [1, n]."""
    return min(max(_round_half_up(q * n), 1), n)


def allocate(
    norms,
    budget: float,
    excluded=(),
) -> PrecisionMap:
    """Assign per-channel precisions for an average-bit budget in [2, 4].

    `norms` is a length-d_in nonnegative vector (or an object with a
    ``values`` attribute holding one).  `excluded` channels are protected
    in fp16: they are removed before quantiles are taken and do not count
    toward the average.

    Ties at a selection boundary are resolved toward lower channel index,
    so the result is deterministic and invariant under positive rescaling
    of the norms.
    """
    a = np.asarray(getattr(norms, "values", norms), dtype=np.float64)
    if a.ndim != 1:
        raise DomainError(f"norms must be 1-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NumericError("norms contain non-finite values")
    if np.any(a < 0):
        raise DomainError("norms must be nonnegative")
    if not 2.0 <= budget <= 4.0:
        raise DomainError(f"bit budget {budget} outside [2, 4]")

    d_in = a.shape[0]
    fp16 = np.unique(np.asarray(list(excluded), dtype=np.int64))
    if fp16.size and (fp16[0] < 0 or fp16[-1] >= d_in):
        raise DomainError("excluded channel index out of range")
    active = np.setdiff1d(np.arange(d_in, dtype=np.int64), fp16)
    n = active.size
    if n == 0:
        raise EmptyInputError("every channel is excluded from allocation")

    bits = np.zeros(d_in, dtype=np.uint8)
    bits[active] = 3

    act_norms = a[active]
    # Stable sorts give ascending channel index within equal norms, which
    # is exactly the documented tie-break for both selection directions.
    order_asc = active[np.argsort(act_norms, kind="stable")]
    order_desc = active[np.argsort(-act_norms, kind="stable")]

    low = high = None
    if budget == 2.0:
        bits[active] = 2
    elif budget == 4.0:
        bits[active] = 4
    elif budget < 3.0:
        n2 = _quantile_count(3.0 - budget, n)
        bits[order_asc[:n2]] = 2
        low = float(a[order_asc[n2 - 1]])
    elif budget > 3.0:
        n4 = n - _quantile_count(1.0 - (budget - 3.0), n)
        if n4:
            bits[order_desc[:n4]] = 4
        high = float(a[order_asc[n - n4 - 1]]) if n4 < n else None
    else:  # budget == 3.0: demote the bottom 1%, promote the top 1%
        n2 = _quantile_count(0.01, n)
        n4 = n - _quantile_count(0.99, n)
        bits[order_asc[:n2]] = 2
        if n4:
            bits[order_desc[:n4]] = 4
        low = float(a[order_asc[n2 - 1]])
        high = float(a[order_asc[n - n4 - 1]]) if n4 < n else None

    return PrecisionMap(bits=bits, fp16_channels=fp16, thresholds=Thresholds(low, high))


def nominal_avg_bits(pm: PrecisionMap) -> float:
    """Arithmetic mean of the bit widths over non-fp16 channels."""
    widths = pm.bits[pm.bits > 0]
    if widths.size == 0:
        raise EmptyInputError("precision map has no quantized channels")
    return float(widths.mean(dtype=np.float64))
