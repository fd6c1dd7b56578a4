"""The quantized-layer artifact and its configuration.

A QuantizedLayer is the serialized unit of the container format: the
precision map, per-channel fp16 codebooks, bit-packed index streams, the
CSR outlier matrix, and summary stats.  Outlier handling is positional:
index streams stay dense (one index per weight), and any coordinate
present in the CSR matrix wins over the codebook value at reconstruction.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .allocation import PrecisionMap
from .errors import ConfigError
from .outliers import SparseMatrixCSR

DEFAULT_RATIO_ACT = 0.0045
DEFAULT_RATIO_Q = 0.0005


@dataclass(frozen=True)
class QuantizeConfig:
    """Knobs for the per-layer quantization flow (fully deterministic)."""

    budget: float = 3.0
    ratio_act: float = DEFAULT_RATIO_ACT
    ratio_q: float = DEFAULT_RATIO_Q
    max_iter: int = 100
    tol: float = 1e-6
    denominator_variant: str = "paper"
    cluster_method: str = "lloyd"      # "lloyd" | "exact" (DP oracle, capped)

    def __post_init__(self):
        if self.ratio_act < 0 or self.ratio_q < 0:
            raise ConfigError("outlier ratios must be nonnegative")
        if self.ratio_act + self.ratio_q >= 1.0:
            raise ConfigError("outlier ratios must sum below 1")
        if self.cluster_method not in ("lloyd", "exact"):
            raise ConfigError(f"unknown cluster method {self.cluster_method!r}")
        if self.denominator_variant not in ("paper", "conventional"):
            raise ConfigError(f"unknown denominator variant {self.denominator_variant!r}")

    def with_budget(self, budget: float) -> "QuantizeConfig":
        return replace(self, budget=budget)


@dataclass(eq=False)
class QuantizedLayer:
    """One packed layer: codebooks + index streams + outliers + stats.

    ``codebooks[i]`` is a float16 array of exactly 2**bits[i] entries
    (degenerate codebooks are padded by repeating the last centroid), or
    None for fp16-protected channels; ``streams[i]`` is the bit-packed
    index stream of d_out entries, or None likewise.
    """

    name: str
    d_in: int
    d_out: int
    precision: PrecisionMap
    codebooks: list
    streams: list
    outliers: SparseMatrixCSR
    stats: dict = field(default_factory=dict)

    def nominal_bits(self) -> float:
        from .allocation import nominal_avg_bits

        return nominal_avg_bits(self.precision)


@dataclass(eq=False)
class CmpqContainer:
    """In-memory image of a container file: layers plus global metadata."""

    layers: list
    metadata: dict = field(default_factory=dict)


def layers_equal(a: QuantizedLayer, b: QuantizedLayer) -> bool:
    """Field-by-field equality, arrays compared exactly (bit-for-bit)."""
    if (a.name, a.d_in, a.d_out) != (b.name, b.d_in, b.d_out):
        return False
    if not np.array_equal(a.precision.bits, b.precision.bits):
        return False
    if not np.array_equal(a.precision.fp16_channels, b.precision.fp16_channels):
        return False
    ta, tb = a.precision.thresholds, b.precision.thresholds
    if (ta is None) != (tb is None) or (ta and (ta.low, ta.high) != (tb.low, tb.high)):
        return False
    for ca, cb in zip(a.codebooks, b.codebooks, strict=True):
        if (ca is None) != (cb is None):
            return False
        if ca is not None and not np.array_equal(
            ca.view(np.uint16), cb.view(np.uint16)
        ):
            return False
    if a.streams != b.streams:
        return False
    oa, ob = a.outliers, b.outliers
    if oa.n_cols != ob.n_cols or not np.array_equal(oa.row_ptr, ob.row_ptr):
        return False
    if not np.array_equal(oa.col_idx, ob.col_idx):
        return False
    if not np.array_equal(oa.values.view(np.uint16), ob.values.view(np.uint16)):
        return False
    return a.stats == b.stats
