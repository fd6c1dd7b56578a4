"""Reference forward path for quantized layers.

``forward`` mirrors how a mixed-precision kernel would run: the weight
matrix is decomposed into per-precision channel groups, each group is a
dense codebook-lookup submatrix multiplied with the matching input slice,
and the fp16 outliers are applied through a CSR multiply.  Accumulation
is float32 (float64 in test mode) — this path exists to be right, not
fast.
"""

from __future__ import annotations

import numpy as np

from . import packing
from .errors import CorruptData, NumericError, ShapeError
from .layer import QuantizedLayer


def channel_indices(layer: QuantizedLayer, channel: int) -> np.ndarray:
    """Unpacked index stream for one quantized channel."""
    width = int(layer.precision.bits[channel])
    if width == 0:
        raise CorruptData(f"channel {channel} is fp16-protected, it has no stream")
    return packing.unpack_indices(layer.streams[channel], width, layer.d_out)


def precision_groups(layer: QuantizedLayer) -> dict[int, np.ndarray]:
    """Quantized channel indices grouped by bit width (ascending)."""
    groups = {}
    for width in (2, 3, 4):
        members = np.flatnonzero(layer.precision.bits == width)
        if members.size:
            groups[width] = members
    return groups


def _group_matrix(layer: QuantizedLayer, members: np.ndarray, dtype) -> np.ndarray:
    """Dense submatrix for one precision group with outliers zeroed out."""
    out = np.empty((members.size, layer.d_out), dtype=dtype)
    for i, ch in enumerate(members):
        ch = int(ch)
        lut = layer.codebooks[ch].astype(dtype)
        idx = channel_indices(layer, ch)
        if idx.size and int(idx.max()) >= lut.size:
            raise CorruptData(f"channel {ch} stream exceeds its codebook")
        out[i] = lut[idx]
    # outlier coordinates are owned by the CSR side
    csr = layer.outliers
    for i, ch in enumerate(members):
        lo, hi = int(csr.row_ptr[ch]), int(csr.row_ptr[ch + 1])
        if hi > lo:
            out[i, csr.col_idx[lo:hi]] = 0
    return out


def dequantize_layer(layer: QuantizedLayer, dtype=np.float32) -> np.ndarray:
    """Dense reconstruction: codebook lookups with CSR values overriding."""
    out = np.zeros((layer.d_in, layer.d_out), dtype=dtype)
    for width, members in precision_groups(layer).items():
        out[members] = _group_matrix(layer, members, dtype)
    csr = layer.outliers
    rows = np.repeat(np.arange(layer.d_in), np.diff(csr.row_ptr))
    out[rows, csr.col_idx] = csr.values.astype(dtype)
    return out


def forward(layer: QuantizedLayer, x, float64: bool = False) -> np.ndarray:
    """Compute x @ W-hat by precision-group decomposition plus CSR multiply.

    Accepts a single length-d_in vector or an (n, d_in) matrix and agrees
    with ``x @ dequantize_layer(layer)`` to float accumulation error.
    """
    x = np.asarray(x)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != layer.d_in:
        raise ShapeError(f"input width {x.shape} does not match d_in {layer.d_in}")
    if not np.all(np.isfinite(x)):
        raise NumericError("input contains non-finite values")

    acc = np.float64 if float64 else np.float32
    x = x.astype(acc)
    y = np.zeros((x.shape[0], layer.d_out), dtype=acc)
    for width, members in precision_groups(layer).items():
        y += x[:, members] @ _group_matrix(layer, members, acc)
    y += layer.outliers.matmul(x, dtype=acc)
    return y[0] if squeeze else y
