"""Fixed-width index streams packed into bytes.

Stream layout (the low-level half of the container format; the record and
container layouts are documented in ``tensor_store``):

* every index occupies exactly ``width`` bits, ``width`` in {2, 3, 4};
* indices are laid out back to back, LSB-first within each byte (index 0
  occupies the lowest-order bits of byte 0);
* the final byte is zero-padded; a stream of ``n`` indices is always
  ``ceil(n * width / 8)`` bytes.

Packing is bijective given (width, count), which is what makes container
round-trips byte-exact.
"""

from __future__ import annotations

import numpy as np

from .errors import CorruptData, DomainError

SUPPORTED_WIDTHS = (2, 3, 4)


def packed_size(count: int, width: int) -> int:
    """Number of bytes a stream of `count` indices occupies."""
    return (count * width + 7) // 8


def pack_indices(indices: np.ndarray, width: int) -> bytes:
    """Pack unsigned integers < 2**width into an LSB-first byte stream."""
    if width not in SUPPORTED_WIDTHS:
        raise DomainError(f"unsupported index width {width}")
    idx = np.ascontiguousarray(indices, dtype=np.uint8)
    if idx.size and int(idx.max()) >= (1 << width):
        raise DomainError(f"index {int(idx.max())} does not fit in {width} bits")
    # (n, width) bit matrix, LSB first, then flatten and pad to whole bytes.
    shifts = np.arange(width, dtype=np.uint8)
    bits = (idx[:, None] >> shifts) & 1
    flat = bits.reshape(-1)
    pad = (-flat.size) % 8
    if pad:
        flat = np.concatenate([flat, np.zeros(pad, dtype=np.uint8)])
    return np.packbits(flat, bitorder="little").tobytes()


def unpack_indices(buf: bytes, width: int, count: int) -> np.ndarray:
    """Inverse of pack_indices; returns a uint8 array of length `count`."""
    if width not in SUPPORTED_WIDTHS:
        raise DomainError(f"unsupported index width {width}")
    need = packed_size(count, width)
    if len(buf) < need:
        raise CorruptData(
            f"stream holds {len(buf)} bytes, {need} required for {count} indices"
        )
    raw = np.frombuffer(buf, dtype=np.uint8, count=need)
    bits = np.unpackbits(raw, bitorder="little")[: count * width]
    weights = (1 << np.arange(width, dtype=np.uint8)).astype(np.uint8)
    return (bits.reshape(count, width) * weights).sum(axis=1).astype(np.uint8)
