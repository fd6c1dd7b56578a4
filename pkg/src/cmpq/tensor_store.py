"""File formats: safetensors input tensors and the CMPQ container.

safetensors (read/write): 8-byte little-endian header length, JSON header
mapping tensor names to {dtype, shape, data_offsets}, then the raw tensor
bytes.  Everything is materialized as float32 in memory; float16 exists
only on disk.

CMPQ container (all integers little-endian, floats IEEE-754):

    offset  size  field
    0       4     magic b"CMPQ"
    4       2     u16 format version (currently 1)
    6       4     u32 layer count
    10      4     u32 metadata length M
    14      M     canonical JSON metadata (sorted keys, compact)
    14+M    4     u32 CRC-32 of bytes [0, 14+M)
    then per layer:
            4     u32 payload length P
            P     layer record (layout below)
            4     u32 CRC-32 of the record bytes

Layer record:

    u16 name length | name UTF-8
    u32 d_in | u32 d_out
    u8 thresholds-present flag
    f64 low threshold | f64 high threshold   (NaN encodes "absent")
    precision codes, 2 bits per channel, ceil(d_in/4) bytes
        (0 = fp16-protected, 1/2/3 = 2/3/4-bit)
    per quantized channel in ascending index order:
        codebook: 2**bits float16 values
    per quantized channel in ascending index order:
        index stream: ceil(d_out * bits / 8) bytes (see packing)
    u32 nnz
    row_ptr: (d_in + 1) u32 | col_idx: nnz u32 | values: nnz float16
    u32 stats length | canonical JSON stats

Records are byte-deterministic for a given layer, which is what the
round-trip and corruption tests rely on.
"""

from __future__ import annotations

import json
import math
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import packing
from .allocation import PrecisionMap, Thresholds
from .errors import (
    ChecksumError,
    CorruptTensor,
    DomainError,
    FormatError,
    IoError,
    UnsupportedDType,
    VersionError,
)
from .layer import CmpqContainer, QuantizedLayer
from .outliers import SparseMatrixCSR

MAGIC = b"CMPQ"
FORMAT_VERSION = 1

_ST_DTYPES = {"F16": np.float16, "F32": np.float32}
_ST_KNOWN = {"F64", "BF16", "I8", "I16", "I32", "I64", "U8", "U16", "U32", "U64", "BOOL"}
_ST_NAMES = {"F16": "float16", "F32": "float32"}


@dataclass(eq=False)
class NamedTensorSet:
    """Uniquely named tensors, all float32 in memory."""

    entries: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)


# ---------------------------------------------------------------------------
# safetensors
# ---------------------------------------------------------------------------


def load_tensors(path, allow_types=("float16", "float32")) -> NamedTensorSet:
    """Read a safetensors file, widening every tensor to float32."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc

    if len(raw) < 8:
        raise FormatError(f"{path}: too short for a safetensors header")
    (header_len,) = struct.unpack("<Q", raw[:8])
    if header_len > len(raw) - 8:
        raise FormatError(f"{path}: header length {header_len} exceeds file size")
    try:
        header = json.loads(raw[8 : 8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: malformed JSON header: {exc}") from exc
    if not isinstance(header, dict):
        raise FormatError(f"{path}: header must be a JSON object")

    data = raw[8 + header_len :]
    entries: dict[str, np.ndarray] = {}
    implied_end = 0
    for name, info in header.items():
        if name == "__metadata__":
            continue
        if not isinstance(info, dict) or not {"dtype", "shape", "data_offsets"} <= info.keys():
            raise FormatError(f"{path}: tensor {name!r} entry is malformed")
        code = info["dtype"]
        if code not in _ST_DTYPES:
            raise UnsupportedDType(
                f"{path}: tensor {name!r} has dtype {code!r}"
                + ("" if code in _ST_KNOWN else " (unrecognized)")
            )
        if _ST_NAMES[code] not in allow_types:
            raise UnsupportedDType(
                f"{path}: tensor {name!r} dtype {code} not in allow list"
            )
        shape = info["shape"]
        if not isinstance(shape, list) or any(
            not isinstance(s, int) or s < 0 for s in shape
        ):
            raise FormatError(f"{path}: tensor {name!r} has invalid shape {shape!r}")
        begin, end = info["data_offsets"]
        dtype = _ST_DTYPES[code]
        expect = math.prod(shape) * dtype().itemsize
        if not (0 <= begin <= end <= len(data)) or end - begin != expect:
            raise CorruptTensor(
                f"{path}: tensor {name!r} spans [{begin}, {end}) but "
                f"shape {shape} implies {expect} bytes in a {len(data)}-byte region"
            )
        implied_end = max(implied_end, end)
        values = np.frombuffer(data, dtype=dtype, count=math.prod(shape), offset=begin)
        entries[name] = values.reshape(shape).astype(np.float32)
    if implied_end != len(data):
        raise CorruptTensor(
            f"{path}: data region is {len(data)} bytes but header implies {implied_end}"
        )
    return NamedTensorSet(entries=entries)


def write_tensors(path, entries: dict, dtype=np.float32) -> None:
    """Write tensors as a safetensors file (atomic; gapless data region)."""
    dtype = np.dtype(dtype)
    code = {np.dtype(np.float16): "F16", np.dtype(np.float32): "F32"}.get(dtype)
    if code is None:
        raise DomainError(f"only float16/float32 output supported, not {dtype}")

    header: dict[str, dict] = {}
    blobs: list[bytes] = []
    offset = 0
    for name, array in entries.items():
        arr = np.ascontiguousarray(np.asarray(array), dtype=dtype)
        blob = arr.tobytes()
        header[name] = {
            "dtype": code,
            "shape": list(arr.shape),
            "data_offsets": [offset, offset + len(blob)],
        }
        blobs.append(blob)
        offset += len(blob)

    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    head += b" " * (-(8 + len(head)) % 8)  # align the data region to 8 bytes
    payload = struct.pack("<Q", len(head)) + head + b"".join(blobs)
    atomic_write(path, payload)


# ---------------------------------------------------------------------------
# CMPQ container
# ---------------------------------------------------------------------------


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def encode_layer(layer: QuantizedLayer) -> bytes:
    """Serialize one layer record (see module docstring for the layout)."""
    name = layer.name.encode("utf-8")
    parts = [struct.pack("<H", len(name)), name]
    parts.append(struct.pack("<II", layer.d_in, layer.d_out))

    thr = layer.precision.thresholds
    low = math.nan if thr is None or thr.low is None else thr.low
    high = math.nan if thr is None or thr.high is None else thr.high
    parts.append(struct.pack("<Bdd", 0 if thr is None else 1, low, high))

    bits = layer.precision.bits
    codes = np.where(bits == 0, 0, bits - 1).astype(np.uint8)
    parts.append(packing.pack_indices(codes, 2))

    for ch in layer.precision.quantized_channels():
        parts.append(layer.codebooks[ch].astype("<f2").tobytes())
    for ch in layer.precision.quantized_channels():
        parts.append(layer.streams[ch])

    csr = layer.outliers
    parts.append(struct.pack("<I", csr.nnz))
    parts.append(csr.row_ptr.astype("<u4").tobytes())
    parts.append(csr.col_idx.astype("<u4").tobytes())
    parts.append(csr.values.astype("<f2").tobytes())

    stats = _canonical_json(layer.stats)
    parts.append(struct.pack("<I", len(stats)))
    parts.append(stats)
    return b"".join(parts)


class _Cursor:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError("layer record truncated")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_layer(buf: bytes) -> QuantizedLayer:
    """Inverse of encode_layer."""
    cur = _Cursor(buf)
    (name_len,) = cur.unpack("<H")
    name = cur.take(name_len).decode("utf-8")
    d_in, d_out = cur.unpack("<II")
    has_thr, low, high = cur.unpack("<Bdd")
    thresholds = None
    if has_thr:
        thresholds = Thresholds(
            low=None if math.isnan(low) else low,
            high=None if math.isnan(high) else high,
        )

    codes = packing.unpack_indices(cur.take(packing.packed_size(d_in, 2)), 2, d_in)
    bits = np.where(codes == 0, 0, codes + 1).astype(np.uint8)
    precision = PrecisionMap(
        bits=bits,
        fp16_channels=np.flatnonzero(bits == 0).astype(np.int64),
        thresholds=thresholds,
    )

    codebooks: list = [None] * d_in
    streams: list = [None] * d_in
    quantized = precision.quantized_channels()
    for ch in quantized:
        k = 1 << int(bits[ch])
        codebooks[ch] = np.frombuffer(cur.take(2 * k), dtype="<f2").astype(np.float16)
    for ch in quantized:
        streams[ch] = cur.take(packing.packed_size(d_out, int(bits[ch])))

    (nnz,) = cur.unpack("<I")
    row_ptr = np.frombuffer(cur.take(4 * (d_in + 1)), dtype="<u4").astype(np.int64)
    col_idx = np.frombuffer(cur.take(4 * nnz), dtype="<u4").astype(np.int64)
    values = np.frombuffer(cur.take(2 * nnz), dtype="<f2").astype(np.float16)
    (stats_len,) = cur.unpack("<I")
    stats = json.loads(cur.take(stats_len).decode("utf-8"))
    if cur.pos != len(buf):
        raise FormatError("layer record has trailing bytes")

    return QuantizedLayer(
        name=name,
        d_in=d_in,
        d_out=d_out,
        precision=precision,
        codebooks=codebooks,
        streams=streams,
        outliers=SparseMatrixCSR(
            row_ptr=row_ptr, col_idx=col_idx, values=values, n_cols=d_out
        ),
        stats=stats,
    )


def write_container(path, layers, metadata=None) -> None:
    """Write layers plus global metadata as a CMPQ file (atomic)."""
    layers = list(layers)
    if not layers:
        raise DomainError("container must hold at least one layer")
    meta = _canonical_json(metadata or {})
    head = MAGIC + struct.pack("<HII", FORMAT_VERSION, len(layers), len(meta)) + meta
    parts = [head, struct.pack("<I", zlib.crc32(head))]
    for layer in layers:
        record = encode_layer(layer)
        parts.append(struct.pack("<I", len(record)))
        parts.append(record)
        parts.append(struct.pack("<I", zlib.crc32(record)))
    atomic_write(path, b"".join(parts))


def read_container(path) -> CmpqContainer:
    """Read a CMPQ file back into layers + metadata; inverse of write."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc

    cur = _Cursor(raw)
    try:
        magic = cur.take(4)
    except FormatError:
        raise FormatError(f"{path}: too short for a CMPQ header") from None
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    version, layer_count, meta_len = cur.unpack("<HII")
    if version > FORMAT_VERSION:
        raise VersionError(
            f"{path}: container version {version} is newer than supported "
            f"({FORMAT_VERSION})"
        )
    meta_raw = cur.take(meta_len)
    (head_crc,) = cur.unpack("<I")
    if head_crc != zlib.crc32(raw[: 14 + meta_len]):
        raise ChecksumError(f"{path}: header/metadata checksum mismatch")
    metadata = json.loads(meta_raw.decode("utf-8"))

    layers = []
    for i in range(layer_count):
        (payload_len,) = cur.unpack("<I")
        record = cur.take(payload_len)
        (crc,) = cur.unpack("<I")
        if crc != zlib.crc32(record):
            raise ChecksumError(f"{path}: layer {i} checksum mismatch")
        layers.append(decode_layer(record))
    if cur.pos != len(raw):
        raise FormatError(f"{path}: trailing bytes after last layer")
    return CmpqContainer(layers=layers, metadata=metadata)


def atomic_write(path, payload: bytes) -> None:
    """Write via a temp file + rename so failures never leave partial output."""
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    try:
        fd, tmp = tempfile.mkstemp(dir=directory, prefix=".cmpq-")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(payload)
            os.replace(tmp, path)
        except BaseException:
            os.unlink(tmp)
            raise
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
