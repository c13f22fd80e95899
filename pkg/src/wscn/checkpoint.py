"""Single-file binary checkpoint container.

Layout (all integers little-endian):

    magic   4 bytes  b"WSCN"
    u32     format version (currently 1)
    u32     metadata length, then that many bytes of JSON (sorted keys)
    u32     tensor count
            per tensor: u16 name length, name utf-8, u8 dtype tag,
            u8 rank, rank * u32 extents, raw C-order payload
    u32     quant-param count
            per entry: u16 name length, name utf-8, f64 scale,
            i32 zero point, f64 range min, f64 range max
    u32     CRC32 of everything above

Entries are written in sorted name order, so saving the result of a
load reproduces the original file byte for byte. Every read is bounds
checked and the checksum is verified before parsing; corruption raises
CheckpointError with the failing byte offset instead of returning
partial state.
"""

import json
import struct
import zlib

import numpy as np

from .errors import CheckpointError

MAGIC = b"WSCN"
FORMAT_VERSION = 1

_DTYPE_TAGS = {
    np.dtype(np.float32): 0,
    np.dtype(np.float64): 1,
    np.dtype(np.int8): 2,
    np.dtype(np.int32): 3,
    np.dtype(np.uint8): 4,
    np.dtype(np.int64): 5,
}
_TAG_DTYPES = {tag: dt for dt, tag in _DTYPE_TAGS.items()}


def save_checkpoint(path, arrays, meta=None, qparams=None):
    """Write named arrays (plus optional metadata and quantization
    ranges) to `path`. qparams maps name -> (scale, zero_point, min, max).
    """
    meta = dict(meta or {})
    qparams = dict(qparams or {})
    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", FORMAT_VERSION)
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    out += struct.pack("<I", len(meta_bytes))
    out += meta_bytes
    out += struct.pack("<I", len(arrays))
    for name in sorted(arrays):
        # asarray(order="C") rather than ascontiguousarray: the latter
        # silently promotes 0-d arrays to shape (1,)
        arr = np.asarray(arrays[name], order="C")
        if arr.dtype not in _DTYPE_TAGS:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        if arr.ndim > 255:
            raise CheckpointError(f"tensor {name!r} rank {arr.ndim} exceeds format limit")
        name_bytes = name.encode()
        if len(name_bytes) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name[:32]!r}...")
        out += struct.pack("<H", len(name_bytes))
        out += name_bytes
        out += struct.pack("<BB", _DTYPE_TAGS[arr.dtype], arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        if arr.dtype.byteorder == ">":  # pragma: no cover - numpy native is LE here
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        out += arr.tobytes()
    out += struct.pack("<I", len(qparams))
    for name in sorted(qparams):
        scale, zero_point, lo, hi = qparams[name]
        name_bytes = name.encode()
        out += struct.pack("<H", len(name_bytes))
        out += name_bytes
        out += struct.pack("<didd", float(scale), int(zero_point), float(lo), float(hi))
    out += struct.pack("<I", zlib.crc32(bytes(out)) & 0xFFFFFFFF)
    with open(path, "wb") as fh:
        fh.write(bytes(out))
    return len(out)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise CheckpointError(
                f"truncated file while reading {what}", offset=self.pos
            )
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path):
    """Read a checkpoint back as (arrays, meta, qparams)."""
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc
    if len(buf) < len(MAGIC) + 4:
        raise CheckpointError("file too small to be a checkpoint", offset=0)
    stored_crc = struct.unpack("<I", buf[-4:])[0]
    actual_crc = zlib.crc32(buf[:-4]) & 0xFFFFFFFF
    if stored_crc != actual_crc:
        raise CheckpointError(
            f"checksum mismatch (stored {stored_crc:#010x}, computed {actual_crc:#010x})",
            offset=len(buf) - 4,
        )
    r = _Reader(buf[:-4])
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointError("bad magic, not a checkpoint file", offset=0)
    (version,) = r.unpack("<I", "format version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {version}", offset=4)
    (meta_len,) = r.unpack("<I", "metadata length")
    meta_start = r.pos
    meta_bytes = r.take(meta_len, "metadata")
    try:
        meta = json.loads(meta_bytes.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt metadata: {exc}", offset=meta_start) from exc
    if not isinstance(meta, dict):
        raise CheckpointError("metadata must be a JSON object", offset=meta_start)

    arrays = {}
    (count,) = r.unpack("<I", "tensor count")
    for i in range(count):
        entry_start = r.pos
        (name_len,) = r.unpack("<H", f"tensor {i} name length")
        name = r.take(name_len, f"tensor {i} name").decode()
        tag, rank = r.unpack("<BB", f"tensor {name!r} dtype/rank")
        if tag not in _TAG_DTYPES:
            raise CheckpointError(
                f"tensor {name!r} has unknown dtype tag {tag}", offset=entry_start
            )
        shape = r.unpack(f"<{rank}I", f"tensor {name!r} shape")
        dtype = _TAG_DTYPES[tag]
        n_bytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        payload = r.take(n_bytes, f"tensor {name!r} payload")
        arrays[name] = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()

    qparams = {}
    (qcount,) = r.unpack("<I", "quant-param count")
    for i in range(qcount):
        (name_len,) = r.unpack("<H", f"quant entry {i} name length")
        name = r.take(name_len, f"quant entry {i} name").decode()
        scale, zero_point, lo, hi = r.unpack("<didd", f"quant entry {name!r}")
        qparams[name] = (scale, zero_point, lo, hi)

    if r.pos != len(r.buf):
        raise CheckpointError(
            f"{len(r.buf) - r.pos} trailing bytes after last entry", offset=r.pos
        )
    return arrays, meta, qparams
