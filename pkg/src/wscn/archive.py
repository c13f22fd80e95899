"""Dataset archive I/O: a zip of two NPY v1.0 entries.

Entry 0 holds the die grids as uint8 (N, 52, 52) with states
0=background, 1=pass, 2=fail; entry 1 holds uint8 one-hot labels
(N, 38). The NPY entries are parsed and written by hand and validation
is fail-closed: anything structurally off raises ArchiveError with a
byte offset, and content violating the value-domain contract raises
DataError before any data is returned.

Writing is byte-deterministic (stored entries, fixed timestamps), so
identical inputs produce identical archive files.
"""

import ast
import struct
import zipfile

import numpy as np

from .errors import ArchiveError, DataError

_MAGIC = b"\x93NUMPY"
GRID_SIDE = 52
NUM_CLASSES = 38


def write_npy(arr):
    """Serialize an ndarray as NPY v1.0 bytes (C order, 64-byte aligned header)."""
    arr = np.ascontiguousarray(arr)
    if arr.dtype.byteorder == ">":
        raise ArchiveError("refusing to write big-endian data")
    header = "{'descr': %r, 'fortran_order': False, 'shape': %s, }" % (
        arr.dtype.str,
        repr(arr.shape),
    )
    unpadded = len(_MAGIC) + 2 + 2 + len(header) + 1
    pad = (-unpadded) % 64
    header = header + " " * pad + "\n"
    return b"".join(
        (_MAGIC, b"\x01\x00", struct.pack("<H", len(header)),
         header.encode("latin-1"), arr.tobytes())
    )


def read_npy(buf, entry=None):
    """Parse NPY v1.0 bytes. Fails closed with byte offsets."""
    def bail(msg, offset):
        raise ArchiveError(msg, offset=offset, entry=entry)

    if len(buf) < 10:
        bail(f"truncated NPY stream ({len(buf)} bytes)", len(buf))
    if buf[:6] != _MAGIC:
        bail(f"bad NPY magic {buf[:6]!r}", 0)
    if buf[6:8] != b"\x01\x00":
        bail(f"unsupported NPY version {buf[6]}.{buf[7]}", 6)
    (hlen,) = struct.unpack("<H", buf[8:10])
    if 10 + hlen > len(buf):
        bail(f"header length {hlen} overruns stream", 8)
    try:
        header = ast.literal_eval(buf[10 : 10 + hlen].decode("latin-1"))
    except (ValueError, SyntaxError):
        bail("unparseable NPY header dict", 10)
    if not isinstance(header, dict) or set(header) != {"descr", "fortran_order", "shape"}:
        bail(f"unexpected NPY header keys {sorted(header) if isinstance(header, dict) else header}", 10)
    if header["fortran_order"] is not False:
        bail("fortran-ordered NPY entries are not supported", 10)
    try:
        dtype = np.dtype(header["descr"])
    except TypeError:
        bail(f"bad NPY descr {header['descr']!r}", 10)
    if dtype.byteorder == ">":
        bail("big-endian NPY entries are not supported", 10)
    shape = header["shape"]
    if not (isinstance(shape, tuple) and all(isinstance(s, int) and s >= 0 for s in shape)):
        bail(f"bad NPY shape {shape!r}", 10)
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    payload = buf[10 + hlen :]
    if len(payload) != expected:
        bail(f"payload is {len(payload)} bytes, expected {expected}", 10 + hlen)
    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()


def save_archive(path, grids, labels):
    """Write grids (N,52,52 uint8) + integer labels (N,) as an archive."""
    grids = np.asarray(grids)
    labels = np.asarray(labels)
    if grids.ndim != 3 or grids.shape[1:] != (GRID_SIDE, GRID_SIDE):
        raise DataError(f"grids must be (N,{GRID_SIDE},{GRID_SIDE}), got {grids.shape}")
    if grids.dtype != np.uint8:
        raise DataError(f"grids must be uint8, got {grids.dtype}")
    if labels.shape != (grids.shape[0],):
        raise DataError(f"labels must be ({grids.shape[0]},), got {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= NUM_CLASSES:
        raise DataError(f"labels must be in [0, {NUM_CLASSES})")
    onehot = np.zeros((len(labels), NUM_CLASSES), dtype=np.uint8)
    onehot[np.arange(len(labels)), labels] = 1
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name, arr in (("arr_0.npy", grids), ("arr_1.npy", onehot)):
            info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
            info.external_attr = 0o644 << 16
            zf.writestr(info, write_npy(arr))


def load_archive(path):
    """Read an archive back as (grids uint8 (N,52,52), labels int64 (N,)).

    Accepts any zip whose first two ``.npy`` entries are the grid and
    label arrays; entries named arr_0.npy/arr_1.npy take precedence.
    """
    try:
        zf = zipfile.ZipFile(path)
    except (zipfile.BadZipFile, OSError) as exc:
        raise ArchiveError(f"cannot open archive {path}: {exc}") from exc
    with zf:
        names = [n for n in zf.namelist() if n.endswith(".npy")]
        if "arr_0.npy" in names and "arr_1.npy" in names:
            pair = ("arr_0.npy", "arr_1.npy")
        elif len(names) >= 2:
            pair = tuple(names[:2])
        else:
            raise ArchiveError(f"archive must hold two NPY entries, found {names}")
        try:
            raw0 = zf.read(pair[0])
            raw1 = zf.read(pair[1])
        except zipfile.BadZipFile as exc:
            raise ArchiveError(f"corrupt archive entry: {exc}") from exc
    grids = read_npy(raw0, entry=pair[0])
    onehot = read_npy(raw1, entry=pair[1])
    if grids.dtype != np.uint8:
        raise DataError(f"{pair[0]}: grids must be uint8, got {grids.dtype}")
    if grids.ndim != 3 or grids.shape[1:] != (GRID_SIDE, GRID_SIDE):
        raise DataError(f"{pair[0]}: expected (N,{GRID_SIDE},{GRID_SIDE}), got {grids.shape}")
    if onehot.dtype != np.uint8:
        raise DataError(f"{pair[1]}: labels must be uint8, got {onehot.dtype}")
    if onehot.ndim != 2 or onehot.shape[1] != NUM_CLASSES:
        raise DataError(f"{pair[1]}: expected (N,{NUM_CLASSES}), got {onehot.shape}")
    if onehot.shape[0] != grids.shape[0]:
        raise DataError(
            f"entry row counts differ: {grids.shape[0]} grids vs {onehot.shape[0]} labels"
        )
    if grids.max(initial=0) > 2:
        raise DataError("die states must be 0 (background), 1 (pass), or 2 (fail)")
    if onehot.max(initial=0) > 1 or (onehot.sum(axis=1) != 1).any():
        raise DataError("label rows must be one-hot")
    return grids, onehot.argmax(axis=1).astype(np.int64)
