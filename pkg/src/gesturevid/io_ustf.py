"""Reader/writer for the USTF binary tensor file format.

Layout: 4 magic bytes ``USTF``, 1 version byte (=1), 1 dtype code byte
(1 = float32, 2 = float64), 1 ndim byte, 1 padding byte, ``ndim``
little-endian uint64 extents, then the raw row-major little-endian
payload.  Writing then reading a tensor must reproduce it bit-exactly.
"""

import struct
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"USTF"
VERSION = 1

_DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODE_FOR_DTYPE = {np.dtype("float32"): 1, np.dtype("float64"): 2}


def write_tensor(path, array):
    """Write ``array`` (float32 or float64) to ``path`` in USTF format."""
    array = np.ascontiguousarray(array)
    if array.dtype not in _CODE_FOR_DTYPE:
        raise DataError(f"USTF supports float32/float64 only, got {array.dtype}")
    code = _CODE_FOR_DTYPE[array.dtype]
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<BBBB", VERSION, code, array.ndim, 0))
        for extent in array.shape:
            fh.write(struct.pack("<Q", extent))
        fh.write(array.astype(array.dtype.newbyteorder("<"), copy=False).tobytes())


def read_tensor(path):
    """Read a USTF file back into a numpy array (native byte order)."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise DataError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        header = fh.read(4)
        if len(header) != 4:
            raise DataError(f"{path}: truncated header")
        version, code, ndim, _pad = struct.unpack("<BBBB", header)
        if version != VERSION:
            raise DataError(f"{path}: unsupported USTF version {version}")
        if code not in _DTYPE_CODES:
            raise DataError(f"{path}: unknown dtype code {code}")
        shape = []
        for _ in range(ndim):
            raw = fh.read(8)
            if len(raw) != 8:
                raise DataError(f"{path}: truncated extent list")
            shape.append(struct.unpack("<Q", raw)[0])
        dtype = _DTYPE_CODES[code]
        count = 1
        for extent in shape:
            count *= extent
        payload = fh.read(count * dtype.itemsize)
        if len(payload) != count * dtype.itemsize:
            raise DataError(f"{path}: payload shorter than header promises")
        array = np.frombuffer(payload, dtype=dtype).reshape(shape)
    # native-order copy so callers can write to it
    return array.astype(dtype.newbyteorder("="), copy=True)
