"""The .dtpw binary weight container.

Little-endian throughout::

    magic   4 bytes  "DTPW"
    version u32      = 1
    count   u32
    then per tensor:
        name_len u16
        name     UTF-8 bytes
        dtype    u8   (0 = float32, 1 = float64)
        ndim     u8
        dims     ndim * u32
        payload  prod(dims) * itemsize bytes, row-major

dtype code 1 is an extension beyond the float32 baseline so that the
round-trip guarantee holds for both working precisions.
"""

import struct

import numpy as np

from .errors import (
    BadMagic,
    DuplicateTensorName,
    TruncatedPayload,
    UnsupportedDtype,
    UnsupportedVersion,
    WeightFormatError,
)

MAGIC = b"DTPW"
VERSION = 1

_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_FOR = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class WeightStore:
    """Ordered name -> float array map."""

    def __init__(self):
        self._tensors = {}

    def add(self, name, array):
        if name in self._tensors:
            raise DuplicateTensorName(f"duplicate tensor name {name!r}")
        # not ascontiguousarray: that would promote 0-d arrays to 1-d
        a = np.asarray(array, order="C")
        if a.dtype not in _CODE_FOR:
            raise UnsupportedDtype(f"tensor {name!r} has unsupported dtype {a.dtype}")
        self._tensors[name] = a

    def __contains__(self, name):
        return name in self._tensors

    def __getitem__(self, name):
        return self._tensors[name]

    def __len__(self):
        return len(self._tensors)

    def names(self):
        return list(self._tensors)

    def items(self):
        return self._tensors.items()


def save_weights(store, path):
    parts = [MAGIC, struct.pack("<II", VERSION, len(store))]
    for name, a in store.items():
        nb = name.encode("utf-8")
        if len(nb) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name!r}")
        if a.ndim > 0xFF:
            raise ValueError(f"tensor {name!r} has too many dims")
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<BB", _CODE_FOR[a.dtype], a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(a.astype(a.dtype.newbyteorder("<"), copy=False).tobytes())
    blob = b"".join(parts)
    if hasattr(path, "write"):
        path.write(blob)
    else:
        with open(path, "wb") as f:
            f.write(blob)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise TruncatedPayload(f"truncated payload at {what}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out


def load_weights(path):
    if hasattr(path, "read"):
        data = path.read()
    else:
        with open(path, "rb") as f:
            data = f.read()
    r = _Reader(data)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise BadMagic(f"bad magic {magic!r}, expected {MAGIC!r}")
    (version,) = struct.unpack("<I", r.take(4, "version"))
    if version != VERSION:
        raise UnsupportedVersion(f"unsupported format version {version}")
    (count,) = struct.unpack("<I", r.take(4, "tensor count"))
    store = WeightStore()
    for i in range(count):
        (name_len,) = struct.unpack("<H", r.take(2, f"tensor {i} name length"))
        name = r.take(name_len, f"tensor {i} name").decode("utf-8")
        code, ndim = struct.unpack("<BB", r.take(2, f"tensor {name!r} header"))
        if code not in _DTYPE_CODES:
            raise UnsupportedDtype(f"tensor {name!r} has unknown dtype code {code}")
        dt = _DTYPE_CODES[code]
        dims = struct.unpack(f"<{ndim}I", r.take(4 * ndim, f"tensor {name!r} dims"))
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize if ndim else dt.itemsize
        payload = r.take(nbytes, f"tensor {name!r}")
        a = np.frombuffer(payload, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
        store.add(name, a)
    if r.pos != len(data):
        raise WeightFormatError(
            f"{len(data) - r.pos} trailing bytes after the last declared tensor"
        )
    return store
