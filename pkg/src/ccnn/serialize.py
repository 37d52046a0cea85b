"""Binary serialization primitives and the feature-file format.

Both file formats are little-endian with a trailing CRC32 over every
preceding byte:

- model files: magic "CCNN", format version u16, then the layer payload
  (see model.save_model);
- feature files: magic "CCNF", u32 sample count, u32 channels, u32 grid
  height, u32 grid width, float32 row-major payload.

Numeric arrays are stored with a dtype tag (0 = float32, 1 = float64,
2 = int64), a u8 rank, u32 dimensions, and raw row-major little-endian
data.
"""

from __future__ import annotations

import json
import struct
import zlib

import numpy as np

from .errors import FormatError

MODEL_MAGIC = b"CCNN"
MODEL_VERSION = 1
FEATURE_MAGIC = b"CCNF"

_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_TAG_FOR_KIND = {"f4": 0, "f8": 1, "i8": 2}


class Writer:
    """Accumulates little-endian binary fields."""

    def __init__(self):
        self._buf = bytearray()

    def u8(self, v: int) -> None:
        self._buf += struct.pack("<B", v)

    def u16(self, v: int) -> None:
        self._buf += struct.pack("<H", v)

    def u32(self, v: int) -> None:
        self._buf += struct.pack("<I", v)

    def raw(self, data: bytes) -> None:
        self._buf += data

    def text(self, s: str) -> None:
        data = s.encode("utf-8")
        self.u32(len(data))
        self.raw(data)

    def json(self, obj) -> None:
        self.text(json.dumps(obj, sort_keys=True))

    def array(self, arr: np.ndarray) -> None:
        arr = np.ascontiguousarray(arr)
        if arr.dtype == np.float32:
            tag, dt = 0, _DTYPE_TAGS[0]
        elif arr.dtype == np.float64:
            tag, dt = 1, _DTYPE_TAGS[1]
        elif arr.dtype == np.int64:
            tag, dt = 2, _DTYPE_TAGS[2]
        else:
            raise ValueError(f"unsupported array dtype {arr.dtype}")
        self.u8(tag)
        self.u8(arr.ndim)
        for dim in arr.shape:
            self.u32(dim)
        self.raw(arr.astype(dt, copy=False).tobytes())

    def finish_with_crc(self) -> bytes:
        """Return the buffer with its CRC32 appended."""
        crc = zlib.crc32(bytes(self._buf)) & 0xFFFFFFFF
        return bytes(self._buf) + struct.pack("<I", crc)


class Reader:
    """Bounds-checked little-endian field reader."""

    def __init__(self, data: bytes, path="<bytes>"):
        self._data = data
        self._pos = 0
        self._path = path

    def _take(self, nbytes: int) -> bytes:
        if self._pos + nbytes > len(self._data):
            raise FormatError(f"{self._path}: truncated file")
        out = self._data[self._pos:self._pos + nbytes]
        self._pos += nbytes
        return out

    def u8(self) -> int:
        return struct.unpack("<B", self._take(1))[0]

    def u16(self) -> int:
        return struct.unpack("<H", self._take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self._take(4))[0]

    def text(self) -> str:
        n = self.u32()
        return self._take(n).decode("utf-8")

    def json(self):
        return json.loads(self.text())

    def array(self) -> np.ndarray:
        tag = self.u8()
        if tag not in _DTYPE_TAGS:
            raise FormatError(f"{self._path}: unknown array dtype tag {tag}")
        ndim = self.u8()
        shape = tuple(self.u32() for _ in range(ndim))
        count = 1
        for dim in shape:
            count *= dim
        raw = self._take(count * _DTYPE_TAGS[tag].itemsize)
        return np.frombuffer(raw, dtype=_DTYPE_TAGS[tag]).reshape(shape).copy()

    def done(self) -> bool:
        return self._pos == len(self._data)


def checked_payload(data: bytes, magic: bytes, path) -> bytes:
    """Validate magic and trailing CRC32; return the payload between them."""
    if len(data) < len(magic) + 4:
        raise FormatError(f"{path}: truncated file ({len(data)} bytes)")
    if data[:len(magic)] != magic:
        raise FormatError(
            f"{path}: bad magic {data[:len(magic)]!r}, expected {magic!r}"
        )
    stored = struct.unpack("<I", data[-4:])[0]
    actual = zlib.crc32(data[:-4]) & 0xFFFFFFFF
    if stored != actual:
        raise FormatError(
            f"{path}: checksum mismatch (stored 0x{stored:08x}, computed "
            f"0x{actual:08x}); file is corrupted or truncated"
        )
    return data[len(magic):-4]


def save_features(path, features) -> None:
    """Write an (n, channels, grid_h, grid_w) stack as a feature file.

    The payload is float32; float64 input is downcast.
    """
    arr = np.asarray(features)
    if arr.ndim != 4:
        raise ValueError(
            f"features must be (n, channels, grid_h, grid_w), got shape "
            f"{arr.shape}"
        )
    w = Writer()
    w.raw(FEATURE_MAGIC)
    for dim in arr.shape:
        w.u32(dim)
    w.raw(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(w.finish_with_crc())


def load_features(path) -> np.ndarray:
    """Read a feature file back as a float32 (n, channels, gh, gw) array."""
    with open(path, "rb") as fh:
        data = fh.read()
    payload = checked_payload(data, FEATURE_MAGIC, path)
    r = Reader(payload, path)
    n, c, gh, gw = r.u32(), r.u32(), r.u32(), r.u32()
    raw = r._take(n * c * gh * gw * 4)
    if not r.done():
        raise FormatError(f"{path}: trailing bytes after payload")
    return np.frombuffer(raw, dtype="<f4").reshape(n, c, gh, gw).copy()
