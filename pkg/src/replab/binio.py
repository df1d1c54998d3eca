"""Shared binary container format for datasets and network checkpoints.

Layout used by every file this package writes:

    magic (4 bytes) | version (u16 LE) | payload | crc32 (u32 LE)

The payload is a sequence of primitive records written with the helpers
below. Everything is little-endian regardless of host byte order, and the
trailing CRC32 covers magic + version + payload.
"""

from __future__ import annotations

import json
import struct
import zlib

import numpy as np


class FileFormatError(Exception):
    """File is not in the expected container format."""


class FileVersionError(FileFormatError):
    """Container version is not supported by this code."""


class FileTruncatedError(FileFormatError):
    """File ended before the declared content was read."""


class FileChecksumError(FileFormatError):
    """Trailing CRC32 does not match the file body."""


class Writer:
    def __init__(self, magic: bytes, version: int):
        if len(magic) != 4:
            raise ValueError("magic must be exactly 4 bytes")
        self._chunks = [magic, struct.pack("<H", version)]

    def u8(self, value: int) -> None:
        self._chunks.append(struct.pack("<B", value))

    def u32(self, value: int) -> None:
        self._chunks.append(struct.pack("<I", value))

    def i64(self, value: int) -> None:
        self._chunks.append(struct.pack("<q", value))

    def f64(self, value: float) -> None:
        self._chunks.append(struct.pack("<d", value))

    def bytes_(self, data: bytes) -> None:
        self.u32(len(data))
        self._chunks.append(data)

    def text(self, value: str) -> None:
        self.bytes_(value.encode("utf-8"))

    def json_(self, obj) -> None:
        self.text(json.dumps(obj, sort_keys=True, separators=(",", ":")))

    def array(self, arr: np.ndarray) -> None:
        arr = np.ascontiguousarray(arr, dtype="<f8")
        self.u8(arr.ndim)
        for dim in arr.shape:
            self.u32(dim)
        self._chunks.append(arr.tobytes())

    def finish(self) -> bytes:
        body = b"".join(self._chunks)
        return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)

    def write(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.finish())


class Reader:
    def __init__(self, data: bytes, magic: bytes, version: int):
        if len(data) < 10:
            raise FileTruncatedError("file shorter than minimal container")
        body, (stored_crc,) = data[:-4], struct.unpack("<I", data[-4:])
        if zlib.crc32(body) & 0xFFFFFFFF != stored_crc:
            raise FileChecksumError("CRC32 mismatch")
        if body[:4] != magic:
            raise FileFormatError(
                f"bad magic {body[:4]!r}, expected {magic!r}")
        (got_version,) = struct.unpack("<H", body[4:6])
        if got_version != version:
            raise FileVersionError(
                f"unsupported version {got_version}, expected {version}")
        self._data = body
        self._pos = 6

    def _take(self, n: int) -> bytes:
        if self._pos + n > len(self._data):
            raise FileTruncatedError("record extends past end of file")
        chunk = self._data[self._pos:self._pos + n]
        self._pos += n
        return chunk

    def u8(self) -> int:
        return struct.unpack("<B", self._take(1))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self._take(4))[0]

    def i64(self) -> int:
        return struct.unpack("<q", self._take(8))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self._take(8))[0]

    def bytes_(self) -> bytes:
        return self._take(self.u32())

    def text(self) -> str:
        return self.bytes_().decode("utf-8")

    def json_(self):
        return json.loads(self.text())

    def array(self) -> np.ndarray:
        ndim = self.u8()
        shape = tuple(self.u32() for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        raw = self._take(count * 8)
        return np.frombuffer(raw, dtype="<f8").reshape(shape).copy()

    def done(self) -> bool:
        return self._pos == len(self._data)


def read_file(path, magic: bytes, version: int) -> Reader:
    """Open, checksum-verify and position a reader after the header.

    Truncation of the trailing CRC itself surfaces as a checksum error;
    truncation inside the payload surfaces as FileTruncatedError when the
    missing record is read.
    """
    with open(path, "rb") as fh:
        return Reader(fh.read(), magic, version)
