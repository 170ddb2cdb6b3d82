"""Small helpers shared by the binary containers (PMAT, PTEX, PCDC, PCAL, PMLP).

Every container starts with a 4-byte ASCII magic followed by a u8 version.
All integers and floats are little-endian.
"""

import hashlib
import struct

import numpy as np

VERSION = 1


class FormatError(ValueError):
    """Raised when a binary container or wire message is malformed."""


def header(magic: bytes) -> bytes:
    return magic + struct.pack("<B", VERSION)


def check_header(buf: bytes, magic: bytes) -> int:
    """Validate magic + version and return the offset just past them."""
    if len(buf) < 5:
        raise FormatError(f"truncated {magic.decode()} container")
    if buf[:4] != magic:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {magic!r}")
    if buf[4] != VERSION:
        raise FormatError(f"unsupported {magic.decode()} version {buf[4]}")
    return 5


class Reader:
    """Sequential little-endian reader over a bytes buffer."""

    def __init__(self, buf: bytes, offset: int = 0):
        self.buf = buf
        self.pos = offset

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.buf):
            raise FormatError("unexpected end of buffer")
        vals = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return vals if len(vals) > 1 else vals[0]

    def array(self, dtype: str, count: int) -> np.ndarray:
        dt = np.dtype(dtype)
        nbytes = dt.itemsize * count
        if self.pos + nbytes > len(self.buf):
            raise FormatError("unexpected end of buffer")
        out = np.frombuffer(self.buf, dtype=dt, count=count, offset=self.pos).copy()
        self.pos += nbytes
        return out

    def done(self):
        if self.pos != len(self.buf):
            raise FormatError(f"{len(self.buf) - self.pos} trailing bytes")


def hash64(*chunks: bytes) -> int:
    """Nonzero 64-bit content hash (blake2b); 0 is reserved for 'unset'."""
    h = hashlib.blake2b(digest_size=8)
    for c in chunks:
        h.update(c)
    value = int.from_bytes(h.digest(), "little")
    return value or 1
