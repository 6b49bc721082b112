"""Little-endian binary container helpers shared by the wire formats.

All on-disk artifacts end with a 64-bit FNV-1a checksum over every byte
that precedes it. FNV is a sequential byte hash, so hashing is the slow
part of loading a large blob (about 6 s for the 80 MB backbone file on one
core); callers hash once per process.
"""

import struct

FNV_OFFSET = 0xcbf29ce484222325
FNV_PRIME = 0x100000001b3
_MASK = 0xFFFFFFFFFFFFFFFF


class FormatError(ValueError):
    """Malformed container: bad magic, version, checksum or truncation."""


def fnv1a(data, h=FNV_OFFSET):
    for b in data:
        h = ((h ^ b) * FNV_PRIME) & _MASK
    return h


def finalize(payload: bytearray) -> bytes:
    """Append the FNV-1a checksum of the payload and return bytes."""
    payload += struct.pack("<Q", fnv1a(payload))
    return bytes(payload)


def split_checked(blob: bytes, what: str) -> bytes:
    """Verify and strip the trailing checksum."""
    if len(blob) < 8:
        raise FormatError(f"{what}: truncated before checksum")
    body, stored = blob[:-8], struct.unpack("<Q", blob[-8:])[0]
    actual = fnv1a(body)
    if stored != actual:
        raise FormatError(
            f"{what}: checksum mismatch (stored {stored:#x}, computed {actual:#x})")
    return body


class Reader:
    """Cursor over a byte payload with truncation checks."""

    def __init__(self, buf: bytes, what: str):
        self.buf = buf
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.what}: truncated at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def f32(self) -> float:
        return struct.unpack("<f", self.take(4))[0]

    def f32_array(self, count, shape=None):
        import numpy as np
        arr = np.frombuffer(self.take(4 * count), dtype="<f4").copy()
        return arr.reshape(shape) if shape is not None else arr

    def expect_magic(self, magic: bytes):
        got = self.take(len(magic))
        if got != magic:
            raise FormatError(
                f"{self.what}: bad magic {got!r}, expected {magic!r}")

    def done(self):
        if self.pos != len(self.buf):
            raise FormatError(
                f"{self.what}: {len(self.buf) - self.pos} trailing bytes")


def pack_u32(*vals) -> bytes:
    return struct.pack(f"<{len(vals)}I", *vals)


def pack_u64(v: int) -> bytes:
    return struct.pack("<Q", v)


def pack_f32(v: float) -> bytes:
    return struct.pack("<f", v)


def pack_f32_array(arr) -> bytes:
    import numpy as np
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()
