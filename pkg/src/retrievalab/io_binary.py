"""Shared helpers for the little-endian binary artifact formats.

Every on-disk artifact is laid out as

    magic (4 bytes) | payload | crc32 of everything before the crc (u32)

so a truncated or bit-flipped file fails the checksum and a file of the
wrong kind fails the magic comparison before anything is parsed.
"""

import struct
import zlib
from pathlib import Path

from retrievalab.errors import FormatError

_STR_LEN = struct.Struct("<H")
_CRC = struct.Struct("<I")


def pack_str(out: bytearray, s: str) -> None:
    data = s.encode("utf-8")
    if len(data) > 0xFFFF:
        raise ValueError("string field longer than 65535 bytes")
    out += _STR_LEN.pack(len(data))
    out += data


class Cursor:
    """Sequential reader over a bytes payload with bounds checking."""

    def __init__(self, buf: bytes, label: str):
        self.buf = buf
        self.pos = 0
        self.label = label

    def take(self, n: int) -> bytes:
        end = self.pos + n
        if end > len(self.buf):
            raise FormatError(f"{self.label}: payload ends early at byte {self.pos}")
        chunk = self.buf[self.pos:end]
        self.pos = end
        return chunk

    def unpack(self, fmt: str):
        st = struct.Struct("<" + fmt)
        return st.unpack(self.take(st.size))

    def read_str(self) -> str:
        (n,) = self.unpack("H")
        return self.take(n).decode("utf-8")

    def expect_end(self) -> None:
        if self.pos != len(self.buf):
            raise FormatError(
                f"{self.label}: {len(self.buf) - self.pos} trailing bytes after payload"
            )


def write_artifact(path, magic: bytes, payload: bytes) -> None:
    blob = magic + payload
    crc = zlib.crc32(blob) & 0xFFFFFFFF
    Path(path).write_bytes(blob + _CRC.pack(crc))


def read_artifact(path, magic: bytes, label: str) -> bytes:
    data = Path(path).read_bytes()
    if len(data) < len(magic) + _CRC.size:
        raise FormatError(f"{label}: file too short to be a valid artifact")
    if data[:len(magic)] != magic:
        raise FormatError(
            f"{label}: bad magic {data[:len(magic)]!r}, expected {magic!r}"
        )
    (stored,) = _CRC.unpack(data[-_CRC.size:])
    actual = zlib.crc32(data[:-_CRC.size]) & 0xFFFFFFFF
    if stored != actual:
        raise FormatError(
            f"{label}: checksum mismatch (stored {stored:#010x}, computed {actual:#010x})"
        )
    return data[len(magic):-_CRC.size]
