"""Canonical tag-length-value field encoding.

Every field is ``tag (1 byte) | length (4 bytes, big-endian) | value``.
Tokens, registry records and wire messages all use this layout so that
they are bit-exact across implementations.
"""

from __future__ import annotations

import struct
from typing import Iterable

_HEADER = struct.Struct(">BI")


class CodecError(ValueError):
    pass


def encode_fields(fields: Iterable[tuple[int, bytes]]) -> bytes:
    out = bytearray()
    for tag, value in fields:
        if not 0 <= tag <= 0xFF:
            raise CodecError(f"tag out of range: {tag}")
        out += _HEADER.pack(tag, len(value))
        out += value
    return bytes(out)


def decode_fields(data: bytes) -> dict[int, bytes]:
    """Decode a TLV blob into ``{tag: value}``; duplicate tags are rejected."""
    fields: dict[int, bytes] = {}
    pos = 0
    end = len(data)
    while pos < end:
        if end - pos < _HEADER.size:
            raise CodecError("truncated field header")
        tag, length = _HEADER.unpack_from(data, pos)
        pos += _HEADER.size
        if end - pos < length:
            raise CodecError("truncated field value")
        if tag in fields:
            raise CodecError(f"duplicate tag {tag}")
        fields[tag] = bytes(data[pos:pos + length])
        pos += length
    return fields


def u64(value: int) -> bytes:
    if not 0 <= value < 1 << 64:
        raise CodecError(f"value does not fit in u64: {value}")
    return value.to_bytes(8, "big")


def read_u64(raw: bytes) -> int:
    if len(raw) != 8:
        raise CodecError("u64 field must be 8 bytes")
    return int.from_bytes(raw, "big")


def length_prefixed(*parts: bytes) -> bytes:
    """Concatenate ``len(p) (4 bytes BE) | p`` for each part."""
    return b"".join(len(p).to_bytes(4, "big") + p for p in parts)
