"""Protocol messages and their canonical binary encoding.

A frame is ``type (1 byte) | TLV fields``; see ``docs/protocol.md`` for the
tag tables.  Decoding is strict: unknown types, missing or extra fields and
non-canonical bit padding are all rejected with ``WireFormatError``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Union

from ._codec import CodecError, decode_fields, encode_fields, read_u64, u64
from .errors import WireFormatError

F_CID = 0x01
F_S = 0x02
F_R = 0x03
F_UET = 0x04
F_B = 0x05
F_ENC_T = 0x06
F_ENC_SK = 0x07
F_ENC_T_SK = 0x08
F_REASON = 0x09


@dataclass(frozen=True)
class ServiceRequest:
    cid: bytes


@dataclass(frozen=True)
class ChallengeMsg:
    s: int
    r_cloudserv: bytes


@dataclass(frozen=True)
class SolutionMsg:
    uet: bytes
    b: tuple[int, ...] = field(repr=False)
    s: int
    r_cloudserv: bytes
    cid: bytes
    enc_t: bytes


@dataclass(frozen=True)
class SessionGrant:
    enc_sk: bytes
    uet: bytes


@dataclass(frozen=True)
class SessionConfirm:
    uet: bytes
    enc_t_sk: bytes


@dataclass(frozen=True)
class RefreshRequest:
    """Sub-session key request: proves the current SK over a fresh timestamp."""

    uet: bytes
    enc_t_sk: bytes


@dataclass(frozen=True)
class Rejected:
    reason: str


ProtocolMessage = Union[
    ServiceRequest, ChallengeMsg, SolutionMsg, SessionGrant, SessionConfirm, RefreshRequest, Rejected
]

# type byte, class, [(attribute, tag, kind)]
_LAYOUT = {
    0x01: (ServiceRequest, [("cid", F_CID, "bytes")]),
    0x02: (ChallengeMsg, [("s", F_S, "u64"), ("r_cloudserv", F_R, "bytes")]),
    0x03: (SolutionMsg, [
        ("uet", F_UET, "bytes"),
        ("b", F_B, "bits"),
        ("s", F_S, "u64"),
        ("r_cloudserv", F_R, "bytes"),
        ("cid", F_CID, "bytes"),
        ("enc_t", F_ENC_T, "bytes"),
    ]),
    0x04: (SessionGrant, [("enc_sk", F_ENC_SK, "bytes"), ("uet", F_UET, "bytes")]),
    0x05: (SessionConfirm, [("uet", F_UET, "bytes"), ("enc_t_sk", F_ENC_T_SK, "bytes")]),
    0x06: (RefreshRequest, [("uet", F_UET, "bytes"), ("enc_t_sk", F_ENC_T_SK, "bytes")]),
    0x07: (Rejected, [("reason", F_REASON, "str")]),
}
_TYPE_OF = {cls: t for t, (cls, _) in _LAYOUT.items()}


def pack_bits(bits: tuple[int, ...]) -> bytes:
    """``n (u16 BE) | bits packed MSB-first, zero padded``."""
    n = len(bits)
    if n > 0xFFFF:
        raise WireFormatError(f"bit vector too long: {n}")
    acc = 0
    for b in bits:
        if b not in (0, 1):
            raise WireFormatError("bit vector must contain only 0 and 1")
        acc = (acc << 1) | b
    nbytes = (n + 7) // 8
    acc <<= nbytes * 8 - n
    return n.to_bytes(2, "big") + acc.to_bytes(nbytes, "big")


def unpack_bits(raw: bytes) -> tuple[int, ...]:
    if len(raw) < 2:
        raise WireFormatError("truncated bit vector")
    n = int.from_bytes(raw[:2], "big")
    body = raw[2:]
    nbytes = (n + 7) // 8
    if len(body) != nbytes:
        raise WireFormatError("bit vector length mismatch")
    acc = int.from_bytes(body, "big")
    pad = nbytes * 8 - n
    if acc & ((1 << pad) - 1):
        raise WireFormatError("non-zero padding bits")
    acc >>= pad
    return tuple((acc >> (n - 1 - i)) & 1 for i in range(n))


def encode_message(msg: ProtocolMessage) -> bytes:
    try:
        mtype = _TYPE_OF[type(msg)]
    except KeyError:
        raise WireFormatError(f"not a protocol message: {type(msg).__name__}") from None
    out = []
    for attr, tag, kind in _LAYOUT[mtype][1]:
        value = getattr(msg, attr)
        if kind == "u64":
            out.append((tag, u64(value)))
        elif kind == "bits":
            out.append((tag, pack_bits(tuple(value))))
        elif kind == "str":
            out.append((tag, value.encode("utf-8")))
        else:
            out.append((tag, bytes(value)))
    return bytes([mtype]) + encode_fields(out)


def decode_message(data: bytes) -> ProtocolMessage:
    if not data:
        raise WireFormatError("empty frame")
    layout = _LAYOUT.get(data[0])
    if layout is None:
        raise WireFormatError(f"unknown message type {data[0]:#04x}")
    cls, field_specs = layout
    try:
        raw = decode_fields(data[1:])
    except CodecError as exc:
        raise WireFormatError(str(exc)) from exc
    expected = {tag for _, tag, _ in field_specs}
    if set(raw) != expected:
        raise WireFormatError(f"{cls.__name__}: fields {sorted(raw)} != {sorted(expected)}")
    kwargs = {}
    for attr, tag, kind in field_specs:
        value = raw[tag]
        try:
            if kind == "u64":
                kwargs[attr] = read_u64(value)
            elif kind == "bits":
                kwargs[attr] = unpack_bits(value)
            elif kind == "str":
                kwargs[attr] = value.decode("utf-8")
            else:
                kwargs[attr] = value
        except (CodecError, UnicodeDecodeError) as exc:
            raise WireFormatError(f"{cls.__name__}.{attr}: {exc}") from exc
    return cls(**kwargs)


def describe(msg: ProtocolMessage) -> str:
    """One-line human summary for traces; long byte strings are abbreviated."""
    parts = []
    for f in fields(msg):
        value = getattr(msg, f.name)
        if isinstance(value, bytes):
            text = value.hex()
            shown = text if len(text) <= 16 else f"{text[:12]}..({len(value)}B)"
            if f.name == "cid":
                shown = value.decode("utf-8", "replace")
        elif isinstance(value, tuple):
            shown = f"<{len(value)} bits, {sum(value)} set>"
        else:
            shown = str(value)
        parts.append(f"{f.name}={shown}")
    return f"{type(msg).__name__}(" + ", ".join(parts) + ")"
