"""Symmetric key material, the UET token, and sealed timestamps.

All sealing uses AES-256-GCM with 12-byte random nonces.  Each sealed
object type carries its own associated-data label so a ciphertext of one
kind can never be opened as another.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from ._codec import CodecError, decode_fields, encode_fields, read_u64, u64
from .errors import FormatError, ParameterError, TamperError

KEY_LEN = 32
AEAD_NONCE_LEN = 12
TAG_LEN = 16
CHALLENGE_NONCE_LEN = 16
MIN_SHARED_SECRET_LEN = 16
UET_VERSION = 1

PSK_SALT = b"CSA-PSK-v1"
_AAD_UET = b"CSA-UET-v1"
_AAD_TIMESTAMP = b"CSA-TS-v1"
_AAD_SESSION_KEY = b"CSA-SK-v1"

# UetRecord field tags
_F_CID = 0x01
_F_ISSUED_AT = 0x02
_F_SK = 0x03
_F_T = 0x04

_system_rng = random.SystemRandom()


def _check_key(key: bytes, what: str = "key") -> None:
    if len(key) != KEY_LEN:
        raise ParameterError(f"{what} must be {KEY_LEN} bytes, got {len(key)}")


@dataclass(frozen=True)
class MasterKey:
    key: bytes = field(repr=False)

    def __post_init__(self):
        _check_key(self.key, "master key")


@dataclass(frozen=True)
class PreSharedKey:
    key: bytes = field(repr=False)

    def __post_init__(self):
        _check_key(self.key, "pre-shared key")


@dataclass(frozen=True)
class SessionKey:
    key: bytes = field(repr=False)
    issued_at: int = 0

    def __post_init__(self):
        _check_key(self.key, "session key")


@dataclass(frozen=True)
class UetRecord:
    """Client state carried inside the UET.

    ``sk`` and ``t`` are only present once authentication has mutated the
    token.
    """

    cid: bytes
    issued_at: int
    sk: Optional[bytes] = field(default=None, repr=False)
    t: Optional[int] = None

    def __post_init__(self):
        if not self.cid:
            raise ParameterError("cid must be non-empty")
        if self.issued_at < 0 or (self.t is not None and self.t < 0):
            raise ParameterError("timestamps must be non-negative")
        if self.sk is not None:
            _check_key(self.sk, "session key")

    def to_bytes(self) -> bytes:
        fields = [(_F_CID, self.cid), (_F_ISSUED_AT, u64(self.issued_at))]
        if self.sk is not None:
            fields.append((_F_SK, self.sk))
        if self.t is not None:
            fields.append((_F_T, u64(self.t)))
        return encode_fields(fields)

    @classmethod
    def from_bytes(cls, data: bytes) -> "UetRecord":
        try:
            f = decode_fields(data)
            t = f.get(_F_T)
            return cls(
                cid=f[_F_CID],
                issued_at=read_u64(f[_F_ISSUED_AT]),
                sk=f.get(_F_SK),
                t=read_u64(t) if t is not None else None,
            )
        except (CodecError, KeyError, ParameterError) as exc:
            raise FormatError(f"malformed UET record: {exc}") from exc


@dataclass(frozen=True)
class UetToken:
    """``version | nonce | ciphertext+tag``; opaque to the client."""

    version: int
    nonce: bytes
    ciphertext: bytes

    def to_bytes(self) -> bytes:
        return bytes([self.version]) + self.nonce + self.ciphertext

    @classmethod
    def from_bytes(cls, data: bytes) -> "UetToken":
        if len(data) < 1 + AEAD_NONCE_LEN + TAG_LEN:
            raise FormatError(f"token too short: {len(data)} bytes")
        return cls(data[0], bytes(data[1:1 + AEAD_NONCE_LEN]), bytes(data[1 + AEAD_NONCE_LEN:]))


# --------------------------------------------------------------------------
# Key generation
# --------------------------------------------------------------------------


def generate_master_key(rng: random.Random = _system_rng) -> MasterKey:
    return MasterKey(rng.randbytes(KEY_LEN))


def generate_session_key(rng: random.Random = _system_rng, now: int = 0) -> SessionKey:
    return SessionKey(rng.randbytes(KEY_LEN), issued_at=now)


def generate_nonce(rng: random.Random = _system_rng) -> bytes:
    return rng.randbytes(CHALLENGE_NONCE_LEN)


def generate_shared_secret(rng: random.Random = _system_rng) -> bytes:
    return rng.randbytes(KEY_LEN)


def derive_pre_shared_key(shared_secret: bytes, cid: bytes) -> PreSharedKey:
    """HKDF-SHA512 with a fixed salt and the CID as context info."""
    if len(shared_secret) < MIN_SHARED_SECRET_LEN:
        raise ParameterError(
            f"shared secret must be at least {MIN_SHARED_SECRET_LEN} bytes, got {len(shared_secret)}"
        )
    hkdf = HKDF(algorithm=hashes.SHA512(), length=KEY_LEN, salt=PSK_SALT, info=cid)
    return PreSharedKey(hkdf.derive(shared_secret))


# --------------------------------------------------------------------------
# Sealing
# --------------------------------------------------------------------------


def _seal(key: bytes, plaintext: bytes, aad: bytes, rng: random.Random) -> tuple[bytes, bytes]:
    _check_key(key)
    nonce = rng.randbytes(AEAD_NONCE_LEN)
    return nonce, AESGCM(key).encrypt(nonce, plaintext, aad)


def _open(key: bytes, nonce: bytes, ciphertext: bytes, aad: bytes) -> bytes:
    _check_key(key)
    try:
        return AESGCM(key).decrypt(nonce, ciphertext, aad)
    except InvalidTag as exc:
        raise TamperError("authentication tag mismatch") from exc


def seal_uet(mk: MasterKey, rec: UetRecord, rng: random.Random = _system_rng) -> UetToken:
    header = bytes([UET_VERSION])
    nonce, ct = _seal(mk.key, rec.to_bytes(), _AAD_UET + header, rng)
    return UetToken(UET_VERSION, nonce, ct)


def open_uet(mk: MasterKey, tok: UetToken | bytes) -> UetRecord:
    """Authenticate and decrypt a UET.

    Raises:
        FormatError: unknown version byte or truncated token.
        TamperError: wrong master key or modified bytes.
    """
    if isinstance(tok, (bytes, bytearray)):
        tok = UetToken.from_bytes(bytes(tok))
    if tok.version != UET_VERSION:
        raise FormatError(f"unknown UET version {tok.version}")
    if len(tok.nonce) != AEAD_NONCE_LEN or len(tok.ciphertext) < TAG_LEN:
        raise FormatError("truncated UET")
    plain = _open(mk.key, tok.nonce, tok.ciphertext, _AAD_UET + bytes([tok.version]))
    return UetRecord.from_bytes(plain)


def _seal_blob(key: bytes, plaintext: bytes, aad: bytes, rng: random.Random) -> bytes:
    nonce, ct = _seal(key, plaintext, aad, rng)
    return nonce + ct


def _open_blob(key: bytes, blob: bytes, aad: bytes) -> bytes:
    if len(blob) < AEAD_NONCE_LEN + TAG_LEN:
        raise FormatError(f"sealed value too short: {len(blob)} bytes")
    return _open(key, blob[:AEAD_NONCE_LEN], blob[AEAD_NONCE_LEN:], aad)


def seal_timestamp(key: bytes, t: int, rng: random.Random = _system_rng) -> bytes:
    """Encrypt a millisecond timestamp (u64) under a 32-byte key."""
    try:
        plain = u64(t)
    except CodecError as exc:
        raise ParameterError(str(exc)) from exc
    return _seal_blob(key, plain, _AAD_TIMESTAMP, rng)


def open_timestamp(key: bytes, ct: bytes) -> int:
    plain = _open_blob(key, ct, _AAD_TIMESTAMP)
    if len(plain) != 8:
        raise FormatError("sealed timestamp has wrong length")
    return int.from_bytes(plain, "big")


def seal_session_key(psk: PreSharedKey, sk: SessionKey, rng: random.Random = _system_rng) -> bytes:
    """Seal SK (and its issue time) for transport under the pre-shared key."""
    return _seal_blob(psk.key, sk.key + u64(sk.issued_at), _AAD_SESSION_KEY, rng)


def open_session_key(psk: PreSharedKey, blob: bytes) -> SessionKey:
    plain = _open_blob(psk.key, blob, _AAD_SESSION_KEY)
    if len(plain) != KEY_LEN + 8:
        raise FormatError("sealed session key has wrong length")
    return SessionKey(plain[:KEY_LEN], issued_at=int.from_bytes(plain[KEY_LEN:], "big"))


# --------------------------------------------------------------------------
# Key file
# --------------------------------------------------------------------------


def save_master_key(path: str | Path, mk: MasterKey) -> None:
    Path(path).write_text(mk.key.hex() + "\n")


def load_master_key(path: str | Path) -> MasterKey:
    text = Path(path).read_text().strip()
    try:
        raw = bytes.fromhex(text)
    except ValueError as exc:
        raise ParameterError(f"{path}: master key file is not hex") from exc
    return MasterKey(raw)
