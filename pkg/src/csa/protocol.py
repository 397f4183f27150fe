"""Client and server state machines for registration, the puzzle-gated
DoS defender, and session-key authentication.

The server keeps exactly two mutable stores: the client registry and the
per-CID rate limiter.  Everything it needs between protocol messages is
either recomputed (the puzzle vector, from CID, MK and the nonce) or carried
by the client inside the sealed UET.
"""

from __future__ import annotations

import enum
import logging
import random
import threading
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

from ._codec import CodecError, decode_fields, encode_fields, read_u64, u64
from .errors import ConflictError, ParameterError, ProtocolFailure, TokenError
from .ledger import CostLedger, CostWeights
from .puzzle import (
    ItemSet,
    PuzzleParams,
    SolutionVector,
    compute_target,
    derive_solution_vector,
    make_challenge,
    popcount,
    solve_subset_sum_dp,
    verify_solution,
)
from .tokens import (
    MasterKey,
    PreSharedKey,
    SessionKey,
    UetRecord,
    derive_pre_shared_key,
    generate_session_key,
    generate_shared_secret,
    open_session_key,
    open_timestamp,
    open_uet,
    seal_session_key,
    seal_timestamp,
    seal_uet,
)
from .wire import (
    ChallengeMsg,
    ProtocolMessage,
    RefreshRequest,
    Rejected,
    ServiceRequest,
    SessionConfirm,
    SessionGrant,
    SolutionMsg,
    decode_message,
    encode_message,
)

logger = logging.getLogger(__name__)

VERIFY_MODES = ("strict", "sum")


class AttackReason(str, enum.Enum):
    BLOCKED_CID = "BlockedCid"
    BAD_VECTOR = "BadVector"
    STALE_TIMESTAMP = "StaleTimestamp"
    BAD_UET = "BadUet"
    BAD_CONFIRM = "BadConfirm"


@dataclass(frozen=True)
class Legit:
    session_key: SessionKey


@dataclass(frozen=True)
class Attacker:
    reason: AttackReason


Verdict = Union[Legit, Attacker]


@dataclass(frozen=True)
class Confirmed:
    cid: bytes
    session_key: bytes = field(repr=False)


# --------------------------------------------------------------------------
# Configuration
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ServerConfig:
    """Server tunables; all durations are in milliseconds.

    ``verify_mode`` is ``"sum"`` (accept any vector with ``A.B = S`` and
    ``m`` ones) or ``"strict"`` (exact match with the derived vector).
    """

    params: PuzzleParams = field(default_factory=PuzzleParams)
    rate_threshold_ms: int = 10_000
    block_duration_ms: int = 60_000
    solve_window_ms: tuple[int, int] = (1_000, 60_000)
    verify_mode: str = "sum"
    weights: CostWeights = field(default_factory=CostWeights)

    def __post_init__(self):
        if self.verify_mode not in VERIFY_MODES:
            raise ParameterError(f"verify_mode must be one of {VERIFY_MODES}, got {self.verify_mode!r}")
        lo, hi = self.solve_window_ms
        if not 0 <= lo < hi:
            raise ParameterError(f"solve window must satisfy 0 <= min < max, got {self.solve_window_ms}")
        if self.rate_threshold_ms <= 0 or self.block_duration_ms <= 0:
            raise ParameterError("rate threshold and block duration must be positive")


# --------------------------------------------------------------------------
# Registry
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ClientProfile:
    name: str
    organization: str
    email: str


@dataclass(frozen=True)
class RegistryRecord:
    cid: bytes
    profile: ClientProfile
    shared_secret: Optional[bytes] = field(default=None, repr=False)
    activated: bool = False
    registered_at: int = 0

    def to_bytes(self) -> bytes:
        fields_ = [
            (1, self.cid),
            (2, self.profile.name.encode()),
            (3, self.profile.organization.encode()),
            (4, self.profile.email.encode()),
            (6, b"\x01" if self.activated else b"\x00"),
            (7, u64(self.registered_at)),
        ]
        if self.shared_secret is not None:
            fields_.append((5, self.shared_secret))
        return encode_fields(sorted(fields_))

    @classmethod
    def from_bytes(cls, data: bytes) -> "RegistryRecord":
        f = decode_fields(data)
        return cls(
            cid=f[1],
            profile=ClientProfile(f[2].decode(), f[3].decode(), f[4].decode()),
            shared_secret=f.get(5),
            activated=f[6] == b"\x01",
            registered_at=read_u64(f[7]),
        )


class Registry:
    """CID-keyed client records, optionally backed by an append-only file.

    File layout: a sequence of ``length (u32 BE) | record TLV`` frames.  A
    later frame for the same CID supersedes an earlier one.
    """

    def __init__(self, path: str | Path | None = None):
        self._path = Path(path) if path is not None else None
        self._by_cid: dict[bytes, RegistryRecord] = {}
        self._by_email: dict[str, bytes] = {}
        self._lock = threading.Lock()
        if self._path is not None and self._path.exists():
            self._load()

    def _load(self) -> None:
        data = self._path.read_bytes()
        pos = 0
        while pos < len(data):
            if len(data) - pos < 4:
                raise ParameterError(f"{self._path}: truncated registry frame")
            size = int.from_bytes(data[pos:pos + 4], "big")
            frame = data[pos + 4:pos + 4 + size]
            if len(frame) != size:
                raise ParameterError(f"{self._path}: truncated registry frame")
            try:
                rec = RegistryRecord.from_bytes(frame)
            except (CodecError, KeyError, UnicodeDecodeError) as exc:
                raise ParameterError(f"{self._path}: corrupt registry record") from exc
            self._by_cid[rec.cid] = rec
            self._by_email[rec.profile.email.lower()] = rec.cid
            pos += 4 + size

    def add(self, rec: RegistryRecord) -> None:
        email = rec.profile.email.lower()
        with self._lock:
            owner = self._by_email.get(email)
            if owner is not None and owner != rec.cid:
                raise ConflictError(f"email already registered: {rec.profile.email}")
            if owner is None and rec.cid in self._by_cid:
                raise ConflictError(f"cid already registered: {rec.cid!r}")
            self._by_cid[rec.cid] = rec
            self._by_email[email] = rec.cid
            if self._path is not None:
                frame = rec.to_bytes()
                with self._path.open("ab") as fh:
                    fh.write(len(frame).to_bytes(4, "big") + frame)

    def get(self, cid: bytes) -> Optional[RegistryRecord]:
        return self._by_cid.get(cid)

    def has_email(self, email: str) -> bool:
        return email.lower() in self._by_email

    def __contains__(self, cid: bytes) -> bool:
        return cid in self._by_cid

    def __len__(self) -> int:
        return len(self._by_cid)

    def records(self) -> list[RegistryRecord]:
        return list(self._by_cid.values())


# --------------------------------------------------------------------------
# Rate limiter
# --------------------------------------------------------------------------


class RateDecision(str, enum.Enum):
    ALLOW = "Allow"
    BLOCK = "Block"


class RateLimiter:
    """Blocks a CID whose request is the 4th with its 3 predecessors all
    within ``threshold_ms``.  Every request, allowed or not, is remembered,
    so a CID that keeps flooding is re-blocked as soon as its block lapses.
    """

    CAPACITY = 3

    def __init__(self, threshold_ms: int = 10_000, block_ms: int = 60_000):
        self.threshold_ms = threshold_ms
        self.block_ms = block_ms
        self._recent: dict[bytes, deque[int]] = {}
        self._blocked_until: dict[bytes, int] = {}
        self._lock = threading.Lock()

    @classmethod
    def from_config(cls, config: ServerConfig) -> "RateLimiter":
        return cls(config.rate_threshold_ms, config.block_duration_ms)

    def check(self, cid: bytes, now: int) -> RateDecision:
        with self._lock:
            ring = self._recent.setdefault(cid, deque(maxlen=self.CAPACITY))
            until = self._blocked_until.get(cid)
            decision = RateDecision.ALLOW
            if until is not None and now < until:
                decision = RateDecision.BLOCK
            elif len(ring) == self.CAPACITY and now - ring[0] <= self.threshold_ms:
                self._blocked_until[cid] = now + self.block_ms
                decision = RateDecision.BLOCK
            ring.append(now)
            return decision

    def is_blocked(self, cid: bytes, now: int) -> bool:
        until = self._blocked_until.get(cid)
        return until is not None and now < until

    def prune(self, now: int) -> None:
        """Forget CIDs that are neither blocked nor active within the threshold."""
        with self._lock:
            for cid in list(self._recent):
                ring = self._recent[cid]
                if self.is_blocked(cid, now) or (ring and now - ring[-1] <= self.threshold_ms):
                    continue
                del self._recent[cid]
                self._blocked_until.pop(cid, None)

    def __len__(self) -> int:
        return len(self._recent)


# --------------------------------------------------------------------------
# Server
# --------------------------------------------------------------------------


class _NullLedger:
    def op(self, label: str, timestamp: int = 0) -> None:
        pass


_NULL_LEDGER = _NullLedger()


@dataclass(frozen=True)
class Registration:
    """Everything handed to the client at the end of registration."""

    record: RegistryRecord
    uet: bytes
    shared_secret: bytes = field(repr=False)
    items: ItemSet = field(repr=False)
    params: PuzzleParams


class CsaServer:
    # No per-session slot exists: challenge state is recomputed, session
    # state lives in the UET.
    __slots__ = ("_mk", "items", "config", "registry", "limiter", "_rng")

    def __init__(
        self,
        mk: MasterKey,
        items: Sequence[int],
        config: ServerConfig | None = None,
        registry: Registry | None = None,
        limiter: RateLimiter | None = None,
        rng: random.Random | None = None,
    ):
        self.config = config or ServerConfig()
        if len(items) != self.config.params.n:
            raise ParameterError(f"item set has {len(items)} items, params say n={self.config.params.n}")
        self._mk = mk
        self.items: ItemSet = tuple(items)
        self.registry = registry if registry is not None else Registry()
        self.limiter = limiter if limiter is not None else RateLimiter.from_config(self.config)
        self._rng = rng if rng is not None else random.SystemRandom()

    @property
    def params(self) -> PuzzleParams:
        return self.config.params

    # -- registration ------------------------------------------------------

    def register_client(self, profile: ClientProfile, now: int) -> Registration:
        """Store and activate a client, returning its UET and shared secret.

        Email confirmation is simulated as immediate.

        Raises:
            ConflictError: the email is already registered.
        """
        if self.registry.has_email(profile.email):
            raise ConflictError(f"email already registered: {profile.email}")
        cid = self._new_cid()
        secret = generate_shared_secret(self._rng)
        record = RegistryRecord(cid, profile, secret, activated=True, registered_at=now)
        self.registry.add(record)
        uet = seal_uet(self._mk, UetRecord(cid, issued_at=now), self._rng)
        return Registration(record, uet.to_bytes(), secret, self.items, self.params)

    def _new_cid(self) -> bytes:
        while True:
            cid = b"cid-" + self._rng.randbytes(8).hex().encode()
            if cid not in self.registry:
                return cid

    # -- adaptive DoS defender ---------------------------------------------

    def handle_service_request(
        self, msg: ServiceRequest, now: int, ledger: CostLedger | None = None
    ) -> ChallengeMsg | Rejected:
        # No registry lookup here: replying with a challenge is cheaper.
        ledger = ledger or _NULL_LEDGER
        ledger.op("rate_limit_check", now)
        if self.limiter.check(msg.cid, now) is RateDecision.BLOCK:
            logger.debug("blocked request from %r", msg.cid)
            return Rejected(AttackReason.BLOCKED_CID.value)
        ledger.op("reply_request", now)
        ledger.op("hash_puzzle_element", now)
        challenge, _ = make_challenge(msg.cid, self._mk.key, self.items, self.params, self._rng)
        return ChallengeMsg(challenge.s, challenge.r_cloudserv)

    def _vector_ok(self, msg: SolutionMsg) -> bool:
        try:
            expected = derive_solution_vector(msg.cid, self._mk.key, msg.r_cloudserv, self.params)
        except ParameterError:
            return False
        s_expected = compute_target(self.items, expected)
        if msg.s != s_expected:
            return False
        received = tuple(msg.b)
        if self.config.verify_mode == "strict":
            return received == expected
        return (
            len(received) == self.params.n
            and popcount(received) == self.params.m
            and verify_solution(self.items, received, s_expected)
        )

    def _psk(self, cid: bytes) -> Optional[PreSharedKey]:
        rec = self.registry.get(cid)
        if rec is None or not rec.activated or rec.shared_secret is None:
            return None
        return derive_pre_shared_key(rec.shared_secret, cid)

    def handle_solution(
        self, msg: SolutionMsg, now: int, ledger: CostLedger | None = None
    ) -> tuple[Verdict, Optional[SessionGrant]]:
        """Validate a puzzle answer, cheapest check first.

        Order: re-derive and compare the vector; look up the CID and check
        the sealed timestamp against the solve window; only then open the
        UET.  The first failing check decides the verdict.
        """
        ledger = ledger or _NULL_LEDGER
        ledger.op("verify_vector", now)
        if not self._vector_ok(msg):
            return Attacker(AttackReason.BAD_VECTOR), None

        psk = self._psk(msg.cid)
        if psk is None:
            return Attacker(AttackReason.BAD_UET), None

        ledger.op("decrypt_timestamp", now)
        try:
            t = open_timestamp(psk.key, msg.enc_t)
        except TokenError:
            return Attacker(AttackReason.STALE_TIMESTAMP), None
        lo, hi = self.config.solve_window_ms
        if not lo <= now - t <= hi:
            return Attacker(AttackReason.STALE_TIMESTAMP), None

        ledger.op("decrypt_uet", now)
        try:
            rec = open_uet(self._mk, msg.uet)
        except TokenError:
            return Attacker(AttackReason.BAD_UET), None
        if rec.cid != msg.cid:
            return Attacker(AttackReason.BAD_UET), None

        ledger.op("issue_session_key", now)
        sk = generate_session_key(self._rng, now)
        return Legit(sk), self._grant(psk, rec, sk, t)

    def _grant(self, psk: PreSharedKey, rec: UetRecord, sk: SessionKey, t: int) -> SessionGrant:
        mutated = UetRecord(rec.cid, rec.issued_at, sk=sk.key, t=t)
        uet = seal_uet(self._mk, mutated, self._rng)
        return SessionGrant(seal_session_key(psk, sk, self._rng), uet.to_bytes())

    # -- authentication ----------------------------------------------------

    def _open_session(self, uet: bytes, enc_t_sk: bytes) -> Optional[tuple[UetRecord, int]]:
        try:
            rec = open_uet(self._mk, uet)
        except TokenError:
            return None
        if rec.sk is None or rec.t is None or self._psk(rec.cid) is None:
            return None
        try:
            t = open_timestamp(rec.sk, enc_t_sk)
        except TokenError:
            return None
        return rec, t

    def handle_session_confirm(
        self, msg: SessionConfirm, now: int, ledger: CostLedger | None = None
    ) -> Confirmed | Rejected:
        ledger = ledger or _NULL_LEDGER
        ledger.op("confirm_session", now)
        opened = self._open_session(msg.uet, msg.enc_t_sk)
        if opened is None or opened[1] != opened[0].t:
            return Rejected(AttackReason.BAD_CONFIRM.value)
        rec = opened[0]
        return Confirmed(rec.cid, rec.sk)

    def handle_refresh(
        self, msg: RefreshRequest, now: int, ledger: CostLedger | None = None
    ) -> SessionGrant | Rejected:
        """Issue a sub-session key to a holder of a confirmed session UET.

        The request seals a fresh timestamp under the current SK; it must
        not predate the UET's timestamp nor be older than the solve window.
        """
        ledger = ledger or _NULL_LEDGER
        ledger.op("confirm_session", now)
        opened = self._open_session(msg.uet, msg.enc_t_sk)
        if opened is None:
            return Rejected(AttackReason.BAD_CONFIRM.value)
        rec, t_new = opened
        if not rec.t <= t_new <= now or now - t_new > self.config.solve_window_ms[1]:
            return Rejected(AttackReason.BAD_CONFIRM.value)
        ledger.op("issue_session_key", now)
        sk = generate_session_key(self._rng, now)
        return self._grant(self._psk(rec.cid), rec, sk, t_new)

    def handle(
        self, msg: ProtocolMessage, now: int, ledger: CostLedger | None = None
    ) -> tuple[Optional[ProtocolMessage], object]:
        """Dispatch one inbound message.

        Returns ``(reply, outcome)``: the message to send back (``None`` when
        the protocol has no reply arrow) and the server-side outcome (a
        verdict, ``Confirmed`` or the reply itself).
        """
        if isinstance(msg, ServiceRequest):
            reply = self.handle_service_request(msg, now, ledger)
            return reply, reply
        if isinstance(msg, SolutionMsg):
            verdict, grant = self.handle_solution(msg, now, ledger)
            if isinstance(verdict, Attacker):
                return Rejected(verdict.reason.value), verdict
            return grant, verdict
        if isinstance(msg, SessionConfirm):
            outcome = self.handle_session_confirm(msg, now, ledger)
            return (None if isinstance(outcome, Confirmed) else outcome), outcome
        if isinstance(msg, RefreshRequest):
            reply = self.handle_refresh(msg, now, ledger)
            return reply, reply
        reply = Rejected("UnexpectedMessage")
        return reply, reply


# --------------------------------------------------------------------------
# Client
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ClientCredentials:
    """What a client keeps after registration."""

    cid: bytes
    uet: bytes
    psk: PreSharedKey
    items: ItemSet = field(repr=False)
    params: PuzzleParams

    @classmethod
    def from_registration(cls, reg: Registration) -> "ClientCredentials":
        cid = reg.record.cid
        return cls(cid, reg.uet, derive_pre_shared_key(reg.shared_secret, cid), reg.items, reg.params)


Solver = Callable[[ItemSet, int, int], Optional[SolutionVector]]


def dp_solver(items: ItemSet, s: int, m: int) -> Optional[SolutionVector]:
    return solve_subset_sum_dp(items, s, m)


class Client:
    """Single-owner client state machine (request, solve, confirm, refresh)."""

    def __init__(self, creds: ClientCredentials, rng: random.Random | None = None,
                 ledger: CostLedger | None = None):
        self.creds = creds
        self.rng = rng if rng is not None else random.SystemRandom()
        self.ledger = ledger or _NULL_LEDGER
        self.challenge: Optional[ChallengeMsg] = None
        self.t: Optional[int] = None
        self.session_key: Optional[SessionKey] = None
        self.session_uet: Optional[bytes] = None

    def service_request(self, now: int = 0) -> ServiceRequest:
        self.ledger.op("send_request", now)
        return ServiceRequest(self.creds.cid)

    def on_challenge(self, challenge: ChallengeMsg, now: int) -> None:
        # T marks when solving starts; the server checks now - T.
        self.challenge = challenge
        self.t = now

    def solve(self, solver: Solver = dp_solver, now: int = 0) -> SolutionMsg:
        if self.challenge is None or self.t is None:
            raise ProtocolFailure("no challenge received")
        self.ledger.op("solve_puzzle", now)
        ch = self.challenge
        b = solver(self.creds.items, ch.s, self.creds.params.m)
        if b is None:
            raise ProtocolFailure("puzzle has no solution")
        enc_t = seal_timestamp(self.creds.psk.key, self.t, self.rng)
        return SolutionMsg(self.creds.uet, tuple(b), ch.s, ch.r_cloudserv, self.creds.cid, enc_t)

    def on_grant(self, grant: SessionGrant, now: int = 0) -> SessionConfirm:
        self.ledger.op("decrypt_session_key", now)
        self.session_key = open_session_key(self.creds.psk, grant.enc_sk)
        self.session_uet = grant.uet
        self.ledger.op("confirm_session_key", now)
        return SessionConfirm(grant.uet, seal_timestamp(self.session_key.key, self.t, self.rng))

    def refresh_request(self, now: int) -> RefreshRequest:
        if self.session_key is None or self.session_uet is None:
            raise ProtocolFailure("no session to refresh")
        self.ledger.op("confirm_session_key", now)
        self.t = now
        return RefreshRequest(self.session_uet, seal_timestamp(self.session_key.key, now, self.rng))


# --------------------------------------------------------------------------
# In-memory transport
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TraceEntry:
    at: int
    direction: str
    message: object


class LoopbackTransport:
    """Delivers messages to a server in-process, round-tripping every frame
    through the wire encoding and keeping a trace of what crossed."""

    def __init__(self, server: CsaServer, clock: Callable[[], int], ledger: CostLedger | None = None):
        self.server = server
        self.clock = clock
        self.ledger = ledger
        self.trace: list[TraceEntry] = []
        self.outcomes: list[object] = []

    def send(self, msg: ProtocolMessage) -> Optional[ProtocolMessage]:
        now = self.clock()
        inbound = decode_message(encode_message(msg))
        self.trace.append(TraceEntry(now, "client->server", inbound))
        reply, outcome = self.server.handle(inbound, now, self.ledger)
        self.outcomes.append(outcome)
        if reply is None:
            return None
        outbound = decode_message(encode_message(reply))
        self.trace.append(TraceEntry(now, "server->client", outbound))
        return outbound


def client_run(
    client: Client,
    transport: LoopbackTransport,
    clock: Callable[[], int],
    solver: Solver = dp_solver,
) -> SessionKey:
    """Run request, solve, grant and confirm end to end.

    Raises:
        ProtocolFailure: the server rejected a step (reason attached).
    """
    reply = transport.send(client.service_request(clock()))
    if not isinstance(reply, ChallengeMsg):
        raise ProtocolFailure(getattr(reply, "reason", "no challenge"))
    client.on_challenge(reply, clock())
    solution = client.solve(solver, clock())
    reply = transport.send(solution)
    if not isinstance(reply, SessionGrant):
        raise ProtocolFailure(getattr(reply, "reason", "no session grant"))
    reply = transport.send(client.on_grant(reply, clock()))
    if reply is not None:
        raise ProtocolFailure(getattr(reply, "reason", "confirm rejected"))
    return client.session_key


def client_refresh(client: Client, transport: LoopbackTransport, clock: Callable[[], int]) -> SessionKey:
    """Agree a sub-session key by re-running grant/confirm on the session UET."""
    reply = transport.send(client.refresh_request(clock()))
    if not isinstance(reply, SessionGrant):
        raise ProtocolFailure(getattr(reply, "reason", "no session grant"))
    reply = transport.send(client.on_grant(reply, clock()))
    if reply is not None:
        raise ProtocolFailure(getattr(reply, "reason", "confirm rejected"))
    return client.session_key
