import random

import pytest

from csa.errors import ConflictError, ProtocolFailure
from csa.ledger import CostLedger
from csa.protocol import (
    Attacker,
    AttackReason,
    Client,
    ClientCredentials,
    ClientProfile,
    Confirmed,
    CsaServer,
    Legit,
    LoopbackTransport,
    RateDecision,
    RateLimiter,
    Registry,
    RegistryRecord,
    ServerConfig,
    client_refresh,
    client_run,
    dp_solver,
)
from csa.puzzle import PuzzleParams, derive_solution_vector, generate_item_set, random_solution_vector
from csa.sim import VirtualClock
from csa.tokens import generate_master_key, open_uet, seal_timestamp
from csa.wire import (
    ChallengeMsg,
    Rejected,
    ServiceRequest,
    SessionConfirm,
    SessionGrant,
    SolutionMsg,
    decode_message,
    encode_message,
)

SMALL = PuzzleParams(n=64, m=8, item_bit_width=12)
SOLVE_MS = 20_000


def make_server(seed=0, params=SMALL, registry=None, **cfg):
    rng = random.Random(seed)
    mk = generate_master_key(rng)
    config = ServerConfig(params=params, **cfg)
    return CsaServer(mk, generate_item_set(params), config, registry, rng=rng)


def enroll(server, email="a@example.org", seed=1):
    reg = server.register_client(ClientProfile("A", "Org", email), now=0)
    return Client(ClientCredentials.from_registration(reg), rng=random.Random(seed))


def challenge_and_solve(server, client, clock, solve_ms=SOLVE_MS):
    ch, _ = server.handle(client.service_request(clock()), clock())
    assert isinstance(ch, ChallengeMsg)
    client.on_challenge(ch, clock())
    clock.advance(solve_ms)
    return client.solve(now=clock())


# -- registration ----------------------------------------------------------


def test_registration_issues_fresh_uet_and_record():
    server = make_server()
    reg = server.register_client(ClientProfile("A", "Org", "a@x"), now=7)
    rec = open_uet(server._mk, reg.uet)
    assert rec.cid == reg.record.cid and rec.issued_at == 7
    assert rec.sk is None and rec.t is None
    assert reg.record.activated
    assert server.registry.get(reg.record.cid) == reg.record


def test_duplicate_email_conflicts():
    server = make_server()
    server.register_client(ClientProfile("A", "Org", "a@x"), now=0)
    with pytest.raises(ConflictError):
        server.register_client(ClientProfile("B", "Org", "a@x"), now=0)


def test_registry_file_persists_and_reloads(tmp_path):
    path = tmp_path / "reg.bin"
    server = make_server(registry=Registry(path))
    reg = server.register_client(ClientProfile("A", "Org", "a@x"), now=0)
    server.register_client(ClientProfile("B", "Org", "b@x"), now=0)
    again = Registry(path)
    assert len(again) == 2
    assert again.get(reg.record.cid) == reg.record
    assert again.has_email("b@x")


def test_registry_record_codec():
    rec = RegistryRecord(b"cid-1", ClientProfile("N", "O", "e@x"), b"s" * 32, True, 99)
    assert RegistryRecord.from_bytes(rec.to_bytes()) == rec


# -- rate limiting ---------------------------------------------------------


def test_fourth_request_within_threshold_blocked():
    lim = RateLimiter(10_000, 60_000)
    assert [lim.check(b"c", t) for t in (0, 1000, 2000)] == [RateDecision.ALLOW] * 3
    assert lim.check(b"c", 3000) is RateDecision.BLOCK
    assert lim.is_blocked(b"c", 3000 + 59_999)
    assert not lim.is_blocked(b"c", 3000 + 60_000)
    assert lim.check(b"c", 3000 + 60_001) is RateDecision.ALLOW


def test_requests_spaced_beyond_threshold_never_blocked():
    lim = RateLimiter(10_000, 60_000)
    for i in range(50):
        assert lim.check(b"c", i * 5_001) is RateDecision.ALLOW


def test_threshold_boundary_is_inclusive():
    lim = RateLimiter(10_000, 60_000)
    for t in (0, 4000, 8000):
        lim.check(b"c", t)
    assert lim.check(b"c", 10_000) is RateDecision.BLOCK
    lim2 = RateLimiter(10_000, 60_000)
    for t in (0, 4000, 8000):
        lim2.check(b"c", t)
    assert lim2.check(b"c", 10_001) is RateDecision.ALLOW


def test_rate_limiting_is_per_cid():
    lim = RateLimiter()
    for t in range(4):
        lim.check(b"a", t)
    assert lim.check(b"b", 5) is RateDecision.ALLOW


def test_prune_forgets_idle_cids():
    lim = RateLimiter(10_000, 60_000)
    lim.check(b"idle", 0)
    for t in range(4):
        lim.check(b"bad", t)
    lim.prune(20_000)
    assert len(lim) == 1
    assert lim.is_blocked(b"bad", 20_000)


def test_server_rejects_blocked_request_cheaply():
    server = make_server()
    ledger = CostLedger()
    replies = [server.handle(ServiceRequest(b"x"), t, ledger)[0] for t in range(4)]
    assert all(isinstance(r, ChallengeMsg) for r in replies[:3])
    assert replies[3] == Rejected("BlockedCid")
    assert ledger.labels("server")[-1] == "rate_limit_check"


# -- handshake -------------------------------------------------------------


def test_happy_path_agrees_session_key():
    server = make_server()
    client = enroll(server)
    clock = VirtualClock()
    ledger = CostLedger()
    client.ledger = ledger
    transport = LoopbackTransport(server, clock, ledger)

    def solver(items, s, m):
        clock.advance(SOLVE_MS)
        return dp_solver(items, s, m)

    sk = client_run(client, transport, clock, solver)
    assert isinstance(transport.outcomes[1], Legit)
    confirmed = transport.outcomes[-1]
    assert isinstance(confirmed, Confirmed)
    assert confirmed.session_key == sk.key
    assert confirmed.cid == client.creds.cid
    assert len(transport.trace) == 5
    assert ledger.compare().asymmetry_holds


def test_forged_vector_is_bad_vector_without_decryption():
    server = make_server()
    client = enroll(server)
    clock = VirtualClock()
    msg = challenge_and_solve(server, client, clock)
    forged = SolutionMsg(msg.uet, random_solution_vector(SMALL.n, SMALL.m, random.Random(4)),
                         msg.s, msg.r_cloudserv, msg.cid, msg.enc_t)
    ledger = CostLedger()
    verdict, grant = server.handle_solution(forged, clock(), ledger)
    assert verdict == Attacker(AttackReason.BAD_VECTOR) and grant is None
    assert ledger.labels("server") == ["verify_vector"]


def test_forged_target_sum_is_bad_vector():
    server = make_server()
    client = enroll(server)
    clock = VirtualClock()
    msg = challenge_and_solve(server, client, clock)
    forged = SolutionMsg(msg.uet, msg.b, msg.s + 1, msg.r_cloudserv, msg.cid, msg.enc_t)
    assert server.handle_solution(forged, clock())[0] == Attacker(AttackReason.BAD_VECTOR)


def test_submission_outside_solve_window_is_stale():
    server = make_server()
    client = enroll(server)
    clock = VirtualClock()
    msg = challenge_and_solve(server, client, clock, solve_ms=60_001)
    assert server.handle_solution(msg, clock())[0] == Attacker(AttackReason.STALE_TIMESTAMP)
    fast = enroll(server, "b@x", seed=2)
    msg = challenge_and_solve(server, fast, clock, solve_ms=999)
    assert server.handle_solution(msg, clock())[0] == Attacker(AttackReason.STALE_TIMESTAMP)


def test_replay_after_window_is_stale():
    server = make_server()
    client = enroll(server)
    clock = VirtualClock()
    msg = challenge_and_solve(server, client, clock)
    assert isinstance(server.handle_solution(msg, clock())[0], Legit)
    clock.advance(60_000)
    assert server.handle_solution(msg, clock())[0] == Attacker(AttackReason.STALE_TIMESTAMP)


def test_unknown_cid_is_bad_uet():
    server = make_server()
    clock = VirtualClock()
    ch, _ = server.handle(ServiceRequest(b"nobody"), 0)
    b = derive_solution_vector(b"nobody", server._mk.key, ch.r_cloudserv, SMALL)
    msg = SolutionMsg(b"\x01" * 40, b, ch.s, ch.r_cloudserv, b"nobody", b"\x00" * 36)
    clock.advance(SOLVE_MS)
    assert server.handle_solution(msg, clock())[0] == Attacker(AttackReason.BAD_UET)


def test_uet_of_another_client_is_bad_uet():
    server = make_server()
    alice, bob = enroll(server), enroll(server, "b@x", seed=2)
    clock = VirtualClock()
    msg = challenge_and_solve(server, alice, clock)
    swapped = SolutionMsg(bob.creds.uet, msg.b, msg.s, msg.r_cloudserv, msg.cid, msg.enc_t)
    assert server.handle_solution(swapped, clock())[0] == Attacker(AttackReason.BAD_UET)


def test_tampered_uet_is_bad_uet():
    server = make_server()
    client = enroll(server)
    clock = VirtualClock()
    msg = challenge_and_solve(server, client, clock)
    uet = bytearray(msg.uet)
    uet[-1] ^= 1
    bad = SolutionMsg(bytes(uet), msg.b, msg.s, msg.r_cloudserv, msg.cid, msg.enc_t)
    assert server.handle_solution(bad, clock())[0] == Attacker(AttackReason.BAD_UET)


def grant_for(server, client, clock):
    msg = challenge_and_solve(server, client, clock)
    grant, verdict = server.handle(msg, clock())
    assert isinstance(verdict, Legit)
    return grant


def test_confirm_with_other_clients_key_rejected():
    server = make_server()
    alice, bob = enroll(server), enroll(server, "b@x", seed=2)
    clock = VirtualClock()
    grant_a = grant_for(server, alice, clock)
    grant_b = grant_for(server, bob, clock)
    alice.on_grant(grant_a)
    confirm_b = bob.on_grant(grant_b)
    mixed = SessionConfirm(grant_a.uet, confirm_b.enc_t_sk)
    assert server.handle(mixed, clock())[1] == Rejected("BadConfirm")


def test_confirm_with_wrong_timestamp_rejected():
    server = make_server()
    client = enroll(server)
    clock = VirtualClock()
    grant = grant_for(server, client, clock)
    client.on_grant(grant)
    bad = SessionConfirm(grant.uet, seal_timestamp(client.session_key.key, client.t + 1))
    assert server.handle(bad, clock())[1] == Rejected("BadConfirm")


def test_confirm_with_tampered_seal_rejected():
    server = make_server()
    client = enroll(server)
    clock = VirtualClock()
    confirm = client.on_grant(grant_for(server, client, clock))
    raw = bytearray(confirm.enc_t_sk)
    raw[5] ^= 0x80
    assert server.handle(SessionConfirm(confirm.uet, bytes(raw)), clock())[1] == Rejected("BadConfirm")


def test_confirm_with_pre_session_uet_rejected():
    server = make_server()
    client = enroll(server)
    clock = VirtualClock()
    confirm = client.on_grant(grant_for(server, client, clock))
    stale = SessionConfirm(client.creds.uet, confirm.enc_t_sk)
    assert server.handle(stale, clock())[1] == Rejected("BadConfirm")


def test_refresh_issues_new_sub_session_key():
    server = make_server()
    client = enroll(server)
    clock = VirtualClock()
    transport = LoopbackTransport(server, clock)
    first = client_run(client, transport, clock, solver=lambda *a: (clock.advance(SOLVE_MS), dp_solver(*a))[1])
    clock.advance(5_000)
    second = client_refresh(client, transport, clock)
    assert second.key != first.key
    assert transport.outcomes[-1] == Confirmed(client.creds.cid, second.key)
    clock.advance(5_000)
    third = client_refresh(client, transport, clock)
    assert third.key not in (first.key, second.key)


def test_refresh_with_old_timestamp_rejected():
    server = make_server()
    client = enroll(server)
    clock = VirtualClock()
    client.on_grant(grant_for(server, client, clock))
    clock.advance(10_000)
    req = client.refresh_request(clock())
    clock.advance(60_001)
    assert server.handle(req, clock())[1] == Rejected("BadConfirm")


def test_client_run_surfaces_rejection():
    server = make_server()
    client = enroll(server)
    clock = VirtualClock()
    transport = LoopbackTransport(server, clock)
    with pytest.raises(ProtocolFailure) as exc:
        client_run(client, transport, clock, solver=dp_solver)  # no time passes: too fast
    assert exc.value.reason == "StaleTimestamp"


# -- strict mode -------------------------------------------------------------


def test_strict_mode_accepts_derived_vector_and_rejects_others():
    server = make_server(verify_mode="strict")
    client = enroll(server)
    clock = VirtualClock()
    msg = challenge_and_solve(server, client, clock)
    derived = derive_solution_vector(msg.cid, server._mk.key, msg.r_cloudserv, SMALL)
    exact = SolutionMsg(msg.uet, derived, msg.s, msg.r_cloudserv, msg.cid, msg.enc_t)
    assert isinstance(server.handle_solution(exact, clock())[0], Legit)
    if msg.b != derived:
        assert server.handle_solution(msg, clock())[0] == Attacker(AttackReason.BAD_VECTOR)


def test_sum_mode_accepts_any_valid_m_subset():
    server = make_server()
    client = enroll(server)
    clock = VirtualClock()
    msg = challenge_and_solve(server, client, clock)
    derived = derive_solution_vector(msg.cid, server._mk.key, msg.r_cloudserv, SMALL)
    for b in {msg.b, derived}:
        m = SolutionMsg(msg.uet, b, msg.s, msg.r_cloudserv, msg.cid, msg.enc_t)
        assert isinstance(server.handle_solution(m, clock())[0], Legit)


def test_sum_mode_rejects_wrong_popcount():
    server = make_server()
    client = enroll(server)
    clock = VirtualClock()
    msg = challenge_and_solve(server, client, clock)
    for b in [(1,) * SMALL.n, msg.b[:-1], msg.b + (0,)]:
        bad = SolutionMsg(msg.uet, b, msg.s, msg.r_cloudserv, msg.cid, msg.enc_t)
        assert server.handle_solution(bad, clock())[0] == Attacker(AttackReason.BAD_VECTOR)


# -- statelessness ---------------------------------------------------------


def test_server_has_no_session_store():
    assert set(CsaServer.__slots__) == {"_mk", "items", "config", "registry", "limiter", "_rng"}
    server = make_server()
    assert not hasattr(server, "__dict__")
    with pytest.raises(AttributeError):
        server.sessions = {}


def test_interleaved_clients_validated_from_message_mk_and_registry_only():
    rng = random.Random(77)
    mk = generate_master_key(rng)
    items = generate_item_set(SMALL)
    registry = Registry()
    config = ServerConfig(params=SMALL)

    def fresh_server():
        # rebuilt for every message: nothing survives between steps but
        # the master key and the registry
        return CsaServer(mk, items, config, registry, rng=rng)

    clients = []
    for i in range(50):
        reg = fresh_server().register_client(ClientProfile(f"c{i}", "Org", f"c{i}@x"), now=0)
        clients.append(Client(ClientCredentials.from_registration(reg), rng=random.Random(i)))

    clock = VirtualClock()
    order = list(range(50))
    rng.shuffle(order)
    pending = []
    for i in order:
        ch, _ = fresh_server().handle(
            decode_message(encode_message(clients[i].service_request())), clock()
        )
        clients[i].on_challenge(ch, clock())
        pending.append(i)
        clock.advance(rng.randint(0, 300))
    clock.advance(SOLVE_MS)
    rng.shuffle(pending)
    confirms = []
    for i in pending:
        msg = decode_message(encode_message(clients[i].solve(now=clock())))
        grant, verdict = fresh_server().handle(msg, clock())
        assert isinstance(verdict, Legit), verdict
        assert isinstance(grant, SessionGrant)
        confirms.append((i, clients[i].on_grant(grant)))
        clock.advance(rng.randint(0, 100))
    rng.shuffle(confirms)
    for i, confirm in confirms:
        reply, outcome = fresh_server().handle(confirm, clock())
        assert reply is None
        assert outcome == Confirmed(clients[i].creds.cid, clients[i].session_key.key)


# -- robustness --------------------------------------------------------------


def test_fuzzed_messages_never_crash_server():
    server = make_server()
    client = enroll(server)
    clock = VirtualClock()
    msg = challenge_and_solve(server, client, clock)
    frame = encode_message(msg)
    rng = random.Random(6)
    verdicts = set()
    for _ in range(300):
        raw = bytearray(frame)
        for _ in range(rng.randint(1, 4)):
            raw[rng.randrange(len(raw))] = rng.randrange(256)
        try:
            decoded = decode_message(bytes(raw))
        except Exception as exc:
            assert type(exc).__name__ == "WireFormatError"
            continue
        _, outcome = server.handle(decoded, clock())
        verdicts.add(type(outcome).__name__)
    assert verdicts <= {"Legit", "Attacker", "Rejected", "ChallengeMsg", "Confirmed"}
