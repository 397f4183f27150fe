"""Deterministic discrete-event attack simulator.

Legitimate clients and attacker profiles talk to a real ``CsaServer`` over a
lossless in-memory bus driven by a virtual millisecond clock.  Client solve
time is injected as a virtual delay drawn from a calibration table, so a
minute of simulated flooding runs in well under a second of wall time.
"""

from __future__ import annotations

import csv
import enum
import heapq
import io
import itertools
import json
import random
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional

from .errors import ParameterError
from .ledger import CostCategory, CostLedger, CostWeights
from .protocol import (
    AttackReason,
    Attacker,
    Client,
    ClientCredentials,
    ClientProfile,
    Confirmed,
    CsaServer,
    Legit,
    Registry,
    ServerConfig,
)
from .puzzle import (
    DEFAULT_ITEM_SEED,
    PuzzleParams,
    derive_solution_vector,
    generate_item_set,
    random_solution_vector,
    solve_subset_sum_dp,
)
from .tokens import generate_master_key
from .wire import (
    ChallengeMsg,
    ProtocolMessage,
    Rejected,
    ServiceRequest,
    SessionGrant,
    SolutionMsg,
    decode_message,
    encode_message,
)


class VirtualClock:
    """Millisecond clock with an ordered event queue.

    Events at the same instant run in scheduling order, which makes traces
    reproducible.
    """

    def __init__(self, start: int = 0):
        self.now = start
        self._queue: list[tuple[int, int, Callable[[], None]]] = []
        self._seq = itertools.count()

    def __call__(self) -> int:
        return self.now

    def schedule(self, at: int, callback: Callable[[], None]) -> None:
        if at < self.now:
            raise ParameterError(f"cannot schedule in the past ({at} < {self.now})")
        heapq.heappush(self._queue, (at, next(self._seq), callback))

    def after(self, delay: int, callback: Callable[[], None]) -> None:
        self.schedule(self.now + delay, callback)

    def advance(self, delta: int) -> None:
        if delta < 0:
            raise ParameterError("time cannot go backwards")
        self.now += delta

    def run(self, until: Optional[int] = None) -> None:
        while self._queue and (until is None or self._queue[0][0] <= until):
            at, _, callback = heapq.heappop(self._queue)
            self.now = at
            callback()
        if until is not None and self.now < until:
            self.now = until

    def __len__(self) -> int:
        return len(self._queue)


class AttackKind(str, enum.Enum):
    RANDOM_CID_FLOOD = "RandomCidFlood"
    UNSOLVED_FLOOD = "UnsolvedFlood"
    FORGED_VECTOR = "ForgedVector"
    REPLAY = "Replay"


_DEFAULT_BURST = {
    AttackKind.RANDOM_CID_FLOOD: 4,
    AttackKind.UNSOLVED_FLOOD: 1,
    AttackKind.FORGED_VECTOR: 1,
    AttackKind.REPLAY: 1,
}


@dataclass(frozen=True)
class AttackerProfile:
    """One attacker stream: ``count`` messages at ``rate`` per second.

    ``burst`` is how many consecutive messages reuse one random CID.
    """

    kind: AttackKind
    rate: float
    count: int
    burst: Optional[int] = None
    start_s: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", AttackKind(self.kind))
        if self.rate <= 0:
            raise ParameterError("attacker rate must be positive")
        if self.count < 0:
            raise ParameterError("attacker count must be non-negative")
        if self.burst is None:
            object.__setattr__(self, "burst", _DEFAULT_BURST[self.kind])
        if self.burst < 1:
            raise ParameterError("burst must be at least 1")
        if self.start_s < 0:
            raise ParameterError("start_s must be non-negative")


@dataclass(frozen=True)
class Scenario:
    legit_clients: int = 5
    attackers: tuple[AttackerProfile, ...] = ()
    duration_s: float = 60.0
    seed: int = 0
    server: ServerConfig = field(default_factory=ServerConfig)
    # virtual solve delays for legit clients, seconds; one is drawn per client
    solve_delays_s: tuple[float, ...] = (18.0, 20.0, 22.0)
    # "modeled": the client submits the server-derived vector after the
    # drawn delay; "dp": a real DP solve, with strict collisions counted
    solver: str = "modeled"
    latency_ms: int = 0
    item_seed: bytes = DEFAULT_ITEM_SEED

    def __post_init__(self):
        if self.duration_s <= 0:
            raise ParameterError("duration must be positive")
        if self.legit_clients < 0:
            raise ParameterError("legit_clients must be non-negative")
        if not self.solve_delays_s or min(self.solve_delays_s) < 0:
            raise ParameterError("solve_delays_s must be a non-empty list of non-negative values")
        if self.solver not in ("modeled", "dp"):
            raise ParameterError(f"solver must be 'modeled' or 'dp', got {self.solver!r}")
        if self.latency_ms < 0:
            raise ParameterError("latency must be non-negative")

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Scenario":
        """Build a scenario from the JSON schema in ``docs/scenarios.md``."""
        try:
            attackers = tuple(AttackerProfile(**a) for a in data.get("attackers", []))
            server = server_config_from_dict(data.get("server", {}))
            kwargs: dict[str, Any] = {
                "legit_clients": int(data.get("legit_clients", 5)),
                "attackers": attackers,
                "duration_s": float(data["duration_s"]),
                "seed": int(data.get("seed", 0)),
                "server": server,
                "solver": data.get("solver", "modeled"),
                "latency_ms": int(data.get("latency_ms", 0)),
            }
            if "solve_delays_s" in data:
                kwargs["solve_delays_s"] = tuple(float(x) for x in data["solve_delays_s"])
            if "item_seed" in data:
                kwargs["item_seed"] = str(data["item_seed"]).encode()
            unknown = set(data) - SCENARIO_KEYS
            if unknown:
                raise ParameterError(f"unknown scenario keys: {sorted(unknown)}")
            return cls(**kwargs)
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ParameterError):
                raise
            raise ParameterError(f"invalid scenario: {exc!r}") from exc

    @classmethod
    def load(cls, path: str | Path) -> "Scenario":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ParameterError(f"{path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ParameterError(f"{path}: scenario must be a JSON object")
        return cls.from_dict(data)


SCENARIO_KEYS = {
    "legit_clients", "attackers", "duration_s", "seed", "server",
    "solve_delays_s", "solver", "latency_ms", "item_seed",
}
SERVER_KEYS = {
    "n", "m", "item_bit_width", "rate_threshold_s", "block_duration_s",
    "solve_window_s", "verify_mode", "weights",
}


def server_config_from_dict(data: dict[str, Any]) -> ServerConfig:
    unknown = set(data) - SERVER_KEYS
    if unknown:
        raise ParameterError(f"unknown server keys: {sorted(unknown)}")
    defaults = ServerConfig()
    p = defaults.params
    params = PuzzleParams(
        n=int(data.get("n", p.n)),
        m=int(data.get("m", p.m)),
        item_bit_width=int(data.get("item_bit_width", p.item_bit_width)),
    )
    window = data.get("solve_window_s")
    return ServerConfig(
        params=params,
        rate_threshold_ms=round(float(data.get("rate_threshold_s", defaults.rate_threshold_ms / 1000)) * 1000),
        block_duration_ms=round(float(data.get("block_duration_s", defaults.block_duration_ms / 1000)) * 1000),
        solve_window_ms=(
            (round(float(window[0]) * 1000), round(float(window[1]) * 1000))
            if window is not None else defaults.solve_window_ms
        ),
        verify_mode=data.get("verify_mode", defaults.verify_mode),
        weights=CostWeights(**data["weights"]) if "weights" in data else defaults.weights,
    )


@dataclass
class SimMetrics:
    verdicts: dict[str, int]
    solution_messages: int = 0
    requests: int = 0
    challenges_issued: int = 0
    blocked_requests: int = 0
    blocked_cids: int = 0
    flood_cids: int = 0
    flood_cids_blocked: int = 0
    legit_clients: int = 0
    legit_completed: int = 0
    legit_completion_rate: float = 0.0
    key_mismatches: int = 0
    confirms_rejected: int = 0
    replay_attempts: int = 0
    replay_successes: int = 0
    strict_collisions: int = 0
    attacker_messages: int = 0
    client_cost_total: int = 0
    server_cost_total: int = 0
    server_expensive_events: int = 0
    decryptions_on_bad_vector: int = 0
    uet_decryptions_on_bad_vector: int = 0
    server_cost_per_attacker_message_max: int = 0
    server_cost_per_attacker_message_mean: float = 0.0
    final_virtual_time_ms: int = 0

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["metric", "value"])
        for key, value in sorted(self.to_dict().items()):
            if isinstance(value, dict):
                for sub, v in sorted(value.items()):
                    writer.writerow([f"{key}.{sub}", v])
            else:
                writer.writerow([key, value])
        return buf.getvalue()


VERDICT_NAMES = ["Legit"] + [r.value for r in AttackReason]


@dataclass
class _Run:
    kind: str
    ledger: CostLedger
    verdicts: list[str] = field(default_factory=list)


class _Simulation:
    def __init__(self, scenario: Scenario):
        self.sc = scenario
        cfg = scenario.server
        master = random.Random(scenario.seed)
        self.rng_setup = random.Random(master.getrandbits(64))
        self.rng_server = random.Random(master.getrandbits(64))
        self.rng_client = random.Random(master.getrandbits(64))
        self.rng_attack = random.Random(master.getrandbits(64))
        self.mk = generate_master_key(self.rng_setup)
        self.items = generate_item_set(cfg.params, scenario.item_seed)
        self.server = CsaServer(self.mk, self.items, cfg, Registry(), rng=self.rng_server)
        self.clock = VirtualClock()
        self.runs: list[_Run] = []
        self.captured: list[SolutionMsg] = []
        self.blocked_cids: set[bytes] = set()
        self.flood_cids: set[bytes] = set()
        self.m = SimMetrics(verdicts={name: 0 for name in VERDICT_NAMES})
        self.last_delivery_ms = 0

    # -- bus ---------------------------------------------------------------

    def _send(self, msg: ProtocolMessage, run: _Run,
              on_reply: Optional[Callable[[ProtocolMessage], None]] = None,
              on_outcome: Optional[Callable[[object], None]] = None) -> None:
        frame = encode_message(msg)

        def deliver():
            inbound = decode_message(frame)
            self.last_delivery_ms = self.clock.now
            reply, outcome = self.server.handle(inbound, self.clock.now, run.ledger)
            self._observe(inbound, outcome, run)
            if on_outcome is not None:
                on_outcome(outcome)
            if reply is not None and on_reply is not None:
                back = encode_message(reply)
                self.clock.after(self.sc.latency_ms, lambda: on_reply(decode_message(back)))

        self.clock.after(self.sc.latency_ms, deliver)

    def _observe(self, inbound: ProtocolMessage, outcome: object, run: _Run) -> None:
        m = self.m
        if isinstance(inbound, ServiceRequest):
            m.requests += 1
            if isinstance(outcome, ChallengeMsg):
                m.challenges_issued += 1
            elif isinstance(outcome, Rejected):
                m.blocked_requests += 1
                self.blocked_cids.add(inbound.cid)
        elif isinstance(inbound, SolutionMsg):
            m.solution_messages += 1
            name = "Legit" if isinstance(outcome, Legit) else outcome.reason.value
            m.verdicts[name] += 1
            run.verdicts.append(name)

    # -- legit clients -----------------------------------------------------

    def _start_legit(self, index: int) -> None:
        profile = ClientProfile(f"user{index}", "sim-org", f"user{index}@sim.example")
        reg = self.server.register_client(profile, 0)
        creds = ClientCredentials.from_registration(reg)
        run = _Run("legit", CostLedger(self.sc.server.weights))
        self.runs.append(run)
        client = Client(creds, rng=self.rng_client, ledger=run.ledger)
        start = round(self.rng_client.uniform(0, self.sc.duration_s) * 1000)
        delay = round(self.rng_client.choice(self.sc.solve_delays_s) * 1000)
        self.clock.schedule(start, lambda: self._legit_request(client, run, delay))

    def _legit_request(self, client: Client, run: _Run, delay: int) -> None:
        def on_challenge(reply):
            if not isinstance(reply, ChallengeMsg):
                return
            client.on_challenge(reply, self.clock.now)
            self.clock.after(delay, lambda: self._legit_solve(client, run))

        self._send(client.service_request(self.clock.now), run, on_challenge)

    def _legit_solve(self, client: Client, run: _Run) -> None:
        cid, r = client.creds.cid, client.challenge.r_cloudserv
        params = self.sc.server.params
        derived = derive_solution_vector(cid, self.mk.key, r, params)
        if self.sc.solver == "dp":
            def solver(items, s, m):
                found = solve_subset_sum_dp(items, s, m)
                if found is not None and found != derived:
                    self.m.strict_collisions += 1
                return found
        else:
            def solver(items, s, m):
                return derived
        msg = client.solve(solver, self.clock.now)
        self.captured.append(msg)

        def on_grant(reply):
            if not isinstance(reply, SessionGrant):
                return
            confirm = client.on_grant(reply, self.clock.now)
            self._send(confirm, run, on_outcome=lambda out: self._legit_done(client, out))

        self._send(msg, run, on_grant)

    def _legit_done(self, client: Client, outcome: object) -> None:
        if isinstance(outcome, Confirmed):
            self.m.legit_completed += 1
            if outcome.session_key != client.session_key.key:
                self.m.key_mismatches += 1
        else:
            self.m.confirms_rejected += 1

    # -- attackers ---------------------------------------------------------

    def _schedule_attacker(self, idx: int, profile: AttackerProfile) -> None:
        cids: dict[int, bytes] = {}

        def cid_for(k: int) -> bytes:
            group = k // profile.burst
            if group not in cids:
                cids[group] = b"atk-" + self.rng_attack.randbytes(8).hex().encode()
            return cids[group]

        for k in range(profile.count):
            at = round((profile.start_s + k / profile.rate) * 1000)
            self.clock.schedule(at, lambda k=k: self._attack(profile, cid_for(k)))

    def _attack(self, profile: AttackerProfile, cid: bytes) -> None:
        run = _Run(profile.kind.value, CostLedger(self.sc.server.weights))
        kind = profile.kind
        if kind is AttackKind.REPLAY:
            if not self.captured:
                return
            self.runs.append(run)
            self.m.replay_attempts += 1

            def on_outcome(outcome):
                if isinstance(outcome, Legit):
                    self.m.replay_successes += 1

            self._send(self.captured[-1], run, on_outcome=on_outcome)
            return

        self.runs.append(run)
        if kind is AttackKind.RANDOM_CID_FLOOD:
            self.flood_cids.add(cid)
        on_reply = None
        if kind is AttackKind.FORGED_VECTOR:
            def on_reply(reply):
                if isinstance(reply, ChallengeMsg):
                    self._send(self._forge(cid, reply), run)
        self._send(ServiceRequest(cid), run, on_reply)

    def _forge(self, cid: bytes, ch: ChallengeMsg) -> SolutionMsg:
        # no pre-shared key, no valid UET: random bytes stand in for both
        p = self.sc.server.params
        rng = self.rng_attack
        return SolutionMsg(
            uet=rng.randbytes(64),
            b=random_solution_vector(p.n, p.m, rng),
            s=ch.s,
            r_cloudserv=ch.r_cloudserv,
            cid=cid,
            enc_t=rng.randbytes(36),
        )

    def _schedule_prune(self) -> None:
        interval = self.sc.server.rate_threshold_ms

        def prune():
            self.server.limiter.prune(self.clock.now)
            if len(self.clock):
                self.clock.after(interval, prune)

        self.clock.after(interval, prune)

    # -- driver ------------------------------------------------------------

    def run(self) -> SimMetrics:
        for i in range(self.sc.legit_clients):
            self._start_legit(i)
        for idx, profile in enumerate(self.sc.attackers):
            self._schedule_attacker(idx, profile)
        self._schedule_prune()
        self.clock.run()
        return self._finish()

    def _finish(self) -> SimMetrics:
        m = self.m
        m.legit_clients = self.sc.legit_clients
        m.legit_completion_rate = (
            m.legit_completed / m.legit_clients if m.legit_clients else 1.0
        )
        m.blocked_cids = len(self.blocked_cids)
        m.flood_cids = len(self.flood_cids)
        m.flood_cids_blocked = len(self.flood_cids & self.blocked_cids)
        attacker_costs = []
        for run in self.runs:
            ledger = run.ledger
            m.client_cost_total += ledger.total("client")
            m.server_cost_total += ledger.total("server")
            m.server_expensive_events += ledger.count(CostCategory.EXPENSIVE, "server")
            if AttackReason.BAD_VECTOR.value in run.verdicts:
                labels = ledger.labels("server")
                m.uet_decryptions_on_bad_vector += labels.count("decrypt_uet")
                m.decryptions_on_bad_vector += labels.count("decrypt_uet") + labels.count("decrypt_timestamp")
            if run.kind != "legit":
                attacker_costs.append(ledger.total("server"))
        m.attacker_messages = len(attacker_costs)
        if attacker_costs:
            m.server_cost_per_attacker_message_max = max(attacker_costs)
            m.server_cost_per_attacker_message_mean = round(sum(attacker_costs) / len(attacker_costs), 6)
        # housekeeping ticks (limiter pruning) do not count as protocol time
        m.final_virtual_time_ms = self.last_delivery_ms
        return m


def run_scenario(scenario: Scenario) -> SimMetrics:
    """Run ``scenario`` to completion on a fresh server and virtual clock.

    New arrivals are generated only within ``duration_s``; exchanges already
    in flight are drained afterwards.  Identical scenarios give identical
    metrics.
    """
    return _Simulation(scenario).run()


def attacker_run_ledgers(scenario: Scenario) -> list[tuple[str, list[str], CostLedger]]:
    """Per-run ``(kind, verdicts, ledger)`` triples, for ledger-level checks."""
    sim = _Simulation(scenario)
    sim.run()
    return [(r.kind, r.verdicts, r.ledger) for r in sim.runs]
