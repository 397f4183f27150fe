"""``csa`` command line: demo, sim, bench, register.

Exit codes: 0 success, 1 protocol failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import random
import statistics
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

from .bench import bench_csv, bench_solver, reference_for, server_check_times
from .errors import CalibrationError, ConflictError, CsaError, ParameterError, ProtocolFailure
from .ledger import CostLedger
from .protocol import (
    Attacker,
    Client,
    ClientCredentials,
    ClientProfile,
    Confirmed,
    CsaServer,
    Legit,
    LoopbackTransport,
    Registry,
    ServerConfig,
    client_run,
)
from .puzzle import DEFAULT_ITEM_SEED, PuzzleParams, generate_item_set, solve_subset_sum_dp
from .sim import Scenario, VirtualClock, run_scenario
from .tokens import generate_master_key, load_master_key, save_master_key
from .wire import Rejected, describe

log = logging.getLogger("csa")

EXIT_OK = 0
EXIT_PROTOCOL = 1
EXIT_USAGE = 2


class UsageError(Exception):
    pass


def _seed(args) -> Optional[int]:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("CSA_SEED")
    if env is None or env == "":
        return None
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"CSA_SEED must be an integer, got {env!r}") from None


def _rng(seed: Optional[int]) -> random.Random:
    return random.Random(seed) if seed is not None else random.SystemRandom()


def _master_key(path: Optional[str], rng: random.Random):
    if path is None:
        return generate_master_key(rng)
    p = Path(path)
    if p.exists():
        return load_master_key(p)
    mk = generate_master_key(rng)
    save_master_key(p, mk)
    return mk


def _params(args) -> PuzzleParams:
    return PuzzleParams(n=args.n, m=args.m, item_bit_width=args.width)


def _emit(text: str, path: Optional[str]) -> None:
    if path:
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


# --------------------------------------------------------------------------
# demo
# --------------------------------------------------------------------------


def _outcome_line(outcome) -> Optional[str]:
    if isinstance(outcome, Legit):
        return "verdict: Legit"
    if isinstance(outcome, Attacker):
        return f"verdict: Attacker{{{outcome.reason.value}}}"
    if isinstance(outcome, Confirmed):
        return "confirm: Confirmed"
    if isinstance(outcome, Rejected):
        return f"rejected: {outcome.reason}"
    return None


def cmd_demo(args) -> int:
    seed = _seed(args)
    rng = _rng(seed)
    params = _params(args)
    config = ServerConfig(params=params, verify_mode=args.verify_mode or "sum")
    mk = _master_key(args.master_key_file, rng)
    items = generate_item_set(params, args.item_seed.encode())
    server = CsaServer(mk, items, config, Registry(), rng=rng)
    clock = VirtualClock(start=args.now_ms)
    ledger = CostLedger(config.weights)

    reg = server.register_client(ClientProfile("Demo User", "Demo Org", "demo@example.org"), clock())
    creds = ClientCredentials.from_registration(reg)
    print(f"registered cid={creds.cid.decode()} n={params.n} m={params.m} "
          f"width={params.item_bit_width} verify={config.verify_mode}")
    if args.tamper_uet:
        raw = bytearray(creds.uet)
        raw[len(raw) // 2] ^= 0x01
        creds = ClientCredentials(creds.cid, bytes(raw), creds.psk, creds.items, creds.params)
        print("fault injection: one UET bit flipped")

    client = Client(creds, rng=rng, ledger=ledger)
    transport = LoopbackTransport(server, clock, ledger)

    def solver(items_, s, m):
        start = time.perf_counter()
        found = solve_subset_sum_dp(items_, s, m)
        log.info("DP solve took %.3f s wall time", time.perf_counter() - start)
        # virtual clock moves by the modeled solve time, not wall time
        clock.advance(args.solve_delay_ms)
        return found

    failure = None
    try:
        sk = client_run(client, transport, clock, solver)
    except ProtocolFailure as exc:
        failure = exc.reason

    for i, entry in enumerate(transport.trace, 1):
        print(f"[{i}] t={entry.at:>8}ms {entry.direction:<15} {describe(entry.message)}")
    for outcome in transport.outcomes:
        line = _outcome_line(outcome)
        if line:
            print(line)

    _emit(ledger.render_report(), args.report_file)
    if args.report_csv:
        Path(args.report_csv).write_text(ledger.to_csv())

    if failure is not None:
        print(f"FAILED: {failure}", file=sys.stderr)
        return EXIT_PROTOCOL
    confirmed = transport.outcomes[-1]
    if not isinstance(confirmed, Confirmed) or confirmed.session_key != sk.key:
        print("FAILED: session keys differ", file=sys.stderr)
        return EXIT_PROTOCOL
    print("session key agreed: client and server hold identical keys")
    return EXIT_OK


# --------------------------------------------------------------------------
# sim
# --------------------------------------------------------------------------


def cmd_sim(args) -> int:
    scenario = Scenario.load(args.scenario)
    seed = _seed(args)
    overrides = {}
    if seed is not None:
        overrides["seed"] = seed
    if args.verify_mode:
        cfg = scenario.server
        overrides["server"] = ServerConfig(
            cfg.params, cfg.rate_threshold_ms, cfg.block_duration_ms,
            cfg.solve_window_ms, args.verify_mode, cfg.weights,
        )
    if overrides:
        scenario = Scenario(**{**scenario.__dict__, **overrides})
    metrics = run_scenario(scenario)
    _emit(metrics.to_json(), args.out)
    if args.csv:
        Path(args.csv).write_text(metrics.to_csv())
    return EXIT_OK


# --------------------------------------------------------------------------
# bench
# --------------------------------------------------------------------------


def _m_values(args) -> list[int]:
    if args.m_range:
        try:
            lo, hi = (int(x) for x in args.m_range.split(":"))
        except ValueError:
            raise UsageError(f"--m-range must look like A:B, got {args.m_range!r}") from None
        if lo > hi:
            raise UsageError("--m-range lower bound exceeds upper bound")
        return list(range(lo, hi + 1))
    return [args.m]


def cmd_bench(args) -> int:
    if args.trials < 3:
        raise UsageError("--trials must be at least 3")
    seed = _seed(args) or 0
    m_values = _m_values(args)
    rows = bench_solver(args.n, m_values, args.width, args.trials, seed=seed)
    _emit(bench_csv(rows), args.out)

    lines = [f"solver benchmark n={args.n} width={args.width} trials={args.trials}"]
    for r in rows:
        ref = reference_for(args.n, r.m)
        note = f"  (reference ~{ref[0]:g} s on {ref[1]})" if ref else ""
        lines.append(f"  m={r.m:<4} mean={r.mean_s:.4f} s  stddev={r.stddev_s:.4f} s{note}")
    try:
        server = server_check_times(PuzzleParams(args.n, min(m_values), args.width), 50, seed)
        lines.append(f"server challenge+check median: {statistics.median(server) * 1e6:.1f} us")
    except ParameterError as exc:
        # e.g. n=100, m=80: no digest-derived challenge exists to time
        lines.append(f"server challenge+check: not timed ({exc})")
    text = "\n".join(lines) + "\n"
    if args.report_file:
        Path(args.report_file).write_text(text)
    else:
        sys.stderr.write(text)
    return EXIT_OK


# --------------------------------------------------------------------------
# register
# --------------------------------------------------------------------------


def cmd_register(args) -> int:
    if not args.registry_file:
        raise UsageError("register needs --registry-file")
    if not args.master_key_file:
        raise UsageError("register needs --master-key-file")
    seed = _seed(args)
    rng = _rng(seed)
    params = _params(args)
    mk = _master_key(args.master_key_file, rng)
    items = generate_item_set(params, args.item_seed.encode())
    registry = Registry(args.registry_file)
    server = CsaServer(mk, items, ServerConfig(params=params), registry, rng=rng)
    if args.now_ms is not None:
        now = args.now_ms
    elif seed is not None:
        now = 0
    else:
        now = time.time_ns() // 1_000_000
    reg = server.register_client(ClientProfile(args.name, args.organization, args.email), now)
    print(f"cid: {reg.record.cid.decode()}")
    print(f"uet: {reg.uet.hex()}")
    print(f"shared_secret: {reg.shared_secret.hex()}")
    print(f"params: n={params.n} m={params.m} item_bit_width={params.item_bit_width}")
    if args.items_file:
        Path(args.items_file).write_text(json.dumps(list(items)) + "\n")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="RNG seed (fallback: $CSA_SEED)")
    common.add_argument("--master-key-file", help="hex master key; created if missing")
    common.add_argument("--registry-file", help="append-only client registry")
    common.add_argument("--report-file", help="write the report here instead of stdout")
    common.add_argument("--verify-mode", choices=["strict", "sum"], default=None)
    common.add_argument("-v", "--verbose", action="store_true")

    puzzle = argparse.ArgumentParser(add_help=False)
    puzzle.add_argument("--n", type=int, default=512)
    puzzle.add_argument("--m", type=int, default=55)
    puzzle.add_argument("--width", type=int, default=16, help="item bit width")
    puzzle.add_argument("--item-seed", default=DEFAULT_ITEM_SEED.decode())

    parser = argparse.ArgumentParser(prog="csa", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    demo = sub.add_parser("demo", parents=[common, puzzle], help="end-to-end handshake trace")
    demo.add_argument("--solve-delay-ms", type=int, default=20_000,
                      help="virtual time charged for the client solve")
    demo.add_argument("--now-ms", type=int, default=0, help="virtual start time")
    demo.add_argument("--tamper-uet", action="store_true", help="flip one UET bit (fault injection)")
    demo.add_argument("--report-csv", help="also write the cost report as CSV")
    demo.set_defaults(func=cmd_demo)

    sim = sub.add_parser("sim", parents=[common], help="run an attack scenario")
    sim.add_argument("--scenario", required=True, help="scenario JSON file")
    sim.add_argument("--out", help="metrics JSON path (default stdout)")
    sim.add_argument("--csv", help="metrics CSV path")
    sim.set_defaults(func=cmd_sim)

    bench = sub.add_parser("bench", parents=[common, puzzle], help="time DP solves")
    bench.add_argument("--m-range", help="inclusive range A:B, overrides --m")
    bench.add_argument("--trials", type=int, default=3)
    bench.add_argument("--out", help="CSV path (default stdout)")
    bench.set_defaults(func=cmd_bench)

    reg = sub.add_parser("register", parents=[common, puzzle], help="register one client")
    reg.add_argument("--name", required=True)
    reg.add_argument("--organization", required=True)
    reg.add_argument("--email", required=True)
    reg.add_argument("--items-file", help="write the item set as a JSON list")
    reg.add_argument("--now-ms", type=int, default=None)
    reg.set_defaults(func=cmd_register)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (UsageError, ParameterError, CalibrationError, OSError) as exc:
        print(f"csa: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConflictError, ProtocolFailure) as exc:
        print(f"csa: failed: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL
    except CsaError as exc:
        print(f"csa: failed: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL


if __name__ == "__main__":
    sys.exit(main())
