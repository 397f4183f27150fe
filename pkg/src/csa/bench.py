"""Wall-clock benchmark of the client-side DP solve and the server check."""

from __future__ import annotations

import csv
import io
import random
import statistics
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .errors import CalibrationError, ParameterError, SolverResourceError
from .puzzle import (
    DEFAULT_CELL_BUDGET,
    PuzzleParams,
    compute_target,
    derive_solution_vector,
    generate_item_set,
    make_challenge,
    random_solution_vector,
    solve_subset_sum_dp,
    verify_solution,
)

BENCH_COLUMNS = ["m", "mean_s", "stddev_s", "trials"]

# Published desk measurements, for side-by-side reporting only:
# (n, m range) -> (seconds, machine)
REFERENCE_TIMINGS = {
    (100, (80, 80)): (8.0, "i7-4770 @ 3.4 GHz, 32 GB"),
    (512, (50, 60)): (20.0, "i7-4770 @ 3.4 GHz, 32 GB"),
}


@dataclass(frozen=True)
class BenchRow:
    m: int
    mean_s: float
    stddev_s: float
    trials: int


def _instance(items, params: PuzzleParams, rng: random.Random) -> int:
    """Target sum for one trial.

    Uses a real hash-derived challenge; when ``m`` is too large for ``n``
    to come out of a digest (e.g. n=100, m=80) a random ``m``-ones vector
    stands in.
    """
    cid = b"bench-" + rng.randbytes(6).hex().encode()
    mk = rng.randbytes(32)
    try:
        challenge, _ = make_challenge(cid, mk, items, params, rng)
        return challenge.s
    except ParameterError:
        return compute_target(items, random_solution_vector(params.n, params.m, rng))


def solve_times(
    n: int, m: int, item_bit_width: int, trials: int, seed: int = 0,
    cell_budget: int = DEFAULT_CELL_BUDGET,
) -> list[float]:
    """Seconds per DP solve for ``trials`` fresh challenges."""
    params = PuzzleParams(n=n, m=m, item_bit_width=item_bit_width)
    rng = random.Random(f"bench:{seed}:{n}:{m}:{item_bit_width}")
    items = generate_item_set(params, f"bench-items:{seed}".encode())
    out = []
    for _ in range(trials):
        s = _instance(items, params, rng)
        start = time.perf_counter()
        try:
            found = solve_subset_sum_dp(items, s, m, cell_budget=cell_budget)
        except SolverResourceError as exc:
            raise CalibrationError(str(exc)) from exc
        out.append(time.perf_counter() - start)
        assert found is not None and verify_solution(items, found, s)
    return out


def bench_solver(
    n: int,
    m_range: Iterable[int],
    item_bit_width: int = 16,
    trials: int = 3,
    seed: int = 0,
    cell_budget: int = DEFAULT_CELL_BUDGET,
) -> list[BenchRow]:
    """One ``BenchRow`` per ``m`` (ascending) with mean and sample stddev."""
    if trials < 3:
        raise ParameterError(f"trials must be >= 3, got {trials}")
    rows = []
    for m in sorted(set(m_range)):
        times = solve_times(n, m, item_bit_width, trials, seed, cell_budget)
        rows.append(BenchRow(m, statistics.fmean(times), statistics.stdev(times), trials))
    return rows


def server_check_times(params: PuzzleParams, trials: int, seed: int = 0) -> list[float]:
    """Seconds for the server's share of one puzzle: issue the challenge,
    re-derive the vector on submission, compare."""
    rng = random.Random(f"server:{seed}")
    items = generate_item_set(params)
    mk = rng.randbytes(32)
    out = []
    for i in range(trials):
        cid = f"cid-{i}".encode()
        start = time.perf_counter()
        challenge, b = make_challenge(cid, mk, items, params, rng)
        again = derive_solution_vector(cid, mk, challenge.r_cloudserv, params)
        ok = again == b and compute_target(items, again) == challenge.s
        out.append(time.perf_counter() - start)
        assert ok
    return out


def bench_csv(rows: Sequence[BenchRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(BENCH_COLUMNS)
    for r in rows:
        writer.writerow([r.m, f"{r.mean_s:.6f}", f"{r.stddev_s:.6f}", r.trials])
    return buf.getvalue()


def write_bench_csv(rows: Sequence[BenchRow], path: str | Path) -> None:
    Path(path).write_text(bench_csv(rows))


def read_bench_csv(path: str | Path) -> list[BenchRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != BENCH_COLUMNS:
            raise ParameterError(f"{path}: expected header {BENCH_COLUMNS}, got {reader.fieldnames}")
        return [
            BenchRow(int(r["m"]), float(r["mean_s"]), float(r["stddev_s"]), int(r["trials"]))
            for r in reader
        ]


def reference_for(n: int, m: int) -> tuple[float, str] | None:
    for (ref_n, (lo, hi)), value in REFERENCE_TIMINGS.items():
        if ref_n == n and lo <= m <= hi:
            return value
    return None
