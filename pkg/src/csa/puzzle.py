"""Adaptive subset-sum (knapsack) client puzzle.

The server derives a secret binary vector B from ``SHA-512(CID, MK, R)``,
keeping only the first ``m`` set bits of the digest, and publishes the
target ``S = A . B`` over a shared item set ``A``.  The client has to
recover a subset of ``A`` that sums to ``S``; the server checks the answer
with one hash and a comparison.
"""

from __future__ import annotations

import hashlib
import itertools
import random
from dataclasses import dataclass
from typing import Optional, Sequence

from ._codec import length_prefixed
from .errors import BruteForceGuardError, ParameterError, SolverResourceError

DIGEST_BITS = 512
NONCE_LEN = 16
PUZZLE_DOMAIN = b"CSA-PUZZLE-v1"
ITEMS_DOMAIN = b"CSA-ITEMS-v1"
DEFAULT_ITEM_SEED = b"csa-default-items"
# 2 GiB worth of one-byte cells.
DEFAULT_CELL_BUDGET = 2 * 1024 ** 3
BRUTE_FORCE_MAX_N = 25

ItemSet = tuple[int, ...]
SolutionVector = tuple[int, ...]


@dataclass(frozen=True)
class PuzzleParams:
    n: int = 512
    m: int = 55
    item_bit_width: int = 16

    def __post_init__(self):
        if self.n < 1:
            raise ParameterError(f"n must be positive, got {self.n}")
        if not 0 <= self.m <= self.n:
            raise ParameterError(f"m must be in [0, n], got m={self.m}, n={self.n}")
        if not 1 <= self.item_bit_width <= 32:
            raise ParameterError(f"item_bit_width must be in [1, 32], got {self.item_bit_width}")


@dataclass(frozen=True)
class Challenge:
    """What the server sends back: the target sum and its nonce."""

    s: int
    r_cloudserv: bytes


def generate_item_set(params: PuzzleParams, seed: bytes = DEFAULT_ITEM_SEED) -> ItemSet:
    """Expand ``seed`` into ``params.n`` items uniform in ``[1, 2**w - 1]``.

    Items are drawn from a SHA-512 counter stream; each 32-bit word is masked
    to ``w`` bits and zero is rejected, so the distribution is exactly uniform.
    The same seed always reproduces the same set, which is how the set is
    distributed to clients at registration.
    """
    if not seed:
        raise ParameterError("item seed must be non-empty")
    width = params.item_bit_width
    mask = (1 << width) - 1
    prefix = length_prefixed(ITEMS_DOMAIN, seed, width.to_bytes(1, "big"))
    items: list[int] = []
    for counter in itertools.count():
        block = hashlib.sha512(prefix + counter.to_bytes(8, "big")).digest()
        for off in range(0, len(block), 4):
            value = int.from_bytes(block[off:off + 4], "big") & mask
            if value:
                items.append(value)
                if len(items) == params.n:
                    return tuple(items)
    raise AssertionError("unreachable")


def puzzle_digest(cid: bytes, mk: bytes, r: bytes, counter: int = 0) -> bytes:
    """SHA-512 over the domain-separated, length-prefixed ``(cid, mk, r)``.

    A non-zero ``counter`` is appended as a single byte; it is only used when
    a digest carries fewer than ``m`` ones.
    """
    data = PUZZLE_DOMAIN + length_prefixed(cid, mk, r)
    if counter:
        data += counter.to_bytes(1, "big")
    return hashlib.sha512(data).digest()


def derive_solution_vector(
    cid: bytes, mk: bytes, r: bytes, params: PuzzleParams, *, strict: bool = False
) -> SolutionVector:
    """Derive the secret vector B for one challenge.

    The digest is read byte 0 first, most significant bit first.  B keeps the
    first ``m`` ones among the first ``n`` digest bits and clears the rest.
    With ``strict`` the digest must map one bit per item (``n == 512``);
    otherwise any ``n <= 512`` uses a prefix of the digest.

    Raises:
        ParameterError: if ``mk`` is empty, ``n`` does not fit the digest, or
            no counter in 0..255 yields ``m`` ones (``m`` far above ``n / 2``).
    """
    n, m = params.n, params.m
    if not mk:
        raise ParameterError("master key must be non-empty")
    if strict and n != DIGEST_BITS:
        raise ParameterError(f"strict derivation needs n={DIGEST_BITS}, got {n}")
    if n > DIGEST_BITS:
        raise ParameterError(f"n={n} exceeds the {DIGEST_BITS}-bit digest")
    for counter in range(256):
        word = int.from_bytes(puzzle_digest(cid, mk, r, counter), "big")
        bits = format(word, f"0{DIGEST_BITS}b")[:n]
        if bits.count("1") >= m:
            out = [0] * n
            kept = 0
            for i, ch in enumerate(bits):
                if kept == m:
                    break
                if ch == "1":
                    out[i] = 1
                    kept += 1
            return tuple(out)
    raise ParameterError(f"no digest with {m} ones among the first {n} bits")


def compute_target(items: Sequence[int], bits: Sequence[int]) -> int:
    if len(items) != len(bits):
        raise ParameterError(f"length mismatch: {len(items)} items, {len(bits)} bits")
    return sum(a for a, b in zip(items, bits) if b)


def popcount(bits: Sequence[int]) -> int:
    return sum(1 for b in bits if b)


def make_challenge(
    cid: bytes,
    mk: bytes,
    items: Sequence[int],
    params: PuzzleParams,
    rng: random.Random,
) -> tuple[Challenge, SolutionVector]:
    """Issue a fresh challenge for ``cid``.

    Returns the public challenge and the derived vector.  A stateless server
    drops the vector; it can be recomputed from ``(cid, mk, r)`` later.
    """
    if len(items) != params.n:
        raise ParameterError(f"item set has {len(items)} items, params say n={params.n}")
    r = rng.randbytes(NONCE_LEN)
    b = derive_solution_vector(cid, mk, r, params)
    return Challenge(compute_target(items, b), r), b


def random_solution_vector(n: int, m: int, rng: random.Random) -> SolutionVector:
    """Uniformly random vector of length ``n`` with exactly ``m`` ones."""
    if not 0 <= m <= n:
        raise ParameterError(f"m must be in [0, n], got m={m}, n={n}")
    ones = set(rng.sample(range(n), m))
    return tuple(1 if i in ones else 0 for i in range(n))


def verify_solution(items: Sequence[int], bits: Sequence[int], s: int) -> bool:
    if len(items) != len(bits) or any(b not in (0, 1) for b in bits):
        return False
    return compute_target(items, bits) == s


# --------------------------------------------------------------------------
# Solvers
# --------------------------------------------------------------------------


def solve_subset_sum_bruteforce(items: Sequence[int], s: int) -> list[SolutionVector]:
    """Every subset of ``items`` summing to ``s``, in lexicographic bit order."""
    n = len(items)
    if n > BRUTE_FORCE_MAX_N:
        raise BruteForceGuardError(f"exhaustive search limited to n <= {BRUTE_FORCE_MAX_N}, got {n}")
    # sums[mask] with bit k of mask selecting items[k]
    sums = [0]
    for a in items:
        sums += [x + a for x in sums]
    found = [
        tuple((mask >> k) & 1 for k in range(n))
        for mask, total in enumerate(sums)
        if total == s
    ]
    found.sort()
    return found


def solve_subset_sum_dp(
    items: Sequence[int],
    s: int,
    m: Optional[int] = None,
    *,
    cell_budget: int = DEFAULT_CELL_BUDGET,
) -> Optional[SolutionVector]:
    """Pseudo-polynomial subset-sum solver.

    Reachable sums are kept as Python-int bitsets (bit ``t`` set means sum
    ``t`` is reachable).  Without ``m`` a prefix table over ``(item, sum)``
    is built and walked backwards.  With ``m`` the solver first looks for a
    solution with exactly ``m`` ones using count-layered bitsets and a
    divide-and-conquer split for reconstruction, which keeps memory at
    ``O(m * s)`` bits; if none exists it falls back to any solution.

    Returns:
        A 0/1 vector with ``compute_target(items, vec) == s``, or ``None``.

    Raises:
        SolverResourceError: if ``n * (s + 1)`` exceeds ``cell_budget``.
    """
    items = tuple(int(a) for a in items)
    n = len(items)
    if any(a < 1 for a in items):
        raise ParameterError("items must be positive integers")
    if m is not None and m < 0:
        raise ParameterError(f"m must be non-negative, got {m}")
    if s < 0 or s > sum(items):
        return None
    if n * (s + 1) > cell_budget:
        raise SolverResourceError(
            f"DP table of {n} x {s + 1} cells exceeds budget {cell_budget}; "
            "item_bit_width is probably miscalibrated"
        )
    if s == 0:
        return (0,) * n
    if m is not None and m <= n:
        chosen: list[int] = []
        if _split_solve(items, 0, n, m, s, chosen):
            picked = set(chosen)
            return tuple(1 if i in picked else 0 for i in range(n))
    return _solve_any(items, s)


def _solve_any(items: ItemSet, s: int) -> Optional[SolutionVector]:
    mask = (1 << (s + 1)) - 1
    table = [1]
    for a in items:
        prev = table[-1]
        table.append((prev | (prev << a)) & mask)
    if not (table[-1] >> s) & 1:
        return None
    out = [0] * len(items)
    for i in range(len(items), 0, -1):
        if (table[i - 1] >> s) & 1:
            continue
        out[i - 1] = 1
        s -= items[i - 1]
    assert s == 0
    return tuple(out)


def _count_layers_forward(items: Sequence[int], c_top: int, s_top: int) -> list[int]:
    # layers[c]: sums reachable with exactly c of the items, capped at s_top
    mask = (1 << (s_top + 1)) - 1
    layers = [1] + [0] * c_top
    for k, a in enumerate(items):
        for c in range(min(k + 1, c_top), 0, -1):
            prev = layers[c - 1]
            if prev:
                layers[c] |= (prev << a) & mask
    return layers


def _count_layers_backward(items: Sequence[int], c_top: int, s_top: int) -> list[int]:
    # layers[c]: values s_top - (sum of c items) that stay non-negative
    layers = [1 << s_top] + [0] * c_top
    for k, a in enumerate(items):
        for c in range(min(k + 1, c_top), 0, -1):
            prev = layers[c - 1]
            if prev:
                layers[c] |= prev >> a
    return layers


def _split_solve(items: ItemSet, lo: int, hi: int, c: int, s: int, out: list[int]) -> bool:
    """Append to ``out`` indices in ``[lo, hi)`` of exactly ``c`` items summing to ``s``."""
    size = hi - lo
    if c == 0:
        return s == 0
    if c > size:
        return False
    if size == 1:
        if items[lo] == s:
            out.append(lo)
            return True
        return False
    mid = (lo + hi) // 2
    left = _count_layers_forward(items[lo:mid], min(c, mid - lo), s)
    right = _count_layers_backward(items[mid:hi], min(c, hi - mid), s)
    for c_left in range(max(0, c - (hi - mid)), min(c, mid - lo) + 1):
        hit = left[c_left] & right[c - c_left]
        if hit:
            s_left = (hit & -hit).bit_length() - 1
            ok = _split_solve(items, lo, mid, c_left, s_left, out)
            ok = ok and _split_solve(items, mid, hi, c - c_left, s - s_left, out)
            assert ok, "split point must be feasible on both halves"
            return True
    return False
