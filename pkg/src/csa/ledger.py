"""Cost accounting for protocol runs (Meadows-style cost-based model).

Every instrumented operation is recorded with its side and a cost category.
The operation vocabulary is closed: each label belongs to one side, one row
of the client/server comparison table, and one category.  Recording anything
else is a contract error, which catches mis-instrumented code paths.
"""

from __future__ import annotations

import csv
import enum
import io
from collections import Counter
from dataclasses import dataclass, field
from typing import NamedTuple

from .errors import CostContractError, EmptyLedgerError, ParameterError


class Side(str, enum.Enum):
    CLIENT = "client"
    SERVER = "server"


class CostCategory(str, enum.Enum):
    INEXPENSIVE = "Inexpensive"
    MEDIUM = "Medium"
    EXPENSIVE = "Expensive"


_ORDER = {CostCategory.INEXPENSIVE: 0, CostCategory.MEDIUM: 1, CostCategory.EXPENSIVE: 2}


@dataclass(frozen=True)
class CostWeights:
    inexpensive: int = 1
    medium: int = 10
    expensive: int = 100

    def __post_init__(self):
        if not 0 < self.inexpensive < self.medium < self.expensive:
            raise ParameterError("cost weights must be positive and strictly increasing")

    def of(self, category: CostCategory) -> int:
        return {
            CostCategory.INEXPENSIVE: self.inexpensive,
            CostCategory.MEDIUM: self.medium,
            CostCategory.EXPENSIVE: self.expensive,
        }[category]


class Operation(NamedTuple):
    side: Side
    row: int
    category: CostCategory


I, M, E = CostCategory.INEXPENSIVE, CostCategory.MEDIUM, CostCategory.EXPENSIVE

# label -> (side, table row, category).  Rows: 1 request/challenge,
# 2 solve/verify, 3 session key handling.
OPERATIONS: dict[str, Operation] = {
    "send_request": Operation(Side.CLIENT, 1, I),
    "solve_puzzle": Operation(Side.CLIENT, 2, E),
    "decrypt_session_key": Operation(Side.CLIENT, 3, M),
    "confirm_session_key": Operation(Side.CLIENT, 3, M),
    "rate_limit_check": Operation(Side.SERVER, 1, I),
    "reply_request": Operation(Side.SERVER, 1, I),
    "hash_puzzle_element": Operation(Side.SERVER, 1, M),
    "verify_vector": Operation(Side.SERVER, 2, M),
    "decrypt_timestamp": Operation(Side.SERVER, 2, M),
    "decrypt_uet": Operation(Side.SERVER, 3, M),
    "issue_session_key": Operation(Side.SERVER, 3, M),
    "confirm_session": Operation(Side.SERVER, 3, M),
}

ROW_TITLES = {
    Side.CLIENT: {
        1: "Send service request",
        2: "Solve puzzle, submit result + UET",
        3: "Unseal session key, confirm",
    },
    Side.SERVER: {
        1: "Hash inputs, reply with challenge",
        2: "Verify submitted elements",
        3: "Open UET, issue sealed session key",
    },
}


@dataclass(frozen=True)
class CostEvent:
    side: Side
    label: str
    category: CostCategory
    timestamp: int = 0


@dataclass(frozen=True)
class CostComparison:
    client_total: int
    server_total: int
    asymmetry_holds: bool


@dataclass
class CostLedger:
    """Ordered cost events for one protocol run, with running per-side totals."""

    weights: CostWeights = field(default_factory=CostWeights)
    events: list[CostEvent] = field(default_factory=list)
    totals: dict[Side, int] = field(default_factory=lambda: {Side.CLIENT: 0, Side.SERVER: 0})

    def record(self, side: Side | str, label: str, category: CostCategory | str, timestamp: int = 0) -> None:
        side = Side(side)
        category = CostCategory(category)
        op = OPERATIONS.get(label)
        if op is None:
            raise CostContractError(f"unknown operation label {label!r}")
        if op.side is not side:
            raise CostContractError(f"{label!r} is a {op.side.value} operation, not {side.value}")
        if op.category is not category:
            raise CostContractError(f"{label!r} is {op.category.value}, not {category.value}")
        self.events.append(CostEvent(side, label, category, timestamp))
        self.totals[side] += self.weights.of(category)

    def op(self, label: str, timestamp: int = 0) -> None:
        """Record ``label`` with its vocabulary side and category."""
        entry = OPERATIONS[label]
        self.record(entry.side, label, entry.category, timestamp)

    def extend(self, other: "CostLedger") -> None:
        for ev in other.events:
            self.record(ev.side, ev.label, ev.category, ev.timestamp)

    def total(self, side: Side | str) -> int:
        return self.totals[Side(side)]

    def labels(self, side: Side | str | None = None) -> list[str]:
        return [e.label for e in self.events if side is None or e.side is Side(side)]

    def count(self, category: CostCategory, side: Side | str | None = None) -> int:
        return sum(
            1 for e in self.events
            if e.category is category and (side is None or e.side is Side(side))
        )

    def compare(self) -> CostComparison:
        if not self.events:
            raise EmptyLedgerError("ledger has no events")
        client, server = self.totals[Side.CLIENT], self.totals[Side.SERVER]
        return CostComparison(client, server, client > server)

    def row_cells(self) -> dict[tuple[Side, int], str]:
        """Category cell per ``(side, row)``; a range like ``Inexpensive-Medium``
        when a row mixes categories.  Rows without events are omitted."""
        seen: dict[tuple[Side, int], set[CostCategory]] = {}
        for ev in self.events:
            row = OPERATIONS[ev.label].row
            seen.setdefault((ev.side, row), set()).add(ev.category)
        cells = {}
        for key, cats in sorted(seen.items(), key=lambda kv: (kv[0][0].value, kv[0][1])):
            ordered = sorted(cats, key=_ORDER.__getitem__)
            if len(ordered) == 1:
                cells[key] = ordered[0].value
            else:
                cells[key] = f"{ordered[0].value}-{ordered[-1].value}"
        return cells

    def render_report(self) -> str:
        cells = self.row_cells()
        rows = sorted({row for _, row in cells})
        w_op, w_cat = 36, 20
        lines = [
            f"{'Client operation':<{w_op}} {'Category':<{w_cat}} | "
            f"{'Server operation':<{w_op}} Category",
            "-" * (2 * (w_op + w_cat) + 5),
        ]
        for row in rows:
            halves = []
            for side in (Side.CLIENT, Side.SERVER):
                cell = cells.get((side, row))
                title = ROW_TITLES[side][row] if cell else ""
                halves.append(f"{title:<{w_op}} {cell or '':<{w_cat}}")
            lines.append(" | ".join(halves).rstrip())
        lines.append("-" * (2 * (w_op + w_cat) + 5))
        w = self.weights
        lines.append(
            f"weights: inexpensive={w.inexpensive} medium={w.medium} expensive={w.expensive}"
        )
        lines.append(f"client total: {self.totals[Side.CLIENT]}")
        lines.append(f"server total: {self.totals[Side.SERVER]}")
        if self.events:
            verdict = "holds" if self.compare().asymmetry_holds else "does NOT hold"
            lines.append(f"client > server: {verdict}")
        return "\n".join(lines) + "\n"

    def csv_rows(self) -> list[dict[str, object]]:
        counts = Counter((e.side, e.label) for e in self.events)
        out = []
        for (side, label), n in sorted(counts.items(), key=lambda kv: (kv[0][0].value, kv[0][1])):
            cat = OPERATIONS[label].category
            out.append({
                "side": side.value,
                "operation": label,
                "category": cat.value,
                "weight": self.weights.of(cat),
                "count": n,
            })
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(self.csv_rows())
        return buf.getvalue()


CSV_COLUMNS = ["side", "operation", "category", "weight", "count"]
