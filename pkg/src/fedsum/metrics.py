"""Communication accounting and trace serialization.

One workload unit is one model-sized vector sent in either direction.
Scalars (round numbers, learning rates) are free.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable, Sequence

# (downlink, uplink) units per active client per round
UNITS_PER_CLIENT = {
    "fedavg": (1, 1),
    "fedsum_b": (1, 1),
    "fedsum": (2, 1),
    "fedsum_cr": (1, 1),
    "scaffold": (2, 2),
}


class CommLedger:
    def __init__(self):
        self.downlink: list[int] = []
        self.uplink: list[int] = []
        self.total_down = 0
        self.total_up = 0

    def record(self, algorithm: str, active: int) -> tuple[int, int]:
        try:
            down, up = UNITS_PER_CLIENT[algorithm]
        except KeyError:
            raise ValueError(f"unknown algorithm {algorithm!r}") from None
        down, up = down * active, up * active
        self.downlink.append(down)
        self.uplink.append(up)
        self.total_down += down
        self.total_up += up
        return self.total_down, self.total_up

    @property
    def total(self) -> int:
        return self.total_down + self.total_up

    def state_dict(self) -> dict:
        return {"downlink": list(self.downlink), "uplink": list(self.uplink)}

    @classmethod
    def from_state(cls, state: dict) -> "CommLedger":
        ledger = cls()
        ledger.downlink = [int(v) for v in state["downlink"]]
        ledger.uplink = [int(v) for v in state["uplink"]]
        ledger.total_down = sum(ledger.downlink)
        ledger.total_up = sum(ledger.uplink)
        return ledger


@dataclass(frozen=True)
class TraceRow:
    round: int
    active: int
    tau: int
    loss: float
    grad_norm_sq: float
    cum_down: int
    cum_up: int
    eta_l: float


TRACE_FIELDS = tuple(f.name for f in fields(TraceRow))
_INT_FIELDS = {"round", "active", "tau", "cum_down", "cum_up"}


def _fmt(name: str, value) -> str:
    if name in _INT_FIELDS:
        return str(int(value))
    return format(float(value), ".17g")


def emit_trace(rows: Sequence[TraceRow], path: str | Path, fmt: str = "csv") -> Path:
    """Write rows as CSV (header + one line per row) or JSON lines.

    Floats carry 17 significant digits, which round-trips every double.
    """
    if not rows:
        raise ValueError("no trace rows to write")
    path = Path(path)
    if fmt == "csv":
        lines = [",".join(TRACE_FIELDS)]
        lines += [",".join(_fmt(n, getattr(r, n)) for n in TRACE_FIELDS) for r in rows]
    elif fmt == "jsonl":
        lines = [
            "{" + ", ".join(f'"{n}": {_fmt(n, getattr(r, n))}' for n in TRACE_FIELDS) + "}"
            for r in rows
        ]
    else:
        raise ValueError(f"unknown trace format {fmt!r}")
    try:
        path.write_text("\n".join(lines) + "\n")
    except OSError as exc:
        raise OSError(f"could not write trace to {path}: {exc}") from exc
    return path


def _row_from_mapping(data: dict) -> TraceRow:
    return TraceRow(**{n: int(data[n]) if n in _INT_FIELDS else float(data[n]) for n in TRACE_FIELDS})


def read_trace(path: str | Path) -> list[TraceRow]:
    path = Path(path)
    with open(path, newline="") as fh:
        if path.suffix == ".jsonl":
            return [_row_from_mapping(json.loads(line)) for line in fh if line.strip()]
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != TRACE_FIELDS:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        return [_row_from_mapping(row) for row in reader]


def average_grad_norm(rows: Iterable[TraceRow]) -> float:
    values = [r.grad_norm_sq for r in rows]
    return sum(values) / len(values)
