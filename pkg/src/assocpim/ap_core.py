"""Bit-level model of the associative processor.

The CAM array is stored column-major (``width x depth`` booleans) because
every instruction operates on a handful of bit-columns across all rows.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import IO, Iterable, Mapping

import numpy as np

UP = "up"
DOWN = "down"
SHORT = "short"
LONG = "long"

INSTRUCTION_KINDS = ("compare", "write", "compare_write", "move", "if_match", "read", "load")


class ApContractError(ValueError):
    """An instruction was issued with operands that violate its contract."""


@dataclass(frozen=True)
class ActivityRecord:
    seq: int
    kind: str
    cmp_cols: int
    wr_cols: int
    tagged: int
    rows: int

    def as_dict(self) -> dict:
        return {
            "seq": self.seq,
            "kind": self.kind,
            "cmp_cols": self.cmp_cols,
            "wr_cols": self.wr_cols,
            "tagged": self.tagged,
        }


@dataclass
class CycleCounters:
    """Cycle count plus the activity sums the energy model needs.

    ``cmp_cell_events`` is the sum over cycles of compared columns times rows,
    ``wr_cell_events`` of written columns times tagged rows and ``tag_events``
    of rows (one tag flip-flop event per row per cycle).
    """

    cycles: int = 0
    by_kind: dict = field(default_factory=dict)
    cmp_cell_events: int = 0
    wr_cell_events: int = 0
    tag_events: int = 0
    log: list | None = None

    def record(self, kind: str, cmp_cols: int, wr_cols: int, tagged: int, rows: int, repeat: int = 1) -> None:
        if self.log is not None:
            self.log.extend(
                ActivityRecord(self.cycles + r, kind, cmp_cols, wr_cols, tagged, rows) for r in range(repeat)
            )
        self.cycles += repeat
        self.by_kind[kind] = self.by_kind.get(kind, 0) + repeat
        self.cmp_cell_events += cmp_cols * rows * repeat
        self.wr_cell_events += wr_cols * tagged * repeat
        self.tag_events += rows * repeat

    def snapshot(self) -> "CycleCounters":
        return CycleCounters(
            self.cycles, dict(self.by_kind), self.cmp_cell_events, self.wr_cell_events, self.tag_events
        )

    def __sub__(self, other: "CycleCounters") -> "CycleCounters":
        kinds = set(self.by_kind) | set(other.by_kind)
        return CycleCounters(
            self.cycles - other.cycles,
            {k: self.by_kind.get(k, 0) - other.by_kind.get(k, 0) for k in sorted(kinds)},
            self.cmp_cell_events - other.cmp_cell_events,
            self.wr_cell_events - other.wr_cell_events,
            self.tag_events - other.tag_events,
        )

    def __add__(self, other: "CycleCounters") -> "CycleCounters":
        kinds = set(self.by_kind) | set(other.by_kind)
        log = None
        if self.log is not None and other.log is not None:
            log = list(self.log) + [
                ActivityRecord(r.seq + self.cycles, r.kind, r.cmp_cols, r.wr_cols, r.tagged, r.rows)
                for r in other.log
            ]
        return CycleCounters(
            self.cycles + other.cycles,
            {k: self.by_kind.get(k, 0) + other.by_kind.get(k, 0) for k in sorted(kinds)},
            self.cmp_cell_events + other.cmp_cell_events,
            self.wr_cell_events + other.wr_cell_events,
            self.tag_events + other.tag_events,
            log,
        )

    @classmethod
    def from_log(cls, records: Iterable[ActivityRecord]) -> "CycleCounters":
        out = cls(log=[])
        for r in records:
            out.record(r.kind, r.cmp_cols, r.wr_cols, r.tagged, r.rows)
        return out

    def as_dict(self) -> dict:
        return {
            "cycles": self.cycles,
            "by_kind": dict(sorted(self.by_kind.items())),
            "cmp_cell_events": self.cmp_cell_events,
            "wr_cell_events": self.wr_cell_events,
            "tag_events": self.tag_events,
        }


class KeyMask:
    """Key and mask registers. Key bits outside the mask are stored as 0."""

    __slots__ = ("key", "mask", "columns", "values")

    def __init__(self, key, mask):
        mask = np.asarray(mask, dtype=bool)
        key = np.asarray(key, dtype=bool) & mask
        if key.shape != mask.shape or key.ndim != 1:
            raise ApContractError("key and mask must be 1-D vectors of equal length")
        self.key = key
        self.mask = mask
        self.columns = np.flatnonzero(mask)
        self.values = key[self.columns]

    @classmethod
    def from_columns(cls, width: int, bits: Mapping[int, int]) -> "KeyMask":
        key = np.zeros(width, dtype=bool)
        mask = np.zeros(width, dtype=bool)
        for col, bit in bits.items():
            if not 0 <= col < width:
                raise ApContractError(f"column {col} outside [0, {width})")
            mask[col] = True
            key[col] = bool(bit)
        return cls(key, mask)

    @classmethod
    def empty(cls, width: int) -> "KeyMask":
        return cls(np.zeros(width, dtype=bool), np.zeros(width, dtype=bool))

    @property
    def width(self) -> int:
        return self.mask.size

    def __eq__(self, other):
        return (
            isinstance(other, KeyMask)
            and np.array_equal(self.key, other.key)
            and np.array_equal(self.mask, other.mask)
        )

    def __repr__(self):
        pattern = "".join(
            ("1" if k else "0") if m else "x" for k, m in zip(self.key[::-1], self.mask[::-1])
        )
        return f"KeyMask({pattern})"


class ApState:
    """CAM array, tag register and activity counters.

    Rows are processing units; bit-column ``j`` of every row is one slice of
    the array. Every instruction costs exactly one cycle.
    """

    def __init__(self, depth: int, width: int, long_step: int = 16, trace: bool = False):
        for name, v in (("depth", depth), ("width", width)):
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ApContractError(f"{name} must be a positive integer, got {v!r}")
        if long_step < 2 or long_step & (long_step - 1):
            raise ApContractError(f"long_step must be a power of two >= 2, got {long_step}")
        if depth * width > 1 << 31:
            raise ApContractError(f"geometry {depth}x{width} too large")
        self.depth = int(depth)
        self.width = int(width)
        self.long_step = int(long_step)
        self._cols = np.zeros((self.width, self.depth), dtype=bool)
        self.tag = np.zeros(self.depth, dtype=bool)
        self.counters = CycleCounters(log=[] if trace else None)

    @property
    def bits(self) -> np.ndarray:
        """Read-only ``depth x width`` view of the array (no cycle cost)."""
        view = self._cols.T
        view.flags.writeable = False
        return view

    @property
    def cycles(self) -> int:
        return self.counters.cycles

    def _check(self, km: KeyMask) -> None:
        if km.width != self.width:
            raise ApContractError(f"key/mask width {km.width} != array width {self.width}")

    def _match(self, km: KeyMask) -> np.ndarray:
        if km.columns.size == 0:
            return np.ones(self.depth, dtype=bool)
        return np.all(self._cols[km.columns] == km.values[:, None], axis=0)

    def _write(self, km: KeyMask) -> None:
        rows = np.flatnonzero(self.tag)
        if rows.size == 0 or km.columns.size == 0:
            return
        ones = km.columns[km.values]
        zeros = km.columns[~km.values]
        if ones.size:
            self._cols[ones[:, None], rows] = True
        if zeros.size:
            self._cols[zeros[:, None], rows] = False

    def compare(self, km: KeyMask) -> None:
        self._check(km)
        self.tag = self._match(km)
        self.counters.record("compare", km.columns.size, 0, int(self.tag.sum()), self.depth)

    def write(self, km: KeyMask) -> None:
        self._check(km)
        self._write(km)
        self.counters.record("write", 0, km.columns.size, int(self.tag.sum()), self.depth)

    def compare_write(self, cmp: KeyMask, wr: KeyMask, in_place: bool = False) -> None:
        """Fused compare and write; the write uses the freshly computed tags.

        Overlapping compare/write columns are rejected unless ``in_place`` is
        set by a caller that has verified its pass ordering is hazard free.
        """
        self._check(cmp)
        self._check(wr)
        if not in_place and np.any(cmp.mask & wr.mask):
            cols = np.flatnonzero(cmp.mask & wr.mask).tolist()
            raise ApContractError(f"compare and write share columns {cols}")
        self.tag = self._match(cmp)
        self._write(wr)
        tagged = int(self.tag.sum())
        self.counters.record("compare_write", cmp.columns.size, wr.columns.size, tagged, self.depth)

    def move_tag(self, direction: str, step: str) -> None:
        if step == SHORT:
            s = 1
        elif step == LONG:
            s = self.long_step
        else:
            raise ApContractError(f"unknown step {step!r}")
        moved = np.zeros_like(self.tag)
        if s < self.depth:
            if direction == UP:
                moved[:-s] = self.tag[s:]
            elif direction == DOWN:
                moved[s:] = self.tag[:-s]
            else:
                raise ApContractError(f"unknown direction {direction!r}")
        elif direction not in (UP, DOWN):
            raise ApContractError(f"unknown direction {direction!r}")
        self.tag = moved
        self.counters.record("move", 0, 0, int(moved.sum()), self.depth)

    def if_match(self) -> bool:
        hit = bool(self.tag.any())
        self.counters.record("if_match", 0, 0, int(self.tag.sum()), self.depth)
        return hit

    def read_row(self, i: int) -> np.ndarray:
        if not 0 <= i < self.depth:
            raise ApContractError(f"row {i} outside [0, {self.depth})")
        self.counters.record("read", 0, 0, 0, self.depth)
        return self._cols[:, i].astype(np.uint8)

    def load_row(self, i: int, bits: Mapping[int, int]) -> None:
        """Host write of a single row through the data port."""
        if not 0 <= i < self.depth:
            raise ApContractError(f"row {i} outside [0, {self.depth})")
        for col, bit in bits.items():
            if not 0 <= col < self.width:
                raise ApContractError(f"column {col} outside [0, {self.width})")
            self._cols[col, i] = bool(bit)
        self.counters.record("load", 0, len(bits), 1, self.depth)

    def load_rows(self, start: int, columns, bits) -> None:
        """Host load of consecutive rows, one cycle per row.

        ``bits`` is ``len(rows) x len(columns)``; row r goes to array row start + r.
        """
        bits = np.asarray(bits, dtype=bool)
        columns = np.asarray(columns, dtype=np.int64)
        if bits.ndim != 2 or bits.shape[1] != columns.size:
            raise ApContractError("bit block does not match the column list")
        n = bits.shape[0]
        if start < 0 or start + n > self.depth:
            raise ApContractError(f"rows [{start}, {start + n}) outside [0, {self.depth})")
        if columns.size and (columns.min() < 0 or columns.max() >= self.width):
            raise ApContractError("column outside the array")
        self._cols[columns[:, None], np.arange(start, start + n)] = bits.T
        self.counters.record("load", 0, columns.size, 1, self.depth, repeat=n)

    def write_trace(self, fp: IO[str], limit: int | None = None) -> int:
        """Write the activity log as JSON lines; returns the record count."""
        if self.counters.log is None:
            raise ApContractError("tracing was not enabled on this ApState")
        records = self.counters.log if limit is None else self.counters.log[:limit]
        for r in records:
            fp.write(json.dumps(r.as_dict()) + "\n")
        return len(records)


def create_ap(depth: int, width: int, long_step: int = 16, trace: bool = False) -> ApState:
    return ApState(depth, width, long_step, trace)
