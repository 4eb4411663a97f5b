"""Timing instrumentation and the iteration/waste metrics.

All durations are integer ticks of one microsecond. A :class:`ClockSource`
is either backed by the monotonic wall clock or advanced explicitly by a
simulation scheduler, so the same :class:`Benchmark` code measures both.
"""

from __future__ import annotations

import csv
import enum
import time
from collections import defaultdict
from dataclasses import dataclass
from typing import Any, Callable, Iterable, Sequence, TypeVar

T = TypeVar("T")

TICKS_PER_MS = 1000
TICKS_PER_S = 1_000_000

RECORD_COLUMNS = ("run_id", "mode", "pattern", "iteration", "worker", "comp_ms", "comm_ms", "wait_ms")


class ClockMode(str, enum.Enum):
    REAL = "real"
    VIRTUAL = "virtual"


class IncompleteDataError(ValueError):
    """Raised when an iteration is missing a record for some worker."""


class ClockSource:
    """Monotonic microsecond tick counter.

    In ``REAL`` mode ``now`` reads ``time.perf_counter_ns``; in ``VIRTUAL``
    mode it only moves through :meth:`advance_to` / :meth:`advance`.
    """

    def __init__(self, mode: ClockMode | str = ClockMode.VIRTUAL, start: int = 0):
        self.mode = ClockMode(mode)
        self._virtual = start
        self._origin = time.perf_counter_ns()

    @property
    def now(self) -> int:
        if self.mode is ClockMode.REAL:
            return (time.perf_counter_ns() - self._origin) // 1000
        return self._virtual

    def advance_to(self, tick: int) -> None:
        if self.mode is ClockMode.REAL:
            raise RuntimeError("a real clock cannot be advanced explicitly")
        if tick < self._virtual:
            raise ValueError(f"virtual clock cannot go backwards: {tick} < {self._virtual}")
        self._virtual = tick

    def advance(self, ticks: int) -> None:
        self.advance_to(self._virtual + ticks)


class Benchmark:
    """Accumulating block timer.

    Nested measurements into the same accumulator are additive: the inner
    block is counted both on its own and as part of the outer one.
    """

    def __init__(self, clock: ClockSource | None = None):
        self.clock = clock if clock is not None else ClockSource(ClockMode.REAL)
        self.total_ticks = 0
        self.sample_count = 0

    def measure(self, block: Callable[[], Any]) -> int:
        return self.measure_r(block)[0]

    def measure_r(self, block: Callable[[], T]) -> tuple[int, T]:
        start = self.clock.now
        result = block()
        elapsed = self.clock.now - start
        self.total_ticks += elapsed
        self.sample_count += 1
        return elapsed, result

    def total(self) -> int:
        return self.total_ticks

    def reset(self) -> None:
        self.total_ticks = 0
        self.sample_count = 0


@dataclass
class IterationRecord:
    worker_id: int
    iteration: int
    comp_ticks: int = 0
    comm_ticks: int = 0
    wait_ticks: int = 0

    @property
    def wall_ticks(self) -> int:
        return self.comp_ticks + self.comm_ticks + self.wait_ticks


def _by_iteration(records: Iterable[IterationRecord]) -> dict[int, dict[int, IterationRecord]]:
    table: dict[int, dict[int, IterationRecord]] = defaultdict(dict)
    workers: set[int] = set()
    for rec in records:
        if rec.comp_ticks < 0 or rec.comm_ticks < 0 or rec.wait_ticks < 0:
            raise ValueError(f"negative duration in {rec}")
        table[rec.iteration][rec.worker_id] = rec
        workers.add(rec.worker_id)
    for it, row in table.items():
        missing = workers - row.keys()
        if missing:
            raise IncompleteDataError(f"iteration {it} has no record for workers {sorted(missing)}")
    return table


def compute_t_iteration(records: Iterable[IterationRecord]) -> int:
    """Sum over iterations of (slowest compute + slowest communicate)."""
    table = _by_iteration(records)
    return sum(
        max(r.comp_ticks for r in row.values()) + max(r.comm_ticks for r in row.values())
        for row in table.values()
    )


def compute_t_waste(records: Iterable[IterationRecord]) -> int:
    """Total time blocked on synchronization, over all workers and iterations."""
    table = _by_iteration(records)
    return sum(r.wait_ticks for row in table.values() for r in row.values())


def iteration_times(records: Iterable[IterationRecord]) -> list[int]:
    """Per-iteration duration: the longest worker wall time in that iteration."""
    table = _by_iteration(records)
    return [max(r.wall_ticks for r in table[it].values()) for it in sorted(table)]


def run_wall_ticks(records: Iterable[IterationRecord]) -> int:
    """Longest per-worker total wall time (all workers are equal in a closed run)."""
    per_worker: dict[int, int] = defaultdict(int)
    for r in records:
        per_worker[r.worker_id] += r.wall_ticks
    return max(per_worker.values(), default=0)


def ms(ticks: float) -> str:
    return f"{ticks / TICKS_PER_MS:.3f}"


def write_records_csv(
    path, records: Sequence[IterationRecord], run_id: str, mode: str, pattern: str
) -> None:
    ordered = sorted(records, key=lambda r: (r.iteration, r.worker_id))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RECORD_COLUMNS)
        for r in ordered:
            writer.writerow(
                [run_id, mode, pattern, r.iteration, r.worker_id, ms(r.comp_ticks), ms(r.comm_ticks), ms(r.wait_ticks)]
            )


def read_records_csv(path) -> list[IterationRecord]:
    """Inverse of :func:`write_records_csv` (ticks recovered from 3-decimal ms)."""
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(
                IterationRecord(
                    worker_id=int(row["worker"]),
                    iteration=int(row["iteration"]),
                    comp_ticks=round(float(row["comp_ms"]) * TICKS_PER_MS),
                    comm_ticks=round(float(row["comm_ms"]) * TICKS_PER_MS),
                    wait_ticks=round(float(row["wait_ms"]) * TICKS_PER_MS),
                )
            )
    return out
