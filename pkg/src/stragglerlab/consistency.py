"""BSP / SSP admission rules and the shared clock view."""

from __future__ import annotations

import enum
import threading
from dataclasses import dataclass, field
from typing import Callable, Mapping


class SyncMode(str, enum.Enum):
    BSP = "bsp"
    SSP = "ssp"


class Mitigation(str, enum.Enum):
    REASSIGNMENT = "reassignment"
    SPECULATION = "speculation"


class DeadlockError(RuntimeError):
    """No worker can make progress; raised by the deadlock guard."""


class RegistrationError(KeyError):
    """Operation on a worker id that was never registered."""


@dataclass(frozen=True)
class SyncPolicy:
    mode: SyncMode = SyncMode.BSP
    slack: int = 0
    mitigation: frozenset[Mitigation] = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "mode", SyncMode(self.mode))
        object.__setattr__(self, "mitigation", frozenset(Mitigation(m) for m in self.mitigation))
        if self.slack < 0:
            raise ValueError("slack must be non-negative")
        if self.mode is SyncMode.BSP and self.slack != 0:
            raise ValueError("BSP requires slack 0")

    @classmethod
    def bsp(cls, *mitigation: Mitigation | str) -> "SyncPolicy":
        return cls(SyncMode.BSP, 0, frozenset(mitigation))

    @classmethod
    def ssp(cls, slack: int, *mitigation: Mitigation | str) -> "SyncPolicy":
        return cls(SyncMode.SSP, slack, frozenset(mitigation))

    @property
    def reassignment(self) -> bool:
        return Mitigation.REASSIGNMENT in self.mitigation

    @property
    def speculation(self) -> bool:
        return Mitigation.SPECULATION in self.mitigation

    @property
    def label(self) -> str:
        """Short mode name used in reports, e.g. ``ssp+rr``."""
        parts = [self.mode.value]
        if self.reassignment:
            parts.append("rr")
        if self.speculation:
            parts.append("spec")
        return "+".join(parts)


@dataclass(frozen=True)
class ClusterClockView:
    clocks: tuple[int, ...]

    @property
    def min_clock(self) -> int:
        return min(self.clocks)

    @property
    def max_clock(self) -> int:
        return max(self.clocks)


def may_proceed(worker_clock: int, min_clock: int, policy: SyncPolicy) -> bool:
    """True iff a worker at ``worker_clock`` may start its next iteration."""
    return worker_clock - min_clock <= policy.slack


class ClockCoordinator:
    """Thread-safe per-worker clocks with blocking admission.

    Waiters are woken on every clock advance (no polling), so a blocked
    worker re-evaluates :func:`may_proceed` exactly when the view changes.
    ``on_advance`` hooks run under the lock after each increment.
    """

    def __init__(self, workers: int, policy: SyncPolicy, now: Callable[[], int] | None = None,
                 timeout_s: float = 30.0):
        if workers < 1:
            raise ValueError("need at least one worker")
        self.policy = policy
        self.timeout_s = timeout_s
        self._clocks = [0] * workers
        self._cond = threading.Condition()
        self._now = now
        self.on_advance: list[Callable[[int, int], None]] = []
        self.max_gap_seen = 0

    @property
    def workers(self) -> int:
        return len(self._clocks)

    @property
    def condition(self) -> threading.Condition:
        return self._cond

    def _check(self, worker: int) -> None:
        if not 0 <= worker < len(self._clocks):
            raise RegistrationError(f"unknown worker {worker}")

    def clock_of(self, worker: int) -> int:
        self._check(worker)
        return self._clocks[worker]

    def view(self) -> ClusterClockView:
        with self._cond:
            return ClusterClockView(tuple(self._clocks))

    def admitted(self, worker: int) -> bool:
        self._check(worker)
        return may_proceed(self._clocks[worker], min(self._clocks), self.policy)

    def advance(self, worker: int) -> int:
        self._check(worker)
        with self._cond:
            self._clocks[worker] += 1
            value = self._clocks[worker]
            self.max_gap_seen = max(self.max_gap_seen, max(self._clocks) - min(self._clocks))
            for hook in self.on_advance:
                hook(worker, value)
            self._cond.notify_all()
        return value

    def barrier_wait(self, worker: int) -> int:
        """Block until ``worker`` is admitted; return the blocked duration in ticks."""
        self._check(worker)
        now = self._now or _perf_ticks
        start = now()
        with self._cond:
            while not may_proceed(self._clocks[worker], min(self._clocks), self.policy):
                if not self._cond.wait(self.timeout_s):
                    raise DeadlockError(
                        f"worker {worker} blocked for {self.timeout_s}s at clocks {self._clocks}"
                    )
        return now() - start


def barrier_wait(worker: int, coordinator: ClockCoordinator) -> int:
    return coordinator.barrier_wait(worker)


def _perf_ticks() -> int:
    import time

    return time.perf_counter_ns() // 1000


def staleness_ok(clocks: Mapping[int, int] | tuple[int, ...], policy: SyncPolicy) -> bool:
    """The bound max_clock - min_clock <= slack + 1."""
    values = list(clocks.values()) if isinstance(clocks, Mapping) else list(clocks)
    return max(values) - min(values) <= policy.slack + 1
