"""Sharded in-memory parameter table with the Get / Add / Clock client API.

Keys are non-negative integers below the table capacity and every value is a
fixed-length float64 vector. Keys that were never written read as zeros.
Adds are buffered per worker and only become visible when the worker calls
:meth:`ParameterTable.flush` (implicitly done by :meth:`ParameterTable.clock`).
"""

from __future__ import annotations

import contextlib
import threading
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .consistency import ClockCoordinator, RegistrationError, SyncPolicy


class ContractViolation(ValueError):
    """Malformed key or value (wrong dimension, out of range, non-finite)."""


def shard_of(key: int, num_shards: int) -> int:
    if num_shards < 1:
        raise ValueError("num_shards must be >= 1")
    return key % num_shards


class Shard:
    """Storage for the keys ``k`` with ``k % num_shards == index``.

    ``values`` row ``i`` holds key ``index + i * num_shards``. When a backing
    array is given the shard is a strided view into it, which lets the table
    touch many shards with one vectorised operation.
    """

    def __init__(self, index: int, num_shards: int, capacity: int, dimension: int,
                 backing: np.ndarray | None = None):
        self.index = index
        self.num_shards = num_shards
        if backing is None:
            rows = max(0, -(-(capacity - index) // num_shards))
            self.values = np.zeros((rows, dimension))
        else:
            self.values = backing[index::num_shards]
        self.lock = threading.Lock()

    def read(self, local: np.ndarray) -> np.ndarray:
        with self.lock:
            return self.values[local].copy()

    def apply(self, local: np.ndarray, deltas: np.ndarray) -> None:
        with self.lock:
            np.add.at(self.values, local, deltas)


@dataclass
class _Pending:
    tag: tuple
    keys: np.ndarray
    deltas: np.ndarray
    unique: bool = False


@dataclass
class TableStats:
    gets: int = 0
    adds: int = 0
    flushes: int = 0
    wait_ticks: dict[int, int] = field(default_factory=lambda: defaultdict(int))


class ParameterTable:
    """Parameter store shared by ``workers`` clients.

    With ``canonical=True`` flushed updates are staged per iteration and
    applied, sorted by their tag, once every worker has clocked past that
    iteration. This makes the table state independent of which worker
    produced an update and when, which the equivalence tests rely on.
    Tags are ``(iteration, block, ...)`` tuples; untagged adds get the
    worker's current clock as iteration.
    """

    def __init__(
        self,
        capacity: int,
        dimension: int,
        workers: int,
        num_shards: int | None = None,
        policy: SyncPolicy | None = None,
        canonical: bool = False,
        coordinator: ClockCoordinator | None = None,
        now: Callable[[], int] | None = None,
    ):
        if capacity < 1 or dimension < 1:
            raise ValueError("capacity and dimension must be positive")
        self.capacity = capacity
        self.dimension = dimension
        self.num_shards = num_shards or workers
        self._dense = np.zeros((capacity, dimension))
        self.shards = [Shard(i, self.num_shards, capacity, dimension, self._dense)
                       for i in range(self.num_shards)]
        self.coordinator = coordinator or ClockCoordinator(workers, policy or SyncPolicy(), now=now)
        self.canonical = canonical
        self._buffers: dict[int, list[_Pending]] = {w: [] for w in range(workers)}
        self._staged: dict[int, list[tuple[tuple, int, _Pending]]] = defaultdict(list)
        self._seq = 0
        self._applied_through = 0
        self._lock = threading.RLock()
        self.stats = TableStats()

    @property
    def workers(self) -> int:
        return len(self._buffers)

    def _check_worker(self, worker: int) -> None:
        if worker not in self._buffers:
            raise RegistrationError(f"unknown worker {worker}")

    def _check_keys(self, keys) -> np.ndarray:
        arr = np.asarray(keys, dtype=np.int64).reshape(-1)
        if arr.size and (arr.min() < 0 or arr.max() >= self.capacity):
            raise ContractViolation(f"key out of range [0, {self.capacity})")
        return arr

    # -- reads ---------------------------------------------------------

    @contextlib.contextmanager
    def _locked(self, keys: np.ndarray | None = None):
        """Hold the locks of every shard ``keys`` touch (all shards if None), in index order."""
        if keys is None or keys.size > self.num_shards:
            ids = range(self.num_shards)
        else:
            ids = sorted(set((keys % self.num_shards).tolist()))
        with contextlib.ExitStack() as stack:
            for i in ids:
                stack.enter_context(self.shards[i].lock)
            yield

    def _read(self, keys: np.ndarray) -> np.ndarray:
        with self._locked(keys):
            return self._dense[keys]

    def _admit(self, worker: int) -> None:
        if not self.coordinator.admitted(worker):
            waited = self.coordinator.barrier_wait(worker)
            self.stats.wait_ticks[worker] += waited

    def get(self, worker: int, key: int) -> np.ndarray:
        """Read one value; blocks while the caller is ahead of the staleness bound."""
        return self.get_many(worker, [key])[0]

    def get_many(self, worker: int, keys) -> np.ndarray:
        self._check_worker(worker)
        arr = self._check_keys(keys)
        self._admit(worker)
        self.stats.gets += 1
        return self._read(arr)

    def snapshot(self) -> np.ndarray:
        """Dense copy of the whole table (capacity x dimension)."""
        with self._locked():
            return self._dense.copy()

    # -- writes --------------------------------------------------------

    def add(self, worker: int, key: int, delta, tag: tuple | None = None) -> None:
        self.add_many(worker, [key], np.asarray(delta, dtype=float).reshape(1, -1), tag)

    def add_many(self, worker: int, keys, deltas, tag: tuple | None = None) -> None:
        self._check_worker(worker)
        arr = self._check_keys(keys)
        d = np.asarray(deltas, dtype=float)
        if d.ndim == 1 and arr.size == 1:
            d = d.reshape(1, -1)
        if d.shape != (arr.size, self.dimension):
            raise ContractViolation(f"delta shape {d.shape} does not match ({arr.size}, {self.dimension})")
        if not np.all(np.isfinite(d)):
            raise ContractViolation("non-finite delta")
        if tag is None:
            tag = (self.coordinator.clock_of(worker),)
        with self._lock:
            unique = arr.size < 2 or bool(np.all(np.diff(np.sort(arr)) > 0))
            self._buffers[worker].append(_Pending(tuple(tag), arr, d.copy(), unique))
            self.stats.adds += 1

    def flush(self, worker: int) -> int:
        """Publish the worker's buffered adds; returns how many were flushed."""
        self._check_worker(worker)
        with self._lock:
            pending, self._buffers[worker] = self._buffers[worker], []
            for p in pending:
                if self.canonical:
                    self._seq += 1
                    self._staged[p.tag[0]].append((p.tag, self._seq, p))
                else:
                    self._apply(p)
            self.stats.flushes += 1
        return len(pending)

    def push(self, worker: int, keys, deltas, tag: tuple | None = None) -> None:
        """Add and flush immediately, without advancing the clock."""
        self.add_many(worker, keys, deltas, tag)
        self.flush(worker)

    def _apply(self, p: _Pending) -> None:
        with self._locked(p.keys):
            if p.unique:
                self._dense[p.keys] += p.deltas
            else:
                np.add.at(self._dense, p.keys, p.deltas)

    def _apply_staged(self, min_clock: int) -> None:
        while self._applied_through < min_clock:
            it = self._applied_through
            for _, _, p in sorted(self._staged.pop(it, []), key=lambda e: (e[0], e[1])):
                self._apply(p)
            self._applied_through += 1

    def clock(self, worker: int) -> int:
        """End the worker's iteration: flush its adds, then advance its clock."""
        with self._lock:
            self.flush(worker)
            value = self.coordinator.advance(worker)
            if self.canonical:
                self._apply_staged(self.coordinator.view().min_clock)
        return value

    def finalize(self) -> None:
        """Apply anything still staged (canonical mode, end of run)."""
        with self._lock:
            for w in self._buffers:
                self.flush(w)
            if self.canonical:
                self._apply_staged(max(self._staged, default=-1) + 1)

    def initialize(self, keys, values) -> None:
        """Write initial values directly, bypassing buffers and clocks."""
        arr = self._check_keys(keys)
        v = np.asarray(values, dtype=float).reshape(arr.size, self.dimension)
        with self._locked(arr):
            self._dense[arr] = v

    def clocks(self) -> tuple[int, ...]:
        return self.coordinator.view().clocks


def sequential_sum(capacity: int, dimension: int, adds: Iterable[tuple[int, np.ndarray]]) -> np.ndarray:
    """Reference result for a multiset of adds: plain dense accumulation."""
    out = np.zeros((capacity, dimension))
    for key, delta in adds:
        out[key] += delta
    return out
