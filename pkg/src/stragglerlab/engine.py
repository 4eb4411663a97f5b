"""Deterministic discrete-event cluster on a virtual microsecond clock.

Each worker runs the same iteration skeleton::

    delay point -> Get (comm) -> blocks (comp, one delay point each)
    -> delay point -> flush (comm) -> Clock

The dataset is cut into a fixed grid of blocks and every block is committed
through a :class:`CommitLog` keyed by ``(iteration, block)``. Helpers and
clones read a fresh snapshot and push their blocks immediately; the owner
buffers its adds until Clock.

Events are ordered by ``(time, worker_id, sequence)``, so replaying a
configuration reproduces every timestamp.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .bench import IterationRecord
from .config import ExperimentConfig
from .consistency import ClockCoordinator, DeadlockError
from .injector import StragglerInjector
from .mitigation import (
    CloneArbiter,
    CloneDecision,
    ClonePolicy,
    CommitLog,
    Interval,
    MsgKind,
    ProgressReport,
    RRState,
    WorkAssignment,
    absorb_tail,
    begin_iteration,
    detect_straggler,
    finish_help,
    offer_tail,
    rr_step,
    shed_work,
    speculative_clone,
)
from .paramserver import ParameterTable
from .workloads import Workload


class InvariantBreach(RuntimeError):
    """A run violated the staleness bound, exactly-once, or a workload invariant."""


def block_bounds(size: int, workers: int, blocks_per_worker: int, block_size: int = 0) -> np.ndarray:
    """Item offsets of the block grid; block ``b`` is ``[bounds[b], bounds[b+1])``."""
    if size < 1:
        raise ValueError("dataset is empty")
    if block_size > 0:
        return np.append(np.arange(0, size, block_size), size)
    n = workers * blocks_per_worker
    if n > size:
        # keep equal block counts per worker; only a dataset smaller than W leaves workers idle
        n = workers * (size // workers) or size
    return np.arange(n + 1) * size // n


@dataclass
class RunResult:
    records: list[IterationRecord]
    wall_ticks: int
    max_gap: int
    gap_trace: list[tuple[int, int]]
    table: np.ndarray
    commit_log: CommitLog
    counters: dict[str, int]
    objective: float
    objective_trace: list[float] = field(default_factory=list)


@dataclass
class _Task:
    """Helper or clone work on someone else's blocks."""

    owner: int
    iteration: int
    interval: Interval
    ptr: int
    view: np.ndarray | None = None
    decision: CloneDecision | None = None
    buffer: list = field(default_factory=list)


class _Worker:
    def __init__(self, wid: int, blocks: int):
        self.wid = wid
        self.act: str | None = None
        self.data: Any = None
        self.token = 0
        self.seg_start = 0
        self.seg_cat = 2
        self.rec = 0
        self.in_iter = False
        self.it = -1
        self.assigned = Interval(0, 0)
        self.front = 0
        self.end = 0
        self.plan = None
        self.view = None
        self.rr = RRState(wid, blocks)
        self.absorb = 0
        self.awaiting = False
        self.inbox: list = []
        self.help: _Task | None = None
        self.clone: _Task | None = None
        self.cloned: CloneDecision | None = None
        self.spec_buf: list = []
        self.bucket = -1
        self.last_helper = wid

    @property
    def free(self) -> bool:
        return self.act is None and not self.in_iter and self.help is None and self.clone is None


_COMP, _COMM, _WAIT = 0, 1, 2


class VirtualCluster:
    """Simulate one run of ``workload`` under ``config`` in virtual time."""

    def __init__(self, config: ExperimentConfig, workload: Workload, injector=None,
                 trace_objective: bool = False):
        config.validate()
        self.cfg = config
        self.wl = workload
        run, c, m = config.run, config.cluster, config.mitigation
        self.W, self.E = run.workers, run.iterations
        self.policy = config.sync
        self.injector = injector or StragglerInjector(config.straggler, self.W, c.workers_per_machine)
        self.trace_objective = trace_objective
        self.now = 0
        self.coord = ClockCoordinator(self.W, self.policy, now=lambda: self.now)
        self.table = ParameterTable(workload.capacity, workload.dimension, self.W, c.shards or None,
                                    self.policy, canonical=c.canonical_order, coordinator=self.coord)
        init = workload.initial_values()
        if init is not None:
            self.table.initialize(*init)
        self.all_keys = np.arange(workload.capacity)

        self.bounds = block_bounds(workload.size, self.W, c.blocks_per_worker, c.block_size)
        self.nblocks = len(self.bounds) - 1
        sizes = np.diff(self.bounds)
        if c.item_cost_us > 0 or c.block_size > 0:
            per_item = c.item_cost_us or c.iter_compute_ms * 1000.0 * self.W / workload.size
            self.block_ticks = [int(round(n * per_item)) for n in sizes]
        else:
            uniform = int(round(c.iter_compute_ms * 1000.0 * self.W / self.nblocks))
            self.block_ticks = [uniform] * self.nblocks
        counts = self.injector.block_counts(self.W, self.nblocks)
        base = WorkAssignment.from_counts(counts)
        base.validate(self.nblocks)
        self.base = [base.ranges[w][0] if base.ranges[w] else Interval(0, 0) for w in range(self.W)]
        self.get_ticks = int(round(c.get_ms * 1000))
        self.flush_ticks = int(round(c.flush_ms * 1000))
        self.latency = c.msg_latency_us
        self.jitter = c.msg_jitter_us
        self._jrng = np.random.default_rng([run.seed & 0xFFFFFFFF, 0x4A49])
        self.deadlock_ticks = c.deadlock_ticks

        self.rr_on = self.policy.reassignment
        self.spec_on = self.policy.speculation
        self.detect_threshold = m.detect_threshold
        self.shed_fraction = m.shed_fraction
        self.broadcast_step = m.progress_broadcast_interval
        self.clone_policy = ClonePolicy(m.clone_lag_threshold, m.max_clones)

        self.workers = [_Worker(w, self.nblocks) for w in range(self.W)]
        self.board = {w: ProgressReport(w, 0, 0.0, 0) for w in range(self.W)}
        self.acc = np.zeros((self.W, self.E, 3), dtype=np.int64)
        self.log = CommitLog()
        self.arbiter = CloneArbiter()
        self.counters = dict.fromkeys(
            ("sheds", "helps", "help_blocks", "cancels", "clones", "clone_wins", "refused", "dropped"), 0)
        self.gap_trace: list[tuple[int, int]] = []
        self.objective_trace: list[float] = []
        self._heap: list = []
        self._seq = 0
        self._last_progress = 0
        self._done = False
        self._min_seen = 0

    # -- plumbing ----------------------------------------------------------

    def _push(self, t: int, wid: int, kind: str, payload) -> None:
        self._seq += 1
        heapq.heappush(self._heap, (t, wid, self._seq, kind, payload))

    def _seg(self, w: _Worker, t: int, cat: int) -> None:
        if t > w.seg_start:
            self.acc[w.wid, w.rec, w.seg_cat] += t - w.seg_start
        w.seg_start, w.seg_cat = t, cat

    def _start(self, w: _Worker, t: int, act: str, dur: int, cat: int, data=None) -> None:
        self._seg(w, t, cat)
        w.act, w.data = act, data
        w.token += 1
        self._push(t + max(0, int(dur)), w.wid, "end", (w.wid, w.token))

    def _idle(self, w: _Worker, t: int) -> None:
        self._seg(w, t, _WAIT)
        w.act, w.data = None, None
        w.token += 1

    def _delay(self) -> int:
        extra = int(self._jrng.integers(0, self.jitter + 1)) if self.jitter else 0
        return self.latency + extra

    def _send(self, msgs, t: int) -> None:
        for msg in msgs:
            self._push(t + self._delay(), msg.dst, "msg", msg)

    def _broadcast(self, w: _Worker, t: int, fraction: float) -> None:
        self._push(t + self._delay(), w.wid, "progress", ProgressReport(w.wid, w.it, fraction, t))

    def _cost(self, w: _Worker, b: int, t: int) -> int:
        return int(round(self.block_ticks[b] * self.injector.slowdown(w.wid, t)))

    def _items(self, b: int) -> tuple[int, int]:
        return int(self.bounds[b]), int(self.bounds[b + 1])

    def _fraction(self, w: _Worker) -> float:
        n = len(w.assigned)
        if n == 0:
            return 1.0
        left = w.end - w.front
        if w.rr.requested is not None:
            left += w.rr.requested.hi - w.absorb
        return 1.0 - left / n

    def _commit(self, wid: int, it: int, b: int, upd, push: bool) -> bool:
        if not self.log.claim(it, b, wid):
            self.counters["refused"] += 1
            return False
        if push:
            self.table.push(wid, upd.keys, upd.deltas, tag=(it, b))
        else:
            self.table.add_many(wid, upd.keys, upd.deltas, tag=(it, b))
        self.wl.commit_local(upd)
        return True

    # -- main loop ---------------------------------------------------------

    def run(self) -> RunResult:
        try:
            self._loop()
            T = self.now
            for w in self.workers:
                self._seg(w, T, _WAIT)
            self.table.finalize()
            final = self.table.snapshot()
            self.wl.check(final)
        except Exception as exc:
            for w in self.workers:
                self._seg(w, self.now, w.seg_cat)
            exc.partial_records = self._records()
            raise
        self.counters["dropped"] = sum(w.rr.dropped for w in self.workers)
        return RunResult(self._records(), T, self.coord.max_gap_seen, self.gap_trace, final, self.log,
                         dict(self.counters), self.wl.objective(final), self.objective_trace)

    def _records(self) -> list[IterationRecord]:
        return [
            IterationRecord(w, k, int(self.acc[w, k, 0]), int(self.acc[w, k, 1]), int(self.acc[w, k, 2]))
            for k in range(self.E) for w in range(self.W)
        ]

    def _loop(self) -> None:
        for w in self.workers:
            self._next(w, 0)
        while not self._done:
            if not self._heap:
                raise DeadlockError(f"no pending events at t={self.now} with clocks {self.coord.view().clocks}")
            t, _, _, kind, payload = heapq.heappop(self._heap)
            if t - self._last_progress > self.deadlock_ticks:
                raise DeadlockError(f"no progress for {t - self._last_progress} ticks at clocks "
                                    f"{self.coord.view().clocks}")
            self.now = t
            if kind == "end":
                wid, token = payload
                w = self.workers[wid]
                if token == w.token:
                    self._on_end(w, t)
            elif kind == "msg":
                self._on_msg(self.workers[payload.dst], payload, t)
            else:
                prev = self.board[payload.worker_id]
                if (payload.timestamp, payload.iteration) >= (prev.timestamp, prev.iteration):
                    self.board[payload.worker_id] = payload
                if self.spec_on:
                    self._maybe_clone(t)

    def _next(self, w: _Worker, t: int) -> None:
        if w.act is not None:
            return
        if w.in_iter:
            return self._continue_own(w, t)
        if w.help is not None:
            return self._help_step(w, t)
        if w.clone is not None:
            return self._clone_step(w, t)
        while self.rr_on and w.inbox:
            msg = w.inbox.pop(0)
            w.rr, out = rr_step(w.rr, msg)
            if out:
                self._send(out, t)
                self.counters["helps"] += 1
                w.help = _Task(msg.src, msg.iteration, msg.interval, msg.interval.hi - 1)
                return self._start(w, t, "help_get", self.get_ticks, _COMM)
        if self.coord.clock_of(w.wid) < self.E and self.coord.admitted(w.wid):
            return self._start_iteration(w, t)
        self._idle(w, t)
        if self.spec_on:
            self._maybe_clone(t)

    # -- own iteration -----------------------------------------------------

    def _start_iteration(self, w: _Worker, t: int) -> None:
        k = self.coord.clock_of(w.wid)
        self._seg(w, t, _COMP)
        w.rec = k
        w.in_iter, w.it = True, k
        w.assigned = self.base[w.wid]
        w.front, w.end = w.assigned.lo, w.assigned.hi
        w.rr = begin_iteration(w.rr, k)
        w.absorb, w.awaiting = 0, False
        w.view = None
        nominal = self.get_ticks + self.flush_ticks + sum(self.block_ticks[b] for b in w.assigned.indices())
        w.plan = self.injector.plan(w.wid, k, nominal, len(w.assigned) + 2)
        w.bucket = 0
        self._broadcast(w, t, self._fraction(w))
        self._start(w, t, "pre_get", w.plan.at(0), _COMP)

    def _continue_own(self, w: _Worker, t: int) -> None:
        w.awaiting = False
        if w.front < w.end:
            b = w.front
            slice_ = w.plan.at(1 + b - w.assigned.lo)
            return self._start(w, t, "block", self._cost(w, b, t) + slice_, _COMP, b)
        tail = w.rr.requested
        if tail is not None:
            if w.absorb >= tail.hi:
                w.rr, out = absorb_tail(w.rr)
                self.counters["cancels"] += len(out)
                self._send(out, t)
                return self._continue_own(w, t)
            if not self.log.claimed(w.it, w.absorb):
                return self._start(w, t, "absorb", self._cost(w, w.absorb, t), _COMP, w.absorb)
            w.awaiting = True
            return self._idle(w, t)
        if w.bucket < math.inf:
            w.bucket = math.inf
            self._broadcast(w, t, 1.0)
        self._start(w, t, "pre_flush", w.plan.at(len(w.assigned) + 1), _COMP)

    def _on_block(self, w: _Worker, t: int, b: int) -> None:
        self._last_progress = t
        lo, hi = self._items(b)
        upd = self.wl.process(w.view, lo, hi, w.it)
        w.front = b + 1
        if w.cloned is not None and b in w.cloned.interval:
            w.spec_buf.append((b, upd))
            if w.front >= w.cloned.interval.hi:
                self._finish_clone_race(w.cloned, w.wid, t)
        else:
            self._commit(w.wid, w.it, b, upd, push=False)
        frac = self._fraction(w)
        bucket = int(frac / self.broadcast_step + 1e-9)
        if bucket > w.bucket:
            w.bucket = bucket
            self._broadcast(w, t, frac)
        if self.rr_on and w.rr.requested is None and w.cloned is None and w.end - w.front >= 2:
            self._maybe_shed(w, t, frac)

    def _maybe_shed(self, w: _Worker, t: int, frac: float) -> None:
        me = ProgressReport(w.wid, w.it, frac, t)
        peers = [self.board[o] for o in range(self.W) if o != w.wid]
        if not detect_straggler(me, peers, self.detect_threshold):
            return
        ready = [p.worker_id for p in peers if p.relative_to(w.it) >= 1.0]
        if not ready:
            return
        helper = min(ready, key=lambda o: (o - w.last_helper - 1) % self.W)
        wa = WorkAssignment(w.it, {w.wid: (Interval(w.assigned.lo, w.end),)})
        _, msgs = shed_work(w.wid, helper, wa, self.shed_fraction, front=w.front)
        if not msgs:
            return
        tail = msgs[0].interval
        w.rr, out = offer_tail(w.rr, tail, helper)
        w.end = w.absorb = tail.lo
        w.last_helper = helper
        self.counters["sheds"] += 1
        self._send(out, t)

    def _clock(self, w: _Worker, t: int) -> None:
        missing = [b for b in w.assigned.indices() if not self.log.claimed(w.it, b)]
        if missing:
            raise InvariantBreach(f"worker {w.wid} clocked iteration {w.it} with blocks {missing} uncommitted")
        self.table.clock(w.wid)
        view = self.coord.view()
        gap = view.max_clock - view.min_clock
        self.gap_trace.append((t, gap))
        if gap > self.policy.slack + 1:
            raise InvariantBreach(f"staleness bound broken: clocks {view.clocks}, slack {self.policy.slack}")
        if self.trace_objective and view.min_clock > self._min_seen:
            self._min_seen = view.min_clock
            self.objective_trace.append(self.wl.objective(self.table.snapshot()))
        w.in_iter = False
        w.view = None
        self._last_progress = t
        if view.min_clock >= self.E:
            self._done = True
            return
        self._next(w, t)
        for o in self.workers:
            if o is not w and o.free:
                self._next(o, t)

    # -- activity completion -----------------------------------------------

    def _on_end(self, w: _Worker, t: int) -> None:
        act, data = w.act, w.data
        w.act = w.data = None
        if act == "pre_get":
            return self._start(w, t, "get", self.get_ticks, _COMM)
        if act == "get":
            w.view = self.table.get_many(w.wid, self.all_keys)
            return self._continue_own(w, t)
        if act == "block":
            self._on_block(w, t, data)
            return self._next(w, t) if w.act is None else None
        if act == "absorb":
            self._last_progress = t
            lo, hi = self._items(data)
            upd = self.wl.process(w.view, lo, hi, w.it)
            if self._commit(w.wid, w.it, data, upd, push=False):
                w.absorb = data + 1
            return self._continue_own(w, t)
        if act == "pre_flush":
            return self._start(w, t, "flush", self.flush_ticks, _COMM)
        if act == "flush":
            return self._clock(w, t)
        if act in ("help_get", "clone_get"):
            task = w.help if act == "help_get" else w.clone
            task.view = self.table.snapshot()
            return self._next(w, t)
        if act == "help_block":
            return self._on_help_block(w, t, data)
        if act == "clone_block":
            return self._on_clone_block(w, t, data)
        raise AssertionError(f"unknown activity {act}")

    # -- reassignment ------------------------------------------------------

    def _on_msg(self, w: _Worker, msg, t: int) -> None:
        if msg.kind is MsgKind.HELP_REQUEST:
            if not self.rr_on:
                return
            w.inbox.append(msg)
            if w.free:
                self._next(w, t)
            return
        w.rr, out = rr_step(w.rr, msg)
        self.counters["cancels"] += sum(1 for m in out if m.kind is MsgKind.CANCEL)
        self._send(out, t)
        if msg.kind is MsgKind.WORK_DONE:
            if w.awaiting and w.rr.requested is None:
                self._continue_own(w, t)
        elif msg.kind is MsgKind.CANCEL:
            w.inbox = [m for m in w.inbox if (m.src, m.iteration, m.interval) not in w.rr.cancelled]
            if w.help is not None and w.rr.helping is None:
                w.help = None
                if w.act in ("help_get", "help_block"):
                    self._idle(w, t)
                    self._next(w, t)

    def _help_step(self, w: _Worker, t: int) -> None:
        task = w.help
        if w.rr.helping is None:
            w.help = None
            return self._next(w, t)
        b = task.ptr
        if b < task.interval.lo or self.log.claimed(task.iteration, b):
            return self._end_help(w, t)
        self._start(w, t, "help_block", self._cost(w, b, t), _COMP, b)

    def _on_help_block(self, w: _Worker, t: int, b: int) -> None:
        self._last_progress = t
        task = w.help
        lo, hi = self._items(b)
        upd = self.wl.process(task.view, lo, hi, task.iteration)
        if not self._commit(w.wid, task.iteration, b, upd, push=True):
            return self._end_help(w, t)
        self.counters["help_blocks"] += 1
        task.ptr -= 1
        self._help_step(w, t)

    def _end_help(self, w: _Worker, t: int) -> None:
        w.rr, out = finish_help(w.rr)
        self._send(out, t)
        w.help = None
        self._next(w, t)

    # -- speculation -------------------------------------------------------

    def _maybe_clone(self, t: int) -> None:
        idle = [w.wid for w in self.workers if w.free]
        if not idle:
            return
        remaining = {}
        for w in self.workers:
            if (w.in_iter and w.cloned is None and w.rr.requested is None and w.front < w.end
                    and w.act in ("pre_get", "get", "block") and self.board[w.wid].iteration == w.it):
                remaining[w.wid] = Interval(w.front, w.end)
        if not remaining:
            return
        active = sum(1 for w in self.workers if w.clone is not None)
        cloned = [w.wid for w in self.workers if w.cloned is not None]
        reports = [self.board[w] for w in range(self.W)]
        for d in speculative_clone(reports, idle, self.clone_policy, remaining, cloned, active):
            orig, clone = self.workers[d.worker], self.workers[d.clone_target]
            d = CloneDecision(d.worker, d.interval, orig.it, d.clone_target)
            orig.cloned = d
            orig.spec_buf = []
            clone.clone = _Task(d.worker, d.iteration, d.interval, d.interval.lo, decision=d)
            self.counters["clones"] += 1
            self._start(clone, t, "clone_get", self.get_ticks, _COMM)

    def _clone_step(self, w: _Worker, t: int) -> None:
        task = w.clone
        self._start(w, t, "clone_block", self._cost(w, task.ptr, t), _COMP, task.ptr)

    def _on_clone_block(self, w: _Worker, t: int, b: int) -> None:
        self._last_progress = t
        task = w.clone
        lo, hi = self._items(b)
        task.buffer.append((b, self.wl.process(task.view, lo, hi, task.iteration)))
        task.ptr += 1
        if task.ptr < task.interval.hi:
            return self._clone_step(w, t)
        self._finish_clone_race(task.decision, w.wid, t)
        self._next(w, t)

    def _finish_clone_race(self, d: CloneDecision, finisher: int, t: int) -> None:
        if not self.arbiter.finish(d, finisher):
            return
        orig, clone = self.workers[d.worker], self.workers[d.clone_target]
        if finisher == d.worker:
            for b, upd in orig.spec_buf:
                self._commit(orig.wid, d.iteration, b, upd, push=False)
            clone.clone = None
            if clone.act == "clone_get" or clone.act == "clone_block":
                self._idle(clone, t)
                self._next(clone, t)
        else:
            self.counters["clone_wins"] += 1
            for b, upd in clone.clone.buffer:
                self._commit(clone.wid, d.iteration, b, upd, push=True)
            clone.clone = None
            orig.front = max(orig.front, d.interval.hi)
            if orig.act == "block":
                self._idle(orig, t)
                self._continue_own(orig, t)
        orig.cloned = None
        orig.spec_buf = []


def simulate(config: ExperimentConfig, workload: Workload, injector=None, trace_objective: bool = False) -> RunResult:
    return VirtualCluster(config, workload, injector, trace_objective).run()
