"""Threaded workers on the wall clock.

Same iteration skeleton and commit protocol as the virtual engine, but
compute cost and injected delays are slept for real and all coordination
goes through the clock coordinator's condition variable. Timings are not
reproducible; use the virtual engine for anything that is asserted on.
"""

from __future__ import annotations

import os
import threading
import time

import numpy as np

from .bench import IterationRecord
from .config import ExperimentConfig
from .consistency import DeadlockError
from .engine import InvariantBreach, RunResult, block_bounds
from .injector import Pattern, StragglerInjector, spawn_disruptor
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

_COMP, _COMM, _WAIT = 0, 1, 2
_POLL_S = 0.002


class _Aborted(Exception):
    """Another worker failed; unwind quietly."""


class RealCluster:
    def __init__(self, config: ExperimentConfig, workload: Workload, injector=None):
        config.validate()
        self.cfg = config
        self.wl = workload
        run, c, m = config.run, config.cluster, config.mitigation
        self.W, self.E = run.workers, run.iterations
        self.policy = config.sync
        self.injector = injector or StragglerInjector(config.straggler, self.W, c.workers_per_machine)
        self.table = ParameterTable(workload.capacity, workload.dimension, self.W, c.shards or None,
                                    self.policy, canonical=c.canonical_order)
        self.table.coordinator.timeout_s = c.deadlock_timeout_s
        self.coord = self.table.coordinator
        self.cond = self.coord.condition
        init = workload.initial_values()
        if init is not None:
            self.table.initialize(*init)
        self.all_keys = np.arange(workload.capacity)
        self.bounds = block_bounds(workload.size, self.W, c.blocks_per_worker, c.block_size)
        self.nblocks = len(self.bounds) - 1
        sizes = np.diff(self.bounds)
        if c.item_cost_us > 0 or c.block_size > 0:
            per_item = c.item_cost_us or c.iter_compute_ms * 1000.0 * self.W / workload.size
            self.block_us = [n * per_item for n in sizes]
        else:
            self.block_us = [c.iter_compute_ms * 1000.0 * self.W / self.nblocks] * self.nblocks
        counts = self.injector.block_counts(self.W, self.nblocks)
        wa = WorkAssignment.from_counts(counts)
        self.base = [wa.ranges[w][0] if wa.ranges[w] else Interval(0, 0) for w in range(self.W)]
        self.get_us, self.flush_us = c.get_ms * 1000.0, c.flush_ms * 1000.0
        self.timeout_s = c.deadlock_timeout_s
        self.rr_on, self.spec_on = self.policy.reassignment, self.policy.speculation
        self.m = m
        self.clone_policy = ClonePolicy(m.clone_lag_threshold, m.max_clones)

        self.acc = np.zeros((self.W, self.E, 3), dtype=np.int64)
        self.rec = [0] * self.W
        self.log = CommitLog()
        self.arbiter = CloneArbiter()
        self.board = {w: ProgressReport(w, 0, 0.0, 0) for w in range(self.W)}
        self.rr = [RRState(w, self.nblocks) for w in range(self.W)]
        self.inbox: list[list] = [[] for _ in range(self.W)]
        self.state = [dict(it=-1, front=0, end=0, lo=0, n=0, absorb=0) for _ in range(self.W)]
        self.cloned: dict[int, CloneDecision] = {}
        self.clone_decided: set[tuple] = set()
        self.active_clones = 0
        self.counters = dict.fromkeys(
            ("sheds", "helps", "help_blocks", "cancels", "clones", "clone_wins", "refused", "dropped"), 0)
        self.gap_trace: list[tuple[int, int]] = []
        self.errors: list[BaseException] = []
        self.t0 = 0

    def _now(self) -> int:
        return time.perf_counter_ns() // 1000 - self.t0

    def _sleep_us(self, us: float) -> None:
        if us > 0:
            time.sleep(us / 1e6)

    def _account(self, wid: int, cat: int, start: int) -> int:
        now = self._now()
        self.acc[wid, self.rec[wid], cat] += now - start
        return now

    def _send(self, msgs) -> None:
        for m in msgs:
            self.inbox[m.dst].append(m)
        if msgs:
            self.cond.notify_all()

    def _commit(self, wid, it, b, upd, push) -> bool:
        with self.cond:
            if not self.log.claim(it, b, wid):
                self.counters["refused"] += 1
                return False
            self.wl.commit_local(upd)
        if push:
            self.table.push(wid, upd.keys, upd.deltas, tag=(it, b))
        else:
            self.table.add_many(wid, upd.keys, upd.deltas, tag=(it, b))
        return True

    def _block_us(self, wid: int, b: int) -> float:
        return self.block_us[b] * self.injector.slowdown(wid, self._now())

    def _process(self, view, b, it):
        return self.wl.process(view, int(self.bounds[b]), int(self.bounds[b + 1]), it)

    # -- worker ------------------------------------------------------------

    def _worker(self, wid: int) -> None:
        try:
            for _ in range(self.E):
                self._wait_admission(wid)
                self._iteration(wid)
            self._linger(wid)
        except _Aborted:
            pass
        except BaseException as exc:  # surfaced by run()
            with self.cond:
                self.errors.append(exc)
                self.cond.notify_all()

    def _serve(self, wid: int, wait_start: int) -> bool:
        """Help or clone if there is something to do; called with the lock held."""
        if self.rr_on:
            while self.inbox[wid]:
                msg = self.inbox[wid].pop(0)
                if msg.kind is not MsgKind.HELP_REQUEST:
                    self._handle(wid, msg)
                    continue
                self.rr[wid], out = rr_step(self.rr[wid], msg)
                if out:
                    self._send(out)
                    self.counters["helps"] += 1
                    self._account(wid, _WAIT, wait_start)
                    self.cond.release()
                    try:
                        self._help(wid, msg)
                    finally:
                        self.cond.acquire()
                    return True
        if self.spec_on:
            d = self._pick_clone(wid)
            if d is not None:
                self._account(wid, _WAIT, wait_start)
                self.cond.release()
                try:
                    self._run_clone(wid, d)
                finally:
                    self.cond.acquire()
                return True
        return False

    def _wait_admission(self, wid: int) -> None:
        start = self._now()
        deadline = time.monotonic() + self.timeout_s
        with self.cond:
            while not self.coord.admitted(wid) and not self.errors:
                if self._serve(wid, start):
                    start = self._now()
                    deadline = time.monotonic() + self.timeout_s
                    continue
                if not self.cond.wait(_POLL_S) and time.monotonic() > deadline:
                    raise DeadlockError(f"worker {wid} not admitted within {self.timeout_s}s")
            self._drain(wid)
        self._account(wid, _WAIT, start)

    def _linger(self, wid: int) -> None:
        start = self._now()
        with self.cond:
            while self.coord.view().min_clock < self.E and not self.errors:
                if self._serve(wid, start):
                    start = self._now()
                    continue
                self.cond.wait(_POLL_S)
        self._account(wid, _WAIT, start)

    def _drain(self, wid: int) -> None:
        keep = []
        for msg in self.inbox[wid]:
            if msg.kind is MsgKind.HELP_REQUEST:
                keep.append(msg)
            else:
                self._handle(wid, msg)
        self.inbox[wid] = keep

    def _handle(self, wid: int, msg) -> None:
        self.rr[wid], out = rr_step(self.rr[wid], msg)
        self.counters["cancels"] += sum(1 for m in out if m.kind is MsgKind.CANCEL)
        self._send(out)

    def _report(self, wid: int, it: int, frac: float) -> None:
        self.board[wid] = ProgressReport(wid, it, frac, self._now())

    def _fraction(self, wid: int) -> float:
        s = self.state[wid]
        if s["n"] == 0:
            return 1.0
        left = s["end"] - s["front"]
        req = self.rr[wid].requested
        if req is not None:
            left += req.hi - s["absorb"]
        return 1.0 - left / s["n"]

    def _iteration(self, wid: int) -> None:
        k = self.coord.clock_of(wid)
        self.rec[wid] = k
        iv = self.base[wid]
        nominal = int(self.get_us + self.flush_us + sum(self.block_us[b] for b in iv.indices()))
        plan = self.injector.plan(wid, k, nominal, len(iv) + 2)
        s = self.state[wid]
        with self.cond:
            s.update(it=k, front=iv.lo, end=iv.hi, lo=iv.lo, n=len(iv), absorb=iv.lo)
            self.rr[wid] = begin_iteration(self.rr[wid], k)
            self._report(wid, k, self._fraction(wid))
        t = self._now()
        self._sleep_us(plan.at(0))
        t = self._account(wid, _COMP, t)
        self._sleep_us(self.get_us)
        view = self.table.get_many(wid, self.all_keys)
        t = self._account(wid, _COMM, t)
        spec_buf = []
        bucket = 0
        while True:
            with self.cond:
                self._drain(wid)
                d = self.cloned.get(wid)
                if d is not None and d.key in self.clone_decided:
                    s["front"] = max(s["front"], d.interval.hi)
                    self.cloned.pop(wid)
                    spec_buf = []
                if s["front"] >= s["end"]:
                    break
                b = s["front"]
            self._sleep_us(self._block_us(wid, b) + plan.at(1 + b - iv.lo))
            upd = self._process(view, b, k)
            with self.cond:
                s["front"] = b + 1
                d = self.cloned.get(wid)
                lost = d is not None and d.key in self.clone_decided
                buffered = d is not None and not lost and b in d.interval
                if buffered:
                    spec_buf.append((b, upd))
                won = buffered and s["front"] >= d.interval.hi and self.arbiter.finish(d, wid)
                if won:
                    self.cloned.pop(wid)
                    self.clone_decided.add(d.key)
                    self.cond.notify_all()
                frac = self._fraction(wid)
                if int(frac / self.m.progress_broadcast_interval + 1e-9) > bucket:
                    bucket = int(frac / self.m.progress_broadcast_interval + 1e-9)
                    self._report(wid, k, frac)
                if self.rr_on and self.rr[wid].requested is None and wid not in self.cloned \
                        and s["end"] - s["front"] >= 2:
                    self._maybe_shed(wid, frac)
            if won:
                for bb, u in spec_buf:
                    self._commit(wid, k, bb, u, push=False)
                spec_buf = []
            elif not buffered and not lost:
                self._commit(wid, k, b, upd, push=False)
            t = self._account(wid, _COMP, t)
        # absorb shed tails that nobody picked up
        while True:
            with self.cond:
                self._drain(wid)
                tail = self.rr[wid].requested
                if tail is None:
                    break
                if s["absorb"] >= tail.hi:
                    self.rr[wid], out = absorb_tail(self.rr[wid])
                    self.counters["cancels"] += len(out)
                    self._send(out)
                    continue
                b = s["absorb"]
                if self.errors:
                    raise _Aborted
                if self.log.claimed(k, b):
                    w0 = self._now()
                    self.cond.wait(_POLL_S)
                    self.acc[wid, k, _WAIT] += self._now() - w0
                    t = self._now()
                    continue
            self._sleep_us(self._block_us(wid, b))
            upd = self._process(view, b, k)
            if self._commit(wid, k, b, upd, push=False):
                with self.cond:
                    s["absorb"] = b + 1
            t = self._account(wid, _COMP, t)
        with self.cond:
            self._report(wid, k, 1.0)
        self._sleep_us(plan.at(len(iv) + 1))
        t = self._account(wid, _COMP, t)
        self._sleep_us(self.flush_us)
        with self.cond:
            missing = [b for b in iv.indices() if not self.log.claimed(k, b)]
            if missing:
                raise InvariantBreach(f"worker {wid} clocked iteration {k} with blocks {missing} uncommitted")
            self.table.clock(wid)
            view_c = self.coord.view()
            gap = view_c.max_clock - view_c.min_clock
            self.gap_trace.append((self._now(), gap))
            if gap > self.policy.slack + 1:
                raise InvariantBreach(f"staleness bound broken: clocks {view_c.clocks}")
        self._account(wid, _COMM, t)

    def _maybe_shed(self, wid: int, frac: float) -> None:
        s = self.state[wid]
        k = s["it"]
        me = ProgressReport(wid, k, frac, self._now())
        peers = [self.board[o] for o in range(self.W) if o != wid]
        if not detect_straggler(me, peers, self.m.detect_threshold):
            return
        ready = [p.worker_id for p in peers if p.relative_to(k) >= 1.0]
        if not ready:
            return
        helper = min(ready, key=lambda o: (o - wid - 1) % self.W)
        wa = WorkAssignment(k, {wid: (Interval(s["lo"], s["end"]),)})
        _, msgs = shed_work(wid, helper, wa, self.m.shed_fraction, front=s["front"])
        if not msgs:
            return
        tail = msgs[0].interval
        self.rr[wid], out = offer_tail(self.rr[wid], tail, helper)
        s["end"] = s["absorb"] = tail.lo
        self.counters["sheds"] += 1
        self._send(out)

    def _help(self, wid: int, msg) -> None:
        t = self._now()
        self._sleep_us(self.get_us)
        view = self.table.snapshot()
        t = self._account(wid, _COMM, t)
        b = msg.interval.hi - 1
        while True:
            with self.cond:
                self._drain(wid)
                if self.rr[wid].helping is None:
                    return
                if b < msg.interval.lo or self.log.claimed(msg.iteration, b):
                    self.rr[wid], out = finish_help(self.rr[wid])
                    self._send(out)
                    return
            self._sleep_us(self._block_us(wid, b))
            upd = self._process(view, b, msg.iteration)
            t = self._account(wid, _COMP, t)
            with self.cond:
                if self.rr[wid].helping is None:
                    return
            if not self._commit(wid, msg.iteration, b, upd, push=True):
                with self.cond:
                    self.rr[wid], out = finish_help(self.rr[wid])
                    self._send(out)
                return
            with self.cond:
                self.counters["help_blocks"] += 1
            b -= 1

    def _pick_clone(self, wid: int) -> CloneDecision | None:
        remaining = {}
        for w in range(self.W):
            s = self.state[w]
            if (w != wid and s["it"] >= 0 and self.coord.clock_of(w) == s["it"] and w not in self.cloned
                    and self.rr[w].requested is None and s["front"] < s["end"]
                    and self.board[w].iteration == s["it"]):
                remaining[w] = Interval(s["front"], s["end"])
        if not remaining:
            return None
        reports = [self.board[w] for w in range(self.W)]
        picks = speculative_clone(reports, [wid], self.clone_policy, remaining, list(self.cloned),
                                  self.active_clones)
        if not picks:
            return None
        d = picks[0]
        self.cloned[d.worker] = d
        self.active_clones += 1
        self.counters["clones"] += 1
        return d

    def _run_clone(self, wid: int, d: CloneDecision) -> None:
        try:
            t = self._now()
            self._sleep_us(self.get_us)
            view = self.table.snapshot()
            t = self._account(wid, _COMM, t)
            buf = []
            for b in d.interval.indices():
                with self.cond:
                    if d.key in self.clone_decided:
                        return
                self._sleep_us(self._block_us(wid, b))
                buf.append((b, self._process(view, b, d.iteration)))
                t = self._account(wid, _COMP, t)
            with self.cond:
                if not self.arbiter.finish(d, wid):
                    return
                self.clone_decided.add(d.key)
                self.counters["clone_wins"] += 1
                self.cond.notify_all()
            for b, upd in buf:
                self._commit(wid, d.iteration, b, upd, push=True)
        finally:
            with self.cond:
                self.active_clones -= 1

    # -- driver --------------------------------------------------------------

    def _disruptors(self, stop: threading.Event) -> None:
        cfg = self.cfg.straggler
        sched = self.injector.schedule if hasattr(self.injector, "schedule") else None
        if sched is None or not (cfg.active and cfg.pattern is Pattern.DISRUPTED_MACHINE):
            return
        period = 0
        while not stop.is_set():
            if sched.triggered(period):
                h = spawn_disruptor(cfg.delay_percent, os.cpu_count() or 1, cfg.period_s, "real")
                stop.wait(cfg.period_s)
                h.cancel()
                h.join()
            else:
                stop.wait(cfg.period_s)
            period += 1

    def run(self) -> RunResult:
        self.t0 = time.perf_counter_ns() // 1000
        threads = [threading.Thread(target=self._worker, args=(w,), name=f"worker-{w}", daemon=True)
                   for w in range(self.W)]
        stop = threading.Event()
        disruptor = None
        if self.cfg.cluster.real_disruptors:
            disruptor = threading.Thread(target=self._disruptors, args=(stop,), daemon=True)
            disruptor.start()
        for th in threads:
            th.start()
        for th in threads:
            th.join()
        stop.set()
        if disruptor is not None:
            disruptor.join()
        if self.errors:
            raise self.errors[0]
        T = self._now()
        # pad each worker's last record so every worker spans the same wall time
        for w in range(self.W):
            spent = int(self.acc[w].sum())
            if T > spent:
                self.acc[w, self.E - 1, _WAIT] += T - spent
        self.table.finalize()
        final = self.table.snapshot()
        self.wl.check(final)
        self.counters["dropped"] = sum(r.dropped for r in self.rr)
        records = [
            IterationRecord(w, k, int(self.acc[w, k, 0]), int(self.acc[w, k, 1]), int(self.acc[w, k, 2]))
            for k in range(self.E) for w in range(self.W)
        ]
        return RunResult(records, T, self.coord.max_gap_seen, self.gap_trace, final, self.log,
                         dict(self.counters), self.wl.objective(final))


def run_real(config: ExperimentConfig, workload: Workload, injector=None) -> RunResult:
    return RealCluster(config, workload, injector).run()
