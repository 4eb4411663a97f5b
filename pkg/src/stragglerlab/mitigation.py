"""Straggler mitigation: rapid work reassignment and speculative cloning.

Reassignment is a peer-to-peer protocol. A worker that sees itself behind
the median progress of its peers offers the tail of its remaining range
(HELP_REQUEST); a free peer claims it (HELP_ACK) and works on it from the
end backwards while the straggler keeps going from the front. The helper
reports WORK_DONE; if the straggler reaches the tail first it sends CANCEL.

Exactly-once processing does not depend on message timing: every unit of
work is committed through a :class:`CommitLog` keyed by ``(iteration,
index)``, and a second claim for the same key is refused.
"""

from __future__ import annotations

import enum
import statistics
from dataclasses import dataclass, replace
from typing import Iterable, Mapping, Sequence


class ProtocolError(ValueError):
    """Malformed reassignment message or illegal protocol transition."""


@dataclass(frozen=True, order=True)
class Interval:
    lo: int
    hi: int

    def __len__(self) -> int:
        return max(0, self.hi - self.lo)

    @property
    def empty(self) -> bool:
        return self.hi <= self.lo

    def __contains__(self, index: int) -> bool:
        return self.lo <= index < self.hi

    def indices(self) -> range:
        return range(self.lo, self.hi)


@dataclass(frozen=True)
class ProgressReport:
    worker_id: int
    iteration: int
    fraction_done: float
    timestamp: int = 0

    def relative_to(self, iteration: int) -> float:
        """This worker's progress expressed in ``iteration``'s terms."""
        if self.iteration > iteration:
            return 1.0
        if self.iteration < iteration:
            return 0.0
        return self.fraction_done


@dataclass(frozen=True)
class WorkAssignment:
    iteration: int
    ranges: Mapping[int, tuple[Interval, ...]]

    @classmethod
    def from_counts(cls, counts: Sequence[int], iteration: int = 0) -> "WorkAssignment":
        ranges, lo = {}, 0
        for w, n in enumerate(counts):
            ranges[w] = (Interval(lo, lo + n),) if n > 0 else ()
            lo += n
        return cls(iteration, ranges)

    @classmethod
    def even(cls, workers: int, size: int, iteration: int = 0) -> "WorkAssignment":
        base, rem = divmod(size, workers)
        return cls.from_counts([base + (1 if w < rem else 0) for w in range(workers)], iteration)

    @property
    def size(self) -> int:
        return sum(len(iv) for ivs in self.ranges.values() for iv in ivs)

    def validate(self, size: int) -> None:
        """Ranges must be disjoint and cover [0, size) exactly."""
        ivs = sorted(iv for ivs in self.ranges.values() for iv in ivs if not iv.empty)
        cursor = 0
        for iv in ivs:
            if iv.lo != cursor:
                raise ProtocolError(f"assignment gap or overlap at {cursor}: {iv}")
            cursor = iv.hi
        if cursor != size:
            raise ProtocolError(f"assignment covers [0, {cursor}) instead of [0, {size})")

    def owner(self, index: int) -> int:
        for w, ivs in self.ranges.items():
            if any(index in iv for iv in ivs):
                return w
        raise KeyError(index)


class MsgKind(str, enum.Enum):
    HELP_REQUEST = "help_request"
    HELP_ACK = "help_ack"
    WORK_DONE = "work_done"
    CANCEL = "cancel"


@dataclass(frozen=True)
class ReassignmentMsg:
    kind: MsgKind
    src: int
    dst: int | None
    interval: Interval
    iteration: int


def detect_straggler(self_report: ProgressReport, peers: Iterable[ProgressReport], threshold: float) -> bool:
    """True iff the median peer progress leads ours by more than ``threshold``."""
    fractions = [p.relative_to(self_report.iteration) for p in peers]
    if not fractions:
        return False
    return statistics.median(fractions) - self_report.fraction_done > threshold


def shed_work(
    straggler: int,
    helper: int,
    assignment: WorkAssignment,
    shed_fraction: float,
    front: int | None = None,
) -> tuple[WorkAssignment, list[ReassignmentMsg]]:
    """Move the tail ``shed_fraction`` of the straggler's remaining range to ``helper``.

    ``front`` is the straggler's next unprocessed index; by default its whole
    last range counts as remaining. The move is for this iteration only.
    Returns the assignment unchanged and no message when there is nothing
    whole to shed.
    """
    if not 0.0 < shed_fraction <= 0.5:
        raise ValueError("shed_fraction must lie in (0, 0.5]")
    if straggler == helper:
        raise ProtocolError("a worker cannot shed work to itself")
    own = list(assignment.ranges.get(straggler, ()))
    if not own:
        return assignment, []
    last = own[-1]
    start = last.lo if front is None else max(front, last.lo)
    remaining = Interval(start, last.hi)
    count = int(len(remaining) * shed_fraction)
    if count < 1:
        return assignment, []
    tail = Interval(remaining.hi - count, remaining.hi)
    kept = Interval(last.lo, tail.lo)
    ranges = dict(assignment.ranges)
    ranges[straggler] = tuple(own[:-1]) + ((kept,) if not kept.empty else ())
    ranges[helper] = tuple(ranges.get(helper, ())) + (tail,)
    msg = ReassignmentMsg(MsgKind.HELP_REQUEST, straggler, helper, tail, assignment.iteration)
    return WorkAssignment(assignment.iteration, ranges), [msg]


@dataclass(frozen=True)
class RRState:
    """Per-worker protocol state, covering both the straggler and helper roles."""

    worker: int
    size: int
    iteration: int = 0
    requested: Interval | None = None  # tail currently offered / reserved
    request_to: int | None = None  # None means broadcast
    acked_by: int | None = None
    helping: tuple[int, int, Interval] | None = None  # (straggler, iteration, interval)
    finished: frozenset[tuple[int, Interval]] = frozenset()
    cancelled: frozenset[tuple[int, int, Interval]] = frozenset()
    dropped: int = 0

    @property
    def offer_active(self) -> bool:
        return self.requested is not None


def _malformed(state: RRState, iv: Interval) -> bool:
    return iv.empty or iv.lo < 0 or iv.hi > state.size


def rr_step(state: RRState, msg: ReassignmentMsg) -> tuple[RRState, list[ReassignmentMsg]]:
    """Apply one incoming message; returns the new state and outgoing messages.

    Duplicate and stale messages leave the state unchanged. A malformed
    interval is dropped and counted in ``state.dropped``.
    """
    if msg.dst is not None and msg.dst != state.worker:
        raise ProtocolError(f"message for {msg.dst} delivered to {state.worker}")
    if _malformed(state, msg.interval):
        return replace(state, dropped=state.dropped + 1), []
    me, iv, it = state.worker, msg.interval, msg.iteration

    if msg.kind is MsgKind.HELP_REQUEST:
        key = (msg.src, it, iv)
        if key in state.cancelled or state.helping is not None:
            return state, []
        ack = ReassignmentMsg(MsgKind.HELP_ACK, me, msg.src, iv, it)
        return replace(state, helping=key), [ack]

    if msg.kind is MsgKind.HELP_ACK:
        live = state.requested == iv and state.iteration == it
        if live and state.acked_by is None and state.request_to in (None, msg.src):
            return replace(state, acked_by=msg.src), []
        if live and state.acked_by == msg.src:
            return state, []
        return state, [ReassignmentMsg(MsgKind.CANCEL, me, msg.src, iv, it)]

    if msg.kind is MsgKind.WORK_DONE:
        live = state.requested == iv and state.iteration == it
        if live and msg.src in (state.acked_by, state.request_to):
            return replace(
                state,
                requested=None,
                request_to=None,
                acked_by=None,
                finished=state.finished | {(it, iv)},
            ), []
        return state, []

    if msg.kind is MsgKind.CANCEL:
        key = (msg.src, it, iv)
        helping = None if state.helping == key else state.helping
        return replace(state, helping=helping, cancelled=state.cancelled | {key}), []

    raise ProtocolError(f"unknown message kind {msg.kind!r}")


def begin_iteration(state: RRState, iteration: int) -> RRState:
    return replace(state, iteration=iteration, requested=None, request_to=None, acked_by=None)


def offer_tail(state: RRState, tail: Interval, target: int | None) -> tuple[RRState, list[ReassignmentMsg]]:
    """Straggler side: reserve ``tail`` and send HELP_REQUEST."""
    if state.requested is not None:
        raise ProtocolError("an offer is already outstanding")
    if _malformed(state, tail):
        raise ProtocolError(f"malformed tail {tail}")
    msg = ReassignmentMsg(MsgKind.HELP_REQUEST, state.worker, target, tail, state.iteration)
    return replace(state, requested=tail, request_to=target, acked_by=None), [msg]


def absorb_tail(state: RRState) -> tuple[RRState, list[ReassignmentMsg]]:
    """Straggler side: it finished the offered tail itself; cancel the helper."""
    if state.requested is None:
        return state, []
    iv, it = state.requested, state.iteration
    target = state.acked_by if state.acked_by is not None else state.request_to
    out = [ReassignmentMsg(MsgKind.CANCEL, state.worker, target, iv, it)] if target is not None else []
    return replace(
        state, requested=None, request_to=None, acked_by=None, finished=state.finished | {(it, iv)}
    ), out


def finish_help(state: RRState) -> tuple[RRState, list[ReassignmentMsg]]:
    """Helper side: the claimed interval is processed; report WORK_DONE."""
    if state.helping is None:
        return state, []
    straggler, it, iv = state.helping
    done = ReassignmentMsg(MsgKind.WORK_DONE, state.worker, straggler, iv, it)
    return replace(state, helping=None), [done]


# -- speculative cloning ------------------------------------------------------


@dataclass(frozen=True)
class ClonePolicy:
    lag_threshold: float = 0.25
    max_clones: int = 2


@dataclass(frozen=True)
class CloneDecision:
    worker: int
    interval: Interval
    iteration: int
    clone_target: int
    winner: int | None = None

    @property
    def key(self) -> tuple[int, int, Interval]:
        return (self.iteration, self.worker, self.interval)


def speculative_clone(
    reports: Sequence[ProgressReport],
    idle: Iterable[int],
    policy: ClonePolicy,
    remaining: Mapping[int, Interval],
    already_cloned: Iterable[int] = (),
    active: int = 0,
) -> list[CloneDecision]:
    """Clone the remaining work of the most-lagging workers onto idle workers.

    A worker lags when the median progress of all other reporters, taken in
    its iteration's terms, exceeds its own by more than the lag threshold.
    At most ``policy.max_clones - active`` clones are launched.
    """
    free = sorted(set(idle))
    budget = policy.max_clones - active
    if not free or budget <= 0:
        return []
    skip = set(already_cloned)
    laggards = []
    for r in reports:
        if r.worker_id in skip or r.worker_id in free:
            continue
        iv = remaining.get(r.worker_id)
        if iv is None or iv.empty:
            continue
        others = [o.relative_to(r.iteration) for o in reports if o.worker_id != r.worker_id]
        if others and statistics.median(others) - r.fraction_done > policy.lag_threshold:
            laggards.append(r)
    laggards.sort(key=lambda r: (r.iteration, r.fraction_done, r.worker_id))
    out = []
    for r, target in zip(laggards[:budget], free):
        out.append(CloneDecision(r.worker_id, remaining[r.worker_id], r.iteration, target))
    return out


class CloneArbiter:
    """First finisher of a cloned interval wins; later finishers are told they lost."""

    def __init__(self):
        self.winners: dict[tuple, int] = {}

    def finish(self, decision: CloneDecision, finisher: int) -> bool:
        key = decision.key
        if key in self.winners:
            return False
        self.winners[key] = finisher
        return True

    def winner(self, decision: CloneDecision) -> int | None:
        return self.winners.get(decision.key)


class CommitLog:
    """Exactly-once gate: one successful claim per (iteration, index)."""

    def __init__(self):
        self.owners: dict[int, dict[int, int]] = {}
        self.refused = 0

    def claim(self, iteration: int, index: int, worker: int) -> bool:
        row = self.owners.setdefault(iteration, {})
        if index in row:
            self.refused += 1
            return False
        row[index] = worker
        return True

    def claimed(self, iteration: int, index: int) -> bool:
        return index in self.owners.get(iteration, {})

    def committed(self, iteration: int) -> set[int]:
        return set(self.owners.get(iteration, {}))

    def missing(self, iteration: int, size: int) -> list[int]:
        row = self.owners.get(iteration, {})
        return [i for i in range(size) if i not in row]
