import threading

import pytest
from hypothesis import given
from hypothesis import strategies as st

from stragglerlab.consistency import (
    ClockCoordinator,
    DeadlockError,
    Mitigation,
    SyncMode,
    SyncPolicy,
    may_proceed,
    staleness_ok,
)


def test_may_proceed_examples():
    assert may_proceed(3, 3, SyncPolicy.bsp())
    assert not may_proceed(4, 3, SyncPolicy.bsp())
    assert may_proceed(5, 2, SyncPolicy.ssp(3))
    assert not may_proceed(6, 2, SyncPolicy.ssp(3))


def test_may_proceed_enumeration():
    for slack in range(7):
        policy = SyncPolicy.ssp(slack)
        for low in range(7):
            for clock in range(low, 7):
                assert may_proceed(clock, low, policy) == (clock - low <= slack)


def test_policy_validation_and_labels():
    with pytest.raises(ValueError):
        SyncPolicy(SyncMode.BSP, 2)
    with pytest.raises(ValueError):
        SyncPolicy.ssp(-1)
    assert SyncPolicy.ssp(3, "reassignment").label == "ssp+rr"
    assert SyncPolicy.bsp(Mitigation.SPECULATION).label == "bsp+spec"
    assert SyncPolicy.ssp(2, "reassignment", "speculation").label == "ssp+rr+spec"


def _admission_trace(policy, schedule, workers=3, limit=6):
    coord = ClockCoordinator(workers, policy)
    trace = []
    for w in schedule:
        ok = coord.admitted(w) and coord.clock_of(w) < limit
        trace.append(ok)
        if ok:
            coord.advance(w)
    return trace, coord


@given(st.lists(st.integers(0, 2), max_size=60))
def test_ssp_zero_equals_bsp(schedule):
    assert _admission_trace(SyncPolicy.ssp(0), schedule)[0] == _admission_trace(SyncPolicy.bsp(), schedule)[0]


@given(st.integers(0, 4), st.lists(st.integers(0, 3), max_size=80))
def test_slack_bound_holds_on_any_schedule(slack, schedule):
    _, coord = _admission_trace(SyncPolicy.ssp(slack), schedule, workers=4, limit=20)
    assert coord.max_gap_seen <= slack + 1
    assert staleness_ok(coord.view().clocks, SyncPolicy.ssp(slack))


def test_one_behind_never_waits_under_slack_three():
    coord = ClockCoordinator(2, SyncPolicy.ssp(3))
    # worker 1 lags; worker 0 runs ahead until the gap would exceed 3
    for k in range(3):
        coord.advance(0)
        assert coord.admitted(0)
    coord.advance(0)
    assert not coord.admitted(0)  # gap 4 > 3
    coord.advance(1)
    assert coord.admitted(0)


def test_barrier_wait_returns_blocked_ticks():
    ticks = [0]
    coord = ClockCoordinator(2, SyncPolicy.bsp(), now=lambda: ticks[0], timeout_s=5)
    coord.advance(0)
    got = []
    th = threading.Thread(target=lambda: got.append(coord.barrier_wait(0)))
    th.start()
    th.join(0.1)
    ticks[0] = 1500
    coord.advance(1)
    th.join(5)
    assert got == [1500]


def test_barrier_wait_deadlock_guard():
    coord = ClockCoordinator(2, SyncPolicy.bsp(), timeout_s=0.05)
    coord.advance(0)
    with pytest.raises(DeadlockError):
        coord.barrier_wait(0)


def test_on_advance_hooks():
    coord = ClockCoordinator(2, SyncPolicy.ssp(1))
    seen = []
    coord.on_advance.append(lambda w, c: seen.append((w, c)))
    coord.advance(1)
    coord.advance(1)
    assert seen == [(1, 1), (1, 2)]
