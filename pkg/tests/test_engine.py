from collections import defaultdict

import numpy as np
import pytest

from conftest import make_config
from oracles import exactly_once_trial
from stragglerlab.bench import compute_t_waste
from stragglerlab.consistency import DeadlockError
from stragglerlab.engine import InvariantBreach, VirtualCluster, block_bounds, simulate
from stragglerlab.injector import slice_delay
from stragglerlab.runner import build_workload


class ScriptedInjector:
    """Worker ``slow`` is ``extra`` ticks late in every iteration; nothing else."""

    def __init__(self, slow, extra):
        self.slow, self.extra = slow, extra

    def plan(self, worker, iteration, nominal, points):
        return slice_delay(self.extra if worker == self.slow else 0, points)

    def slowdown(self, worker, tick):
        return 1.0

    def block_counts(self, workers, blocks):
        return [len(range(w, blocks, workers)) for w in range(workers)]


def run(cfg, **kw):
    return simulate(cfg, build_workload(cfg), **kw)


def test_block_bounds_cover_dataset():
    b = block_bounds(103, 4, 5)
    assert b[0] == 0 and b[-1] == 103 and len(b) == 21
    assert np.diff(b).min() >= 5
    with pytest.raises(ValueError):
        block_bounds(0, 2, 2)


def test_ideal_run_has_no_waste():
    cfg = make_config(run={"workers": 8, "iterations": 20}, workload={"name": "probe", "size": 160})
    res = run(cfg)
    assert compute_t_waste(res.records) == 0
    assert np.all(res.table == 20)


@pytest.mark.parametrize("mode,flags,pattern", [
    ("bsp", [], "slow_worker"),
    ("ssp", ["reassignment"], "slow_worker"),
    ("ssp", ["speculation"], "disrupted_machine"),
    ("bsp", ["reassignment", "speculation"], "power_law"),
])
def test_accounting_identity(mode, flags, pattern):
    cfg = make_config(run={"workers": 4, "iterations": 8, "seed": 3}, sync={"mode": mode},
                      mitigation={"flags": flags}, straggler={"pattern": pattern},
                      workload={"name": "probe", "size": 80})
    res = run(cfg)
    per_worker = defaultdict(int)
    for r in res.records:
        assert min(r.comp_ticks, r.comm_ticks, r.wait_ticks) >= 0
        per_worker[r.worker_id] += r.wall_ticks
    assert set(per_worker.values()) == {res.wall_ticks}


def test_two_worker_bsp_fixed_lag():
    cfg = make_config(run={"workers": 2, "iterations": 20}, workload={"name": "probe", "size": 40})
    res = run(cfg, injector=ScriptedInjector(1, 100_000))
    fast = sum(r.wait_ticks for r in res.records if r.worker_id == 0)
    slow = sum(r.wait_ticks for r in res.records if r.worker_id == 1)
    assert fast == pytest.approx(2_000_000, rel=0.01)
    assert slow < 0.01 * fast


def test_virtual_runs_are_deterministic():
    cfg = make_config(run={"workers": 4, "iterations": 6, "seed": 5}, sync={"mode": "ssp"},
                      mitigation={"flags": ["reassignment", "speculation"]},
                      straggler={"pattern": "slow_worker"}, cluster={"msg_jitter_us": 800},
                      workload={"name": "lr", "n": 400, "dim": 40})
    a, b = run(cfg), run(cfg)
    assert a.records == b.records
    assert np.array_equal(a.table, b.table)
    assert a.counters == b.counters


@pytest.mark.parametrize("mode,slack", [("bsp", 0), ("ssp", 1), ("ssp", 3)])
def test_staleness_bound_from_trace(mode, slack):
    cfg = make_config(run={"workers": 4, "iterations": 12, "seed": 1}, sync={"mode": mode, "slack": slack},
                      straggler={"pattern": "slow_worker", "probability": 0.5},
                      workload={"name": "probe", "size": 80})
    res = run(cfg)
    gaps = [g for _, g in res.gap_trace]
    assert len(gaps) == 4 * 12
    assert max(gaps) <= slack + 1
    assert res.max_gap <= slack + 1
    if mode == "ssp":
        assert max(gaps) > 1  # slack actually used


def test_exactly_once_randomized_schedules():
    totals = defaultdict(int)
    for seed in range(60):
        problems, counters = exactly_once_trial(seed)
        assert problems == []
        for k, v in counters.items():
            totals[k] += v
    assert totals["sheds"] > 0 and totals["help_blocks"] > 0
    assert totals["clones"] > 0 and totals["clone_wins"] > 0


def test_reassignment_moves_work_off_a_straggler():
    cfg = make_config(run={"workers": 4, "iterations": 6}, sync={"mode": "ssp"},
                      mitigation={"flags": ["reassignment"]}, workload={"name": "probe", "size": 80})
    res = run(cfg, injector=ScriptedInjector(2, 300_000))
    assert res.counters["sheds"] > 0 and res.counters["help_blocks"] > 0
    assert np.all(res.table == 6)


def test_speculation_clones_a_straggler():
    cfg = make_config(run={"workers": 4, "iterations": 6}, sync={"mode": "bsp"},
                      mitigation={"flags": ["speculation"]}, workload={"name": "probe", "size": 80})
    res = run(cfg, injector=ScriptedInjector(2, 300_000))
    assert res.counters["clones"] > 0 and res.counters["clone_wins"] > 0
    assert np.all(res.table == 6)


def test_mitigation_reduces_waste_under_fixed_lag():
    base = dict(run={"workers": 4, "iterations": 10}, workload={"name": "probe", "size": 80})
    waste = {}
    for label, sync, flags in [("bsp", "bsp", []), ("ssp", "ssp", []), ("ssp+rr", "ssp", ["reassignment"])]:
        cfg = make_config(sync={"mode": sync}, mitigation={"flags": flags}, **base)
        waste[label] = compute_t_waste(run(cfg, injector=ScriptedInjector(1, 50_000)).records)
    assert waste["ssp+rr"] < waste["bsp"]


def test_lost_commit_is_an_invariant_breach(monkeypatch):
    cfg = make_config(run={"workers": 2, "iterations": 2}, workload={"name": "probe", "size": 8})
    original = VirtualCluster._commit

    def lossy(self, wid, it, b, upd, push):
        if b == 0:
            return True
        return original(self, wid, it, b, upd, push)

    monkeypatch.setattr(VirtualCluster, "_commit", lossy)
    with pytest.raises(InvariantBreach) as err:
        run(cfg)
    assert err.value.partial_records


def test_stall_is_reported_as_deadlock():
    cfg = make_config(run={"workers": 2, "iterations": 2}, workload={"name": "probe", "size": 8},
                      cluster={"deadlock_ticks": 10})
    with pytest.raises(DeadlockError):
        run(cfg)


def test_objective_trace_per_iteration():
    cfg = make_config(run={"workers": 2, "iterations": 5}, workload={"name": "lr", "n": 200, "dim": 20})
    res = run(cfg, trace_objective=True)
    assert len(res.objective_trace) == 5
    assert res.objective_trace[-1] < res.objective_trace[0]


def test_small_dataset_keeps_blocks_balanced():
    assert len(block_bounds(100, 8, 20)) - 1 == 96
    assert len(block_bounds(5, 8, 20)) - 1 == 5
    cfg = make_config(run={"workers": 8, "iterations": 4}, workload={"name": "probe", "size": 100})
    assert compute_t_waste(run(cfg).records) == 0
