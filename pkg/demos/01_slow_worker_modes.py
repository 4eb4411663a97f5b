"""
Who waits for whom
==================

Eight workers train a matrix factorization model while a transient slow
worker pattern makes 30% of (worker, iteration) pairs up to twice as long.
We run the same schedule under four synchronization modes and look at how
much time the cluster spends blocked.

Run with ``python demos/01_slow_worker_modes.py``; everything happens in
virtual time, so the numbers are identical on every machine.
"""

import numpy as np

from stragglerlab.config import load_config
from stragglerlab.runner import compare_modes, with_mode

base = load_config("demos/configs/mf_slow_worker.toml")
modes = ["bsp", "ssp", "ssp+rr", "ssp+rr+spec"]
report = compare_modes([with_mode(base, m) for m in modes])

# one row per mode: average iteration time, total waste, and the change vs BSP
print(f"{'mode':<14}{'avg iter ms':>12}{'waste ms':>12}{'vs bsp':>9}")
for row in report.rows:
    print(f"{row['mode']:<14}{row['avg_iter_ms']:>12}{row['total_waste_ms']:>12}{row['pct_vs_bsp_waste']:>8}%")

# %%
# Where does the waste go? Under BSP every straggler holds up all other
# workers at the barrier, so waste is spread across the whole cluster.
bsp = report.output("bsp")
per_worker = np.zeros(base.run.workers)
for r in bsp.records:
    per_worker[r.worker_id] += r.wait_ticks / 1000
print("\nBSP waste per worker (ms):", np.round(per_worker).astype(int))

# %%
# With reassignment, fast workers pull blocks off the tail of a slow
# worker's range instead of idling. The counters show how much moved.
rr = report.output("ssp+rr").result.counters
print("ssp+rr: sheds", rr["sheds"], "blocks helped", rr["help_blocks"], "cancels", rr["cancels"])
