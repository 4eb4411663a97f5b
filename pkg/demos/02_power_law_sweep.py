"""
Heavy tails
===========

Each (worker, iteration) draws a delay multiplier from a Pareto law with
shape alpha. Smaller alpha means fatter tails: rare but very long delays.
This sweep shows how total run time grows as alpha drops from 11 to 4, per
synchronization mode.
"""

from stragglerlab.config import load_config
from stragglerlab.runner import sweep, with_mode

base = load_config("demos/configs/power_law.toml")
modes = ["bsp", "ssp", "ssp+rr", "bsp+spec"]
results = sweep([with_mode(base, m) for m in modes], "alpha", [11, 7, 4])

wall = {m: [] for m in modes}
for alpha, report in results:
    for out in report.outputs:
        wall[out.mode].append(out.wall_ticks / 1000)

print(f"{'mode':<10}" + "".join(f"{'a=' + str(a):>11}" for a, _ in results) + f"{'11 -> 4':>10}")
for m, w in wall.items():
    print(f"{m:<10}" + "".join(f"{x:>11.0f}" for x in w) + f"{w[-1] / w[0] - 1:>+10.1%}")

# %%
# Bounded staleness absorbs a single long delay as long as the slow worker
# stays within the slack; reassignment additionally hands its tail to a peer.
