"""Audit workload: item ``i`` adds 1 to key ``i``.

After ``E`` iterations every key equals ``E`` exactly iff each item was
committed exactly once per iteration, whoever processed it.
"""

from __future__ import annotations

import numpy as np

from .base import BlockUpdate, Workload


class ProbeWorkload(Workload):
    name = "probe"

    def __init__(self, size: int):
        self.size = size
        self.capacity = size
        self.dimension = 1

    def process(self, view, lo, hi, iteration) -> BlockUpdate:
        keys = np.arange(lo, hi)
        return BlockUpdate(keys, np.ones((hi - lo, 1)), 0.0)

    def objective(self, table) -> float:
        return float(table.sum())
