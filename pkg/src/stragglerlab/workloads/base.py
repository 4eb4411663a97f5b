"""Interface between the ML applications and the cluster engines."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np


class NumericError(ArithmeticError):
    """A non-finite value appeared inside an update."""


class StateCorruptionError(RuntimeError):
    """A model invariant (e.g. non-negative topic counts) was breached."""


@dataclass
class BlockUpdate:
    """Result of processing one contiguous slice of the dataset.

    ``keys``/``deltas`` go to the parameter table via Add; ``local`` carries
    data-side state (e.g. topic assignments) that is only applied if the
    update wins its commit.
    """

    keys: np.ndarray
    deltas: np.ndarray
    loss: float
    local: Any = None


class Workload:
    """An iterative-convergent application driven one item slice at a time.

    ``size`` counts work items (ratings, examples, documents). The table has
    ``capacity`` keys of ``dimension`` floats. ``process`` must be a pure
    function of (view, slice, iteration) apart from reading committed
    data-side state, so that a clone, a helper and the owner compute the
    same update for the same slice.
    """

    name = "workload"
    size: int
    capacity: int
    dimension: int

    def initial_values(self) -> tuple[np.ndarray, np.ndarray] | None:
        return None

    def process(self, view: np.ndarray, lo: int, hi: int, iteration: int) -> BlockUpdate:
        raise NotImplementedError

    def commit_local(self, update: BlockUpdate) -> None:
        pass

    def objective(self, table: np.ndarray) -> float:
        return float("nan")

    def check(self, table: np.ndarray) -> None:
        """Raise StateCorruptionError if the final table breaks an invariant."""
