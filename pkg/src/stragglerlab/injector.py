"""Straggler injection: the five patterns, delay slicing and disruptors.

Every random decision is drawn from a generator keyed by
``(seed, stream, worker, iteration)`` so concurrent workers never share RNG
state and a run replays bit-identically under the same seed.
"""

from __future__ import annotations

import enum
import math
import threading
import time
from dataclasses import dataclass, field

import numpy as np


class ConfigurationError(ValueError):
    """Invalid straggler or run configuration."""


class Pattern(str, enum.Enum):
    SLOW_WORKER = "slow_worker"
    DISRUPTED_MACHINE = "disrupted_machine"
    POWER_LAW = "power_law"
    PERSISTENT = "persistent"
    IDEAL = "ideal"


TRANSIENT_PATTERNS = frozenset({Pattern.SLOW_WORKER, Pattern.DISRUPTED_MACHINE, Pattern.POWER_LAW})

# stream ids for keyed generators
_TRIGGER, _MAGNITUDE, _DISRUPT = 1, 2, 3
_MASK64 = (1 << 64) - 1


def keyed_rng(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for one (seed, stream, ...) key."""
    words = [seed & _MASK64] + [(k + (1 << 32)) & _MASK64 for k in key]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(words)))


@dataclass(frozen=True)
class StragglerConfig:
    pattern: Pattern = Pattern.IDEAL
    enabled: bool = True
    delay_percent: float = 100.0
    probability: float = 0.3
    period_s: float = 0.5
    alpha: float = 4.0
    persistent_workers: frozenset[int] = field(default_factory=frozenset)
    persistent_load_factor: float = 0.75
    seed: int = 0
    cap_multiplier: float = 10.0
    # "uniform": triggered delay ~ U[0, 2 x delay_percent/100 x nominal];
    # "fixed": exactly delay_percent/100 x nominal
    delay_distribution: str = "uniform"

    def __post_init__(self):
        try:
            object.__setattr__(self, "pattern", Pattern(self.pattern))
        except ValueError:
            raise ConfigurationError(f"unknown straggler pattern {self.pattern!r}") from None
        object.__setattr__(self, "persistent_workers", frozenset(int(w) for w in self.persistent_workers))
        if self.delay_percent < 0:
            raise ConfigurationError("delay_percent must be >= 0")
        if not 0.0 <= self.probability <= 1.0:
            raise ConfigurationError("probability must lie in [0, 1]")
        if self.period_s <= 0:
            raise ConfigurationError("period_s must be positive")
        if self.pattern is Pattern.POWER_LAW and self.alpha <= 1:
            raise ConfigurationError("power-law alpha must exceed 1 (finite mean)")
        if not 0.0 < self.persistent_load_factor <= 1.0:
            raise ConfigurationError("persistent_load_factor must lie in (0, 1]")
        if self.cap_multiplier <= 0:
            raise ConfigurationError("cap_multiplier must be positive")
        if self.delay_distribution not in ("uniform", "fixed"):
            raise ConfigurationError("delay_distribution must be 'uniform' or 'fixed'")

    @property
    def active(self) -> bool:
        return self.enabled and self.pattern is not Pattern.IDEAL


@dataclass(frozen=True)
class DelayPlan:
    total_delay: int
    points: tuple[int, ...]

    @property
    def num_delay_points(self) -> int:
        return len(self.points)

    @property
    def per_point_delay(self) -> int:
        return self.points[0]

    def at(self, index: int) -> int:
        return self.points[index]


def slice_delay(total_delay: int, num_delay_points: int) -> DelayPlan:
    """Split a delay evenly over delay points; the remainder goes to the last one."""
    if num_delay_points < 1:
        raise ValueError("need at least one delay point")
    if total_delay < 0:
        raise ValueError("delay must be non-negative")
    base = total_delay // num_delay_points
    points = [base] * (num_delay_points - 1) + [total_delay - base * (num_delay_points - 1)]
    return DelayPlan(total_delay, tuple(points))


def zero_plan(num_delay_points: int = 1) -> DelayPlan:
    return slice_delay(0, num_delay_points)


def check_permanent_straggler(worker: int, config: StragglerConfig) -> bool:
    return config.pattern is Pattern.PERSISTENT and worker in config.persistent_workers


def check_transient_straggler(worker: int, iteration: int, config: StragglerConfig) -> bool:
    """Bernoulli(probability) draw keyed by (seed, worker, iteration)."""
    if not config.enabled or config.pattern not in TRANSIENT_PATTERNS:
        return False
    if config.probability <= 0.0:
        return False
    if config.probability >= 1.0:
        return True
    return bool(keyed_rng(config.seed, _TRIGGER, worker, iteration).random() < config.probability)


def pareto_multiplier(alpha: float, u):
    """Inverse-CDF Pareto(shape alpha, scale 1) draw for uniform ``u`` in (0, 1]."""
    return np.power(u, -1.0 / alpha)


def sample_powerlaw_delay(
    alpha: float,
    nominal_iter_time: int,
    rng_key: np.random.Generator | float,
    cap_multiplier: float = 10.0,
) -> int:
    """Heavy-tailed extra time ``(m - 1) * nominal`` with ``m ~ Pareto(alpha)``.

    ``rng_key`` is either a generator or an explicit uniform draw in (0, 1].
    """
    if alpha <= 1:
        raise ConfigurationError("power-law alpha must exceed 1 (finite mean)")
    if isinstance(rng_key, np.random.Generator):
        u = 1.0 - rng_key.random()
    else:
        u = float(rng_key)
        if not 0.0 < u <= 1.0:
            raise ValueError("u must lie in (0, 1]")
    extra = min(float(pareto_multiplier(alpha, u)) - 1.0, cap_multiplier)
    return int(round(extra * nominal_iter_time))


def inject_straggler(
    worker: int,
    iteration: int,
    nominal_iter_time: int,
    config: StragglerConfig,
    num_delay_points: int = 1,
) -> DelayPlan:
    """Delay plan for one worker-iteration under the configured pattern.

    Disrupted-machine and persistent patterns are realised elsewhere (CPU
    slowdown and unbalanced assignment respectively), so they, like IDEAL,
    yield the zero plan here.
    """
    if not config.active or config.pattern in (Pattern.DISRUPTED_MACHINE, Pattern.PERSISTENT):
        return zero_plan(num_delay_points)
    if not check_transient_straggler(worker, iteration, config):
        return zero_plan(num_delay_points)
    rng = keyed_rng(config.seed, _MAGNITUDE, worker, iteration)
    if config.pattern is Pattern.SLOW_WORKER:
        level = config.delay_percent / 100.0
        if config.delay_distribution == "fixed":
            total = level * nominal_iter_time
        else:
            total = rng.uniform(0.0, 2.0 * level * nominal_iter_time)
        total = int(round(min(total, config.cap_multiplier * nominal_iter_time)))
    else:
        total = sample_powerlaw_delay(config.alpha, nominal_iter_time, rng, config.cap_multiplier)
    return slice_delay(total, num_delay_points)


def persistent_assignment(workers: int, base_items: int, config: StragglerConfig) -> list[int]:
    """Per-worker item counts under the persistent pattern.

    Non-stragglers get ``round(base_items * factor)`` items and the
    stragglers share what is left, so the total is conserved.
    """
    stragglers = sorted(w for w in config.persistent_workers if 0 <= w < workers)
    if not stragglers:
        raise ConfigurationError("persistent pattern needs at least one straggler worker")
    if len(stragglers) == workers:
        return [base_items] * workers
    light = int(math.floor(base_items * config.persistent_load_factor + 0.5))
    counts = [base_items if w in config.persistent_workers else light for w in range(workers)]
    spare = (base_items - light) * (workers - len(stragglers))
    share, rem = divmod(spare, len(stragglers))
    for i, w in enumerate(stragglers):
        counts[w] += share + (1 if i < rem else 0)
    return counts


def persistent_assignment_scale(worker: int, base_items: int, config: StragglerConfig, workers: int) -> int:
    if config.pattern is not Pattern.PERSISTENT:
        raise ConfigurationError("persistent_assignment_scale requires the persistent pattern")
    return persistent_assignment(workers, base_items, config)[worker]


# -- disrupted machine ------------------------------------------------------


def disruptor_thread_count(intensity_percent: float, cores: int) -> int:
    if intensity_percent <= 0 or cores < 1:
        raise ValueError("intensity and cores must be positive")
    return int(math.floor(intensity_percent / 100.0 * cores + 0.5))


class DisruptorHandle:
    """Busy-loop threads contending for CPU until ``duration_s`` elapses or cancel()."""

    def __init__(self, threads: int, duration_s: float):
        self.thread_count = threads
        self._stop = threading.Event()
        self._deadline = time.monotonic() + duration_s
        self._threads = [threading.Thread(target=self._spin, daemon=True) for _ in range(threads)]
        for t in self._threads:
            t.start()

    def _spin(self) -> None:
        x = 0
        while not self._stop.is_set() and time.monotonic() < self._deadline:
            for _ in range(2000):
                x = (x * 1103515245 + 12345) & 0x7FFFFFFF

    def cancel(self) -> None:
        self._stop.set()

    def join(self, timeout: float | None = None) -> None:
        for t in self._threads:
            t.join(timeout)

    @property
    def alive(self) -> bool:
        return any(t.is_alive() for t in self._threads)


def spawn_disruptor(intensity_percent: float, cores: int, duration_s: float, clock_mode: str = "real") -> DisruptorHandle:
    if str(getattr(clock_mode, "value", clock_mode)) != "real":
        raise ConfigurationError("disruptor threads only run under the real clock; virtual runs model the slowdown")
    return DisruptorHandle(disruptor_thread_count(intensity_percent, cores), duration_s)


class DisruptionSchedule:
    """Virtual-time model of the disrupted-machine pattern.

    Time is cut into periods of ``period_s``; each period is disrupted with
    the configured probability and the disruption hits machine
    ``period % machines``. Workers on a disrupted machine compute
    ``1 + delay_percent/100`` times slower during that period.
    """

    def __init__(self, config: StragglerConfig, machines: int):
        self.config = config
        self.machines = max(1, machines)
        self.period_ticks = max(1, int(round(config.period_s * 1_000_000)))
        self.factor = 1.0 + config.delay_percent / 100.0
        self._cache: dict[int, bool] = {}

    def triggered(self, period: int) -> bool:
        hit = self._cache.get(period)
        if hit is None:
            p = self.config.probability
            hit = p >= 1.0 or (p > 0 and keyed_rng(self.config.seed, _DISRUPT, period).random() < p)
            self._cache[period] = hit
        return hit

    def disrupted_machine(self, tick: int) -> int | None:
        if not (self.config.active and self.config.pattern is Pattern.DISRUPTED_MACHINE):
            return None
        period = tick // self.period_ticks
        return period % self.machines if self.triggered(period) else None

    def slowdown(self, machine: int, tick: int) -> float:
        return self.factor if self.disrupted_machine(tick) == machine else 1.0


class StragglerInjector:
    """Everything an engine asks of the straggler model, in one object.

    Engines only call :meth:`plan`, :meth:`slowdown` and
    :meth:`block_counts`, so tests can substitute a scripted injector.
    """

    def __init__(self, config: StragglerConfig, workers: int, workers_per_machine: int = 1):
        self.config = config
        self.workers = workers
        self.workers_per_machine = max(1, workers_per_machine)
        self.schedule = DisruptionSchedule(config, -(-workers // self.workers_per_machine))

    def machine_of(self, worker: int) -> int:
        return worker // self.workers_per_machine

    def plan(self, worker: int, iteration: int, nominal: int, points: int) -> DelayPlan:
        return inject_straggler(worker, iteration, nominal, self.config, points)

    def slowdown(self, worker: int, tick: int) -> float:
        return self.schedule.slowdown(self.machine_of(worker), tick)

    def block_counts(self, workers: int, blocks: int) -> list[int]:
        base, rem = divmod(blocks, workers)
        if self.config.active and self.config.pattern is Pattern.PERSISTENT:
            counts = persistent_assignment(workers, base, self.config)
        else:
            counts = [base] * workers
        for w in range(rem):
            counts[w] += 1
        return counts
