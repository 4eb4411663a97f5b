"""Straggler injection and mitigation on a simulated parameter-server cluster."""

from .bench import (
    Benchmark,
    ClockMode,
    ClockSource,
    IncompleteDataError,
    IterationRecord,
    compute_t_iteration,
    compute_t_waste,
    read_records_csv,
    write_records_csv,
)
from .config import ExperimentConfig, load_config
from .consistency import (
    ClockCoordinator,
    DeadlockError,
    Mitigation,
    SyncMode,
    SyncPolicy,
    barrier_wait,
    may_proceed,
)
from .engine import InvariantBreach, RunResult, VirtualCluster, simulate
from .injector import (
    ConfigurationError,
    DelayPlan,
    Pattern,
    StragglerConfig,
    StragglerInjector,
    inject_straggler,
    sample_powerlaw_delay,
    spawn_disruptor,
)
from .mitigation import (
    CommitLog,
    Interval,
    ProgressReport,
    WorkAssignment,
    detect_straggler,
    rr_step,
    shed_work,
    speculative_clone,
)
from .paramserver import ContractViolation, ParameterTable
from .runner import ComparisonReport, RunOutput, build_workload, compare_modes, run_experiment, sweep

__version__ = "0.1.0"
