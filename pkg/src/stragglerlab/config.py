"""Experiment configuration: TOML in, fully resolved dataclasses out.

Unknown sections or keys are rejected so that typos in sweep files fail
loudly instead of silently falling back to defaults.
"""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .consistency import Mitigation, SyncMode, SyncPolicy
from .injector import ConfigurationError, Pattern, StragglerConfig

DEFAULT_SSP_SLACK = 3

WORKLOAD_KEYS = {
    "mf": {"rows": 1000, "cols": 1000, "rank": 10, "density": 0.05, "noise": 0.1,
           "step": 0.005, "reg": 0.05, "init_scale": 0.1},
    "lr": {"n": 50_000, "dim": 1000, "margin": 1.0, "nnz": 10, "step": 0.1},
    "lda": {"docs": 2000, "doc_len": 100, "vocab": 5000, "topics": 10,
            "alpha_prior": 0.1, "beta_prior": 0.01, "chunk": 1},
    "probe": {"size": 100},
}


@dataclass(frozen=True)
class RunSection:
    run_id: str = "run"
    workers: int = 8
    iterations: int = 20
    seed: int = 0
    clock: str = "virtual"


@dataclass(frozen=True)
class MitigationSettings:
    flags: tuple[str, ...] = ()
    detect_threshold: float = 0.25
    shed_fraction: float = 0.25
    progress_broadcast_interval: float = 0.1
    clone_lag_threshold: float = 0.25
    max_clones: int = 2


@dataclass(frozen=True)
class ClusterSection:
    """Cost model and plumbing shared by both clock modes."""

    shards: int = 0  # 0 means one shard per worker
    workers_per_machine: int = 2
    iter_compute_ms: float = 100.0  # nominal compute per iteration for a balanced worker
    item_cost_us: float = 0.0  # 0 means derived from iter_compute_ms
    blocks_per_worker: int = 20
    block_size: int = 0  # 0 means derived from blocks_per_worker
    get_ms: float = 2.0
    flush_ms: float = 2.0
    msg_latency_us: int = 100
    msg_jitter_us: int = 0
    canonical_order: bool = False
    deadlock_ticks: int = 1_000_000
    deadlock_timeout_s: float = 30.0
    real_disruptors: bool = False  # real clock: also spawn busy-loop threads during disruptions


@dataclass(frozen=True)
class WorkloadSection:
    name: str = "mf"
    seed: int | None = None
    params: Mapping[str, Any] = field(default_factory=dict)

    def resolved(self) -> dict[str, Any]:
        out = dict(WORKLOAD_KEYS[self.name])
        out.update(self.params)
        return out


@dataclass(frozen=True)
class ExperimentConfig:
    run: RunSection = RunSection()
    sync: SyncPolicy = SyncPolicy()
    mitigation: MitigationSettings = MitigationSettings()
    straggler: StragglerConfig = StragglerConfig()
    workload: WorkloadSection = WorkloadSection()
    cluster: ClusterSection = ClusterSection()

    @property
    def mode_label(self) -> str:
        return self.sync.label

    @property
    def pattern_label(self) -> str:
        s = self.straggler
        return s.pattern.value if s.enabled else Pattern.IDEAL.value

    @property
    def workload_seed(self) -> int:
        return self.run.seed if self.workload.seed is None else self.workload.seed

    def replace(self, **sections) -> "ExperimentConfig":
        return dataclasses.replace(self, **sections)

    def with_mode(self, mode: str, slack: int | None = None, flags=()) -> "ExperimentConfig":
        m = SyncMode(mode)
        if m is SyncMode.BSP:
            policy = SyncPolicy(m, 0, frozenset(flags))
        else:
            policy = SyncPolicy(m, DEFAULT_SSP_SLACK if slack is None else slack, frozenset(flags))
        return self.replace(sync=policy, mitigation=dataclasses.replace(self.mitigation, flags=tuple(sorted(
            Mitigation(f).value for f in flags))))

    def with_seed(self, seed: int) -> "ExperimentConfig":
        run = dataclasses.replace(self.run, seed=seed)
        straggler = dataclasses.replace(self.straggler, seed=seed)
        return self.replace(run=run, straggler=straggler)

    def validate(self) -> None:
        r, c, m = self.run, self.cluster, self.mitigation
        if r.workers < 1 or r.iterations < 1:
            raise ConfigurationError("workers and iterations must be positive")
        if r.clock not in ("real", "virtual"):
            raise ConfigurationError("clock must be 'real' or 'virtual'")
        if self.sync.slack > r.iterations:
            raise ConfigurationError("slack cannot exceed the iteration count")
        if c.workers_per_machine < 1 or c.blocks_per_worker < 1:
            raise ConfigurationError("workers_per_machine and blocks_per_worker must be positive")
        if min(c.iter_compute_ms, c.get_ms, c.flush_ms) < 0 or c.item_cost_us < 0:
            raise ConfigurationError("costs must be non-negative")
        if c.block_size < 0 or c.shards < 0 or c.msg_latency_us < 0 or c.msg_jitter_us < 0:
            raise ConfigurationError("cluster sizes and latencies must be non-negative")
        if not 0 < m.detect_threshold < 1:
            raise ConfigurationError("detect_threshold must lie in (0, 1)")
        if not 0 < m.shed_fraction <= 0.5:
            raise ConfigurationError("shed_fraction must lie in (0, 0.5]")
        if not 0 < m.progress_broadcast_interval <= 1:
            raise ConfigurationError("progress_broadcast_interval must lie in (0, 1]")
        if not 0 < m.clone_lag_threshold < 1 or m.max_clones < 1:
            raise ConfigurationError("clone_lag_threshold must lie in (0, 1) and max_clones >= 1")
        if self.workload.name not in WORKLOAD_KEYS:
            raise ConfigurationError(f"unknown workload {self.workload.name!r}")
        s = self.straggler
        if s.enabled and s.pattern is Pattern.PERSISTENT:
            if not s.persistent_workers:
                raise ConfigurationError("persistent pattern needs persistent_workers")
            if max(s.persistent_workers) >= r.workers or min(s.persistent_workers) < 0:
                raise ConfigurationError("persistent_workers outside worker range")


# -- parsing ---------------------------------------------------------------

_SECTIONS = ("run", "sync", "mitigation", "straggler", "workload", "cluster")


def _take(section: str, raw: Mapping[str, Any], allowed: set[str]) -> dict[str, Any]:
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigurationError(f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}")
    return dict(raw)


def _fields(cls) -> set[str]:
    return {f.name for f in dataclasses.fields(cls)}


def _coerce(cls, section: str, values: dict[str, Any]):
    out = {}
    for f in dataclasses.fields(cls):
        if f.name not in values:
            continue
        v = values[f.name]
        default = f.default if f.default is not dataclasses.MISSING else None
        if isinstance(default, bool):
            if not isinstance(v, bool):
                raise ConfigurationError(f"[{section}] {f.name} must be a boolean")
        elif isinstance(default, int) and not isinstance(default, bool):
            if isinstance(v, bool) or not isinstance(v, int):
                raise ConfigurationError(f"[{section}] {f.name} must be an integer")
        elif isinstance(default, float):
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigurationError(f"[{section}] {f.name} must be a number")
            v = float(v)
        elif isinstance(default, str) and not isinstance(v, str):
            raise ConfigurationError(f"[{section}] {f.name} must be a string")
        out[f.name] = v
    return out


def from_dict(data: Mapping[str, Any]) -> ExperimentConfig:
    unknown = set(data) - set(_SECTIONS)
    if unknown:
        raise ConfigurationError(f"unknown section(s): {', '.join(sorted(unknown))}")
    try:
        run_raw = _take("run", data.get("run", {}), _fields(RunSection))
        run = RunSection(**_coerce(RunSection, "run", run_raw))

        sync_raw = _take("sync", data.get("sync", {}), {"mode", "slack"})
        mit_raw = _take("mitigation", data.get("mitigation", {}), _fields(MitigationSettings))
        flags = tuple(sorted(Mitigation(f).value for f in mit_raw.pop("flags", ())))
        mitigation = MitigationSettings(flags=flags, **_coerce(MitigationSettings, "mitigation", mit_raw))
        mode = SyncMode(sync_raw.get("mode", "bsp"))
        slack = sync_raw.get("slack", 0 if mode is SyncMode.BSP else DEFAULT_SSP_SLACK)
        if isinstance(slack, bool) or not isinstance(slack, int):
            raise ConfigurationError("[sync] slack must be an integer")
        sync = SyncPolicy(mode, slack, frozenset(flags))

        st_allowed = _fields(StragglerConfig)
        st_raw = _take("straggler", data.get("straggler", {}), st_allowed)
        st_vals = _coerce(StragglerConfig, "straggler", {k: v for k, v in st_raw.items()
                                                          if k not in ("pattern", "persistent_workers")})
        if "pattern" in st_raw:
            st_vals["pattern"] = st_raw["pattern"]
        if "persistent_workers" in st_raw:
            st_vals["persistent_workers"] = frozenset(int(w) for w in st_raw["persistent_workers"])
        st_vals.setdefault("seed", run.seed)
        straggler = StragglerConfig(**st_vals)

        wl_raw = dict(data.get("workload", {}))
        name = wl_raw.pop("name", "mf")
        if name not in WORKLOAD_KEYS:
            raise ConfigurationError(f"unknown workload {name!r}")
        wseed = wl_raw.pop("seed", None)
        epochs = wl_raw.pop("epochs", None)
        _take("workload", wl_raw, set(WORKLOAD_KEYS[name]))
        for k, v in wl_raw.items():
            d = WORKLOAD_KEYS[name][k]
            if isinstance(d, int) and (isinstance(v, bool) or not isinstance(v, int)):
                raise ConfigurationError(f"[workload] {k} must be an integer")
            if isinstance(d, float) and not isinstance(v, (int, float)):
                raise ConfigurationError(f"[workload] {k} must be a number")
            if isinstance(d, float):
                wl_raw[k] = float(v)
        if epochs is not None:
            if "iterations" in run_raw and run_raw["iterations"] != epochs:
                raise ConfigurationError("[workload] epochs disagrees with [run] iterations")
            run = dataclasses.replace(run, iterations=int(epochs))
        workload = WorkloadSection(name, wseed, wl_raw)

        cl_raw = _take("cluster", data.get("cluster", {}), _fields(ClusterSection))
        cluster = ClusterSection(**_coerce(ClusterSection, "cluster", cl_raw))
    except ConfigurationError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigurationError(str(exc)) from exc
    cfg = ExperimentConfig(run, sync, mitigation, straggler, workload, cluster)
    cfg.validate()
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"{path}: {exc}") from exc
    except OSError as exc:
        raise ConfigurationError(f"cannot read {path}: {exc}") from exc
    return from_dict(data)


def to_dict(cfg: ExperimentConfig) -> dict[str, dict[str, Any]]:
    s = cfg.straggler
    straggler = {f.name: getattr(s, f.name) for f in dataclasses.fields(s)}
    straggler["pattern"] = s.pattern.value
    straggler["persistent_workers"] = sorted(s.persistent_workers)
    workload = {"name": cfg.workload.name, "seed": cfg.workload_seed}
    workload.update(cfg.workload.resolved())
    return {
        "run": dataclasses.asdict(cfg.run),
        "sync": {"mode": cfg.sync.mode.value, "slack": cfg.sync.slack},
        "mitigation": {**dataclasses.asdict(cfg.mitigation), "flags": list(cfg.mitigation.flags)},
        "straggler": straggler,
        "workload": workload,
        "cluster": dataclasses.asdict(cfg.cluster),
    }


def _toml_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot serialise {v!r}")


def dumps(cfg: ExperimentConfig) -> str:
    """Fully resolved config as TOML (what ``config.echo`` contains)."""
    lines = []
    for section, values in to_dict(cfg).items():
        lines.append(f"[{section}]")
        for k in sorted(values):
            lines.append(f"{k} = {_toml_value(values[k])}")
        lines.append("")
    return "\n".join(lines)
