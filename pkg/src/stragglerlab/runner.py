"""Experiment orchestration: one run, a mode comparison, or a parameter sweep."""

from __future__ import annotations

import csv
import dataclasses
import functools
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from . import config as config_mod
from .bench import (
    IterationRecord,
    compute_t_iteration,
    compute_t_waste,
    iteration_times,
    ms,
    write_records_csv,
)
from .config import ExperimentConfig
from .consistency import Mitigation, SyncMode
from .engine import RunResult, VirtualCluster
from .injector import ConfigurationError
from .workloads import LDAWorkload, LRWorkload, MFWorkload, ProbeWorkload, Workload, gen_corpus, gen_lr, gen_mf

log = logging.getLogger(__name__)

SUMMARY_COLUMNS = ("run_id", "mode", "pattern", "avg_iter_ms", "total_waste_ms", "pct_vs_bsp_iter", "pct_vs_bsp_waste")
LONG_COLUMNS = ("run_id", "mode", "pattern", "iteration", "metric", "value_ms")


# -- workloads -------------------------------------------------------------

@functools.lru_cache(maxsize=16)
def _dataset(name: str, params: tuple, seed: int):
    p = dict(params)
    if name == "mf":
        return gen_mf(p["rows"], p["cols"], p["rank"], p["density"], p["noise"], seed)
    if name == "lr":
        return gen_lr(p["n"], p["dim"], p["margin"], seed, p["nnz"])
    if name == "lda":
        return gen_corpus(p["docs"], p["doc_len"], p["vocab"], p["topics"], seed)
    return None


def build_workload(cfg: ExperimentConfig) -> Workload:
    """Fresh workload instance; generated datasets are cached by parameters and seed."""
    name = cfg.workload.name
    p = cfg.workload.resolved()
    data = _dataset(name, tuple(sorted(p.items())), cfg.workload_seed)
    if name == "mf":
        return MFWorkload(data, p["rank"], p["step"], p["reg"], p["init_scale"], cfg.workload_seed)
    if name == "lr":
        return LRWorkload(data, p["step"])
    if name == "lda":
        return LDAWorkload(data, p["alpha_prior"], p["beta_prior"], cfg.workload_seed, p["chunk"])
    if name == "probe":
        return ProbeWorkload(p["size"])
    raise ConfigurationError(f"unknown workload {name!r}")


# -- single run --------------------------------------------------------------

@dataclass
class RunOutput:
    config: ExperimentConfig
    result: RunResult
    run_id: str

    @property
    def records(self) -> list[IterationRecord]:
        return self.result.records

    @property
    def mode(self) -> str:
        return self.config.mode_label

    @property
    def pattern(self) -> str:
        return self.config.pattern_label

    @property
    def iteration_ticks(self) -> list[int]:
        return iteration_times(self.records)

    @property
    def avg_iter_ticks(self) -> float:
        its = self.iteration_ticks
        return sum(its) / len(its)

    @property
    def avg_iter_last15_ticks(self) -> float:
        its = self.iteration_ticks[-15:]
        return sum(its) / len(its)

    @property
    def total_waste_ticks(self) -> int:
        return compute_t_waste(self.records)

    @property
    def t_iteration_ticks(self) -> int:
        return compute_t_iteration(self.records)

    @property
    def wall_ticks(self) -> int:
        return self.result.wall_ticks

    def summary_row(self, baseline: "RunOutput | None" = None) -> dict[str, str]:
        row = {
            "run_id": self.run_id,
            "mode": self.mode,
            "pattern": self.pattern,
            "avg_iter_ms": ms(self.avg_iter_ticks),
            "total_waste_ms": ms(self.total_waste_ticks),
            "pct_vs_bsp_iter": "",
            "pct_vs_bsp_waste": "",
        }
        if baseline is not None:
            row["pct_vs_bsp_iter"] = pct(baseline.avg_iter_ticks, self.avg_iter_ticks)
            row["pct_vs_bsp_waste"] = pct(baseline.total_waste_ticks, self.total_waste_ticks)
        return row


def pct(base: float, value: float) -> str:
    """(base - value) / base * 100, formatted; ``nan`` when base is zero and value is not."""
    if base == 0:
        return "0.000" if value == 0 else "nan"
    return f"{(base - value) / base * 100.0:.3f}"


def _write_csv(path: Path, columns: Sequence[str], rows: Iterable[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def long_rows(out: RunOutput) -> list[dict[str, str]]:
    rows = []
    by_it: dict[int, list[IterationRecord]] = {}
    for r in out.records:
        by_it.setdefault(r.iteration, []).append(r)
    for it in sorted(by_it):
        recs = by_it[it]
        metrics = {
            "iter": max(r.wall_ticks for r in recs),
            "waste": sum(r.wait_ticks for r in recs),
            "comp_max": max(r.comp_ticks for r in recs),
            "comm_max": max(r.comm_ticks for r in recs),
        }
        for name, value in metrics.items():
            rows.append({"run_id": out.run_id, "mode": out.mode, "pattern": out.pattern,
                         "iteration": it, "metric": name, "value_ms": ms(value)})
    for name, value in (("avg_iter", out.avg_iter_ticks), ("avg_iter_last15", out.avg_iter_last15_ticks),
                        ("t_iteration", out.t_iteration_ticks), ("total_waste", out.total_waste_ticks),
                        ("wall", out.wall_ticks)):
        rows.append({"run_id": out.run_id, "mode": out.mode, "pattern": out.pattern,
                     "iteration": "all", "metric": name, "value_ms": ms(value)})
    return rows


def _execute(cfg: ExperimentConfig, workload: Workload, injector, trace_objective: bool) -> RunResult:
    if cfg.run.clock == "virtual":
        return VirtualCluster(cfg, workload, injector, trace_objective).run()
    from .realtime import RealCluster

    return RealCluster(cfg, workload, injector).run()


def run_experiment(
    cfg: ExperimentConfig,
    out_dir: str | Path | None = None,
    injector=None,
    workload: Workload | None = None,
    trace_objective: bool = False,
    overwrite: bool = False,
    run_id: str | None = None,
) -> RunOutput:
    """Run one configuration; with ``out_dir`` also write records, summary and config echo.

    On an invariant breach the records gathered so far are written before the
    exception propagates.
    """
    cfg.validate()
    rid = run_id or cfg.run.run_id
    target = None
    if out_dir is not None:
        target = Path(out_dir) / rid
        if target.exists() and any(target.iterdir()) and not overwrite:
            raise ConfigurationError(f"output directory {target} already exists (run_id must be unique)")
        target.mkdir(parents=True, exist_ok=True)
        (target / "config.echo").write_text(config_mod.dumps(cfg))
    wl = workload if workload is not None else build_workload(cfg)
    log.info("run %s: %s %s %s, %d workers x %d iterations", rid, cfg.workload.name, cfg.mode_label,
             cfg.pattern_label, cfg.run.workers, cfg.run.iterations)
    try:
        result = _execute(cfg, wl, injector, trace_objective)
    except Exception as exc:
        partial = getattr(exc, "partial_records", None)
        if target is not None and partial is not None:
            write_records_csv(target / "records.csv", partial, rid, cfg.mode_label, cfg.pattern_label)
        raise
    out = RunOutput(cfg, result, rid)
    if target is not None:
        write_records_csv(target / "records.csv", result.records, rid, out.mode, out.pattern)
        baseline = out if cfg.sync.mode is SyncMode.BSP and not cfg.sync.mitigation else None
        _write_csv(target / "summary.csv", SUMMARY_COLUMNS, [out.summary_row(baseline)])
    log.info("run %s: avg_iter %s ms, waste %s ms, counters %s", rid, ms(out.avg_iter_ticks),
             ms(out.total_waste_ticks), result.counters)
    return out


# -- comparisons -------------------------------------------------------------

def parse_mode(label: str, default_slack: int = config_mod.DEFAULT_SSP_SLACK) -> tuple[str, int, tuple[str, ...]]:
    """``bsp``, ``ssp``, ``ssp:2``, ``ssp+rr``, ``bsp+spec`` ... -> (mode, slack, flags)."""
    head, *extras = label.lower().split("+")
    mode, _, slack_s = head.partition(":")
    if mode not in ("bsp", "ssp"):
        raise ConfigurationError(f"unknown mode {label!r}")
    slack = 0 if mode == "bsp" else (int(slack_s) if slack_s else default_slack)
    names = {"rr": Mitigation.REASSIGNMENT.value, "reassignment": Mitigation.REASSIGNMENT.value,
             "spec": Mitigation.SPECULATION.value, "speculation": Mitigation.SPECULATION.value}
    try:
        flags = tuple(sorted({names[e] for e in extras}))
    except KeyError as exc:
        raise ConfigurationError(f"unknown mitigation in {label!r}") from exc
    return mode, slack, flags


def with_mode(cfg: ExperimentConfig, label: str) -> ExperimentConfig:
    default = cfg.sync.slack if cfg.sync.mode is SyncMode.SSP else config_mod.DEFAULT_SSP_SLACK
    mode, slack, flags = parse_mode(label, default)
    new = cfg.with_mode(mode, slack, flags)
    return new.replace(run=dataclasses.replace(new.run, run_id=f"{cfg.run.run_id}-{new.mode_label}"))


@dataclass
class ComparisonReport:
    rows: list[dict[str, str]]
    outputs: list[RunOutput] = field(default_factory=list)
    baseline: str = "bsp"

    def row(self, mode: str) -> dict[str, str]:
        for r in self.rows:
            if r["mode"] == mode:
                return r
        raise KeyError(mode)

    def output(self, mode: str) -> RunOutput:
        for o in self.outputs:
            if o.mode == mode:
                return o
        raise KeyError(mode)


def _comparable(a: ExperimentConfig, b: ExperimentConfig) -> bool:
    strip = dict(sync=a.sync, mitigation=a.mitigation, run=dataclasses.replace(b.run, run_id=a.run.run_id))
    return a == b.replace(**strip)


def unique_run_ids(configs: Sequence[ExperimentConfig]) -> list[str]:
    seen: dict[str, int] = {}
    ids = []
    for c in configs:
        rid = c.run.run_id
        n = seen.get(rid, 0) + 1
        seen[rid] = n
        ids.append(rid if n == 1 else f"{rid}-{n}")
    return ids


def compare_modes(
    configs: Sequence[ExperimentConfig],
    out_dir: str | Path | None = None,
    baseline: str = "bsp",
    overwrite: bool = False,
    injector_factory=None,
) -> ComparisonReport:
    """Run configs that differ only in sync/mitigation and report deltas vs the baseline mode."""
    if not configs:
        raise ConfigurationError("nothing to compare")
    base_cfgs = [c for c in configs if c.mode_label == baseline]
    if not base_cfgs:
        raise ConfigurationError(f"no {baseline!r} baseline among the compared configs")
    for c in configs[1:]:
        if not _comparable(configs[0], c):
            raise ConfigurationError("compared configs must differ only in sync and mitigation settings")
    outputs = []
    for cfg, rid in zip(configs, unique_run_ids(configs)):
        inj = injector_factory(cfg) if injector_factory else None
        outputs.append(run_experiment(cfg, out_dir, injector=inj, overwrite=overwrite, run_id=rid))
    base = next(o for o in outputs if o.mode == baseline)
    rows = [o.summary_row(base) for o in outputs]
    if out_dir is not None:
        _write_csv(Path(out_dir) / "summary.csv", SUMMARY_COLUMNS, rows)
        _write_csv(Path(out_dir) / "long.csv", LONG_COLUMNS, [r for o in outputs for r in long_rows(o)])
    return ComparisonReport(rows, outputs, baseline)


# -- sweeps ------------------------------------------------------------------

def set_param(cfg: ExperimentConfig, param: str, value) -> ExperimentConfig:
    """Override one parameter, named ``key`` or ``section.key``."""
    data = config_mod.to_dict(cfg)
    if "." in param:
        section, key = param.split(".", 1)
        if section not in data or key not in data[section]:
            raise ConfigurationError(f"unknown parameter {param!r}")
    else:
        owners = [s for s, vals in data.items() if param in vals]
        if len(owners) != 1:
            raise ConfigurationError(f"parameter {param!r} is {'ambiguous' if owners else 'unknown'}")
        section, key = owners[0], param
    current = data[section][key]
    if isinstance(current, bool):
        value = str(value).lower() in ("1", "true", "yes")
    elif isinstance(current, int) and not isinstance(current, bool):
        value = int(value)
    elif isinstance(current, float):
        value = float(value)
    data[section][key] = value
    if section == "workload":
        for k in list(data["workload"]):
            if k not in config_mod.WORKLOAD_KEYS.get(data["workload"]["name"], {}) and k not in ("name", "seed"):
                data["workload"].pop(k)
    return config_mod.from_dict(data)


def _fmt(value) -> str:
    if isinstance(value, float) and math.isfinite(value) and value == int(value):
        return str(int(value))
    return str(value)


def sweep(
    configs: Sequence[ExperimentConfig],
    param: str,
    values: Sequence,
    out_dir: str | Path | None = None,
    baseline: str = "bsp",
    overwrite: bool = False,
) -> list[tuple[object, ComparisonReport]]:
    """Compare the modes in ``configs`` once per value of ``param``."""
    results = []
    all_rows = []
    long = []
    for v in values:
        variant = []
        for c in configs:
            nc = set_param(c, param, v)
            nc = nc.replace(run=dataclasses.replace(nc.run, run_id=f"{c.run.run_id}-{param}={_fmt(v)}"))
            variant.append(nc)
        sub = None if out_dir is None else Path(out_dir) / f"{param}={_fmt(v)}"
        if sub is not None:
            sub.mkdir(parents=True, exist_ok=True)
        if any(c.mode_label == baseline for c in variant):
            report = compare_modes(variant, sub, baseline, overwrite)
        else:
            outs = [run_experiment(c, sub, overwrite=overwrite) for c in variant]
            report = ComparisonReport([o.summary_row() for o in outs], outs, baseline)
        results.append((v, report))
        all_rows.extend({"param": param, "value": _fmt(v), **r} for r in report.rows)
        long.extend(r for o in report.outputs for r in long_rows(o))
    if out_dir is not None:
        _write_csv(Path(out_dir) / "sweep.csv", ("param", "value") + SUMMARY_COLUMNS, all_rows)
        _write_csv(Path(out_dir) / "long.csv", LONG_COLUMNS, long)
    return results
