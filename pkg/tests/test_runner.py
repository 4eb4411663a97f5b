import csv

import pytest

from conftest import make_config
from stragglerlab import config as config_mod
from stragglerlab.bench import compute_t_waste, iteration_times, read_records_csv
from stragglerlab.cli import main
from stragglerlab.config import from_dict, load_config
from stragglerlab.injector import ConfigurationError
from stragglerlab.runner import compare_modes, parse_mode, pct, run_experiment, set_param, sweep, with_mode

PROBE_TOML = """\
[run]
run_id = "{run_id}"
workers = 4
iterations = 6
seed = 2

[sync]
mode = "{mode}"

[straggler]
pattern = "{pattern}"

[workload]
name = "probe"
size = 40

[cluster]
{cluster}
"""


def write_cfg(tmp_path, name="c.toml", run_id="r", mode="bsp", pattern="slow_worker", cluster=""):
    path = tmp_path / name
    path.write_text(PROBE_TOML.format(run_id=run_id, mode=mode, pattern=pattern, cluster=cluster))
    return str(path)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- config ------------------------------------------------------------------

def test_unknown_keys_and_sections_rejected():
    with pytest.raises(ConfigurationError):
        from_dict({"runn": {}})
    with pytest.raises(ConfigurationError):
        from_dict({"run": {"worker": 3}})
    with pytest.raises(ConfigurationError):
        from_dict({"workload": {"name": "mf", "rnak": 3}})
    with pytest.raises(ConfigurationError):
        from_dict({"straggler": {"pattern": "sometimes"}})
    with pytest.raises(ConfigurationError):
        from_dict({"run": {"iterations": 2}, "sync": {"mode": "ssp", "slack": 5}})


def test_defaults_and_round_trip(tmp_path):
    cfg = make_config(sync={"mode": "ssp"}, mitigation={"flags": ["reassignment"]})
    assert cfg.sync.slack == config_mod.DEFAULT_SSP_SLACK
    assert cfg.mode_label == "ssp+rr"
    path = tmp_path / "echo.toml"
    path.write_text(config_mod.dumps(cfg))
    again = load_config(path)
    assert config_mod.to_dict(again) == config_mod.to_dict(cfg)
    assert config_mod.dumps(again) == path.read_text()


def test_load_config_errors(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text("[run\n")
    with pytest.raises(ConfigurationError):
        load_config(bad)
    with pytest.raises(ConfigurationError):
        load_config(tmp_path / "missing.toml")


def test_parse_mode_labels():
    assert parse_mode("bsp") == ("bsp", 0, ())
    assert parse_mode("ssp:2+rr") == ("ssp", 2, ("reassignment",))
    assert parse_mode("bsp+spec+rr") == ("bsp", 0, ("reassignment", "speculation"))
    with pytest.raises(ConfigurationError):
        parse_mode("asp")
    with pytest.raises(ConfigurationError):
        parse_mode("ssp+magic")


def test_set_param_resolves_section():
    cfg = make_config(straggler={"pattern": "power_law"})
    assert set_param(cfg, "alpha", "7").straggler.alpha == 7.0
    assert set_param(cfg, "run.workers", 3).run.workers == 3
    with pytest.raises(ConfigurationError):
        set_param(cfg, "nonsense", 1)


# -- runs and reports --------------------------------------------------------

def test_ideal_mf_has_no_waste():
    cfg = make_config(run={"workers": 4, "iterations": 20},
                      workload={"name": "mf", "rows": 60, "cols": 60, "density": 0.2})
    assert run_experiment(cfg).total_waste_ticks == 0


def test_output_layout_and_unique_run_id(tmp_path):
    cfg = make_config(run={"workers": 2, "iterations": 3, "run_id": "x"}, workload={"name": "probe", "size": 8})
    run_experiment(cfg, tmp_path)
    assert sorted(p.name for p in (tmp_path / "x").iterdir()) == ["config.echo", "records.csv", "summary.csv"]
    echo = load_config(tmp_path / "x" / "config.echo")
    assert config_mod.to_dict(echo) == config_mod.to_dict(cfg)
    with pytest.raises(ConfigurationError):
        run_experiment(cfg, tmp_path)
    run_experiment(cfg, tmp_path, overwrite=True)


def test_same_seed_byte_identical(tmp_path):
    cfg = make_config(run={"workers": 4, "iterations": 5, "seed": 9}, sync={"mode": "ssp"},
                      mitigation={"flags": ["reassignment"]}, straggler={"pattern": "slow_worker"},
                      workload={"name": "lda", "docs": 40, "doc_len": 20, "vocab": 50, "topics": 4})
    run_experiment(cfg, tmp_path / "a")
    run_experiment(cfg, tmp_path / "b")
    for f in ("records.csv", "summary.csv"):
        assert (tmp_path / "a" / "run" / f).read_bytes() == (tmp_path / "b" / "run" / f).read_bytes()


def test_identical_bsp_configs_give_zero_delta():
    cfg = make_config(run={"workers": 3, "iterations": 4}, straggler={"pattern": "slow_worker"},
                      workload={"name": "probe", "size": 30})
    report = compare_modes([cfg, cfg])
    assert [r["pct_vs_bsp_waste"] for r in report.rows] == ["0.000", "0.000"]
    assert [r["pct_vs_bsp_iter"] for r in report.rows] == ["0.000", "0.000"]
    assert len({r["run_id"] for r in report.rows}) == 2


def test_missing_baseline_is_config_error():
    cfg = make_config(sync={"mode": "ssp"}, workload={"name": "probe", "size": 30})
    with pytest.raises(ConfigurationError):
        compare_modes([cfg])


def test_compared_configs_must_share_workload():
    a = make_config(workload={"name": "probe", "size": 30})
    b = make_config(sync={"mode": "ssp"}, workload={"name": "probe", "size": 31})
    with pytest.raises(ConfigurationError):
        compare_modes([a, b])


def test_report_recomputable_from_records(tmp_path):
    base = make_config(run={"workers": 4, "iterations": 6, "run_id": "m"}, straggler={"pattern": "slow_worker"},
                       workload={"name": "probe", "size": 40})
    cfgs = [with_mode(base, m) for m in ("bsp", "ssp", "ssp+rr")]
    report = compare_modes(cfgs, tmp_path)
    summary = read_csv(tmp_path / "summary.csv")
    assert summary == report.rows
    recs = {r["mode"]: read_records_csv(tmp_path / r["run_id"] / "records.csv") for r in summary}
    waste = {m: compute_t_waste(r) for m, r in recs.items()}
    avg = {m: sum(iteration_times(r)) / len(iteration_times(r)) for m, r in recs.items()}
    for row in summary:
        m = row["mode"]
        assert float(row["total_waste_ms"]) * 1000 == pytest.approx(waste[m])
        assert row["pct_vs_bsp_waste"] == pct(waste["bsp"], waste[m])
        assert row["pct_vs_bsp_iter"] == pct(avg["bsp"], avg[m])
    long = read_csv(tmp_path / "long.csv")
    assert {r["metric"] for r in long} >= {"iter", "waste", "avg_iter", "total_waste"}


def test_pct_arithmetic():
    assert pct(200, 150) == "25.000"
    assert pct(0, 0) == "0.000"
    assert pct(0, 5) == "nan"


def test_sweep_writes_one_block_per_value(tmp_path):
    base = make_config(run={"workers": 3, "iterations": 4, "run_id": "s"}, straggler={"pattern": "power_law"},
                       workload={"name": "probe", "size": 30})
    cfgs = [with_mode(base, m) for m in ("bsp", "ssp")]
    results = sweep(cfgs, "alpha", [4, 11], tmp_path)
    assert [v for v, _ in results] == [4, 11]
    rows = read_csv(tmp_path / "sweep.csv")
    assert [(r["value"], r["mode"]) for r in rows] == [("4", "bsp"), ("4", "ssp"), ("11", "bsp"), ("11", "ssp")]
    assert (tmp_path / "alpha=11" / "s-bsp-alpha=11" / "records.csv").exists()


# -- CLI ---------------------------------------------------------------------

def test_cli_run_ok(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    assert main(["run", cfg, "--out", str(tmp_path / "out")]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "run_id,mode,pattern,avg_iter_ms,total_waste_ms,pct_vs_bsp_iter,pct_vs_bsp_waste"
    assert (tmp_path / "out" / "r" / "records.csv").exists()


def test_cli_config_error_exit_2(tmp_path, capsys):
    cfg = write_cfg(tmp_path, pattern="bogus")
    assert main(["run", cfg, "--out", str(tmp_path / "out")]) == 2
    assert "config error" in capsys.readouterr().err
    assert main(["compare", write_cfg(tmp_path, "s.toml", mode="ssp"), "--out", str(tmp_path / "o2")]) == 2


def test_cli_breach_exit_3_flushes_partial_csv(tmp_path, capsys):
    cfg = write_cfg(tmp_path, cluster="deadlock_ticks = 10")
    assert main(["run", cfg, "--out", str(tmp_path / "out")]) == 3
    assert "invariant breach" in capsys.readouterr().err
    assert (tmp_path / "out" / "r" / "records.csv").exists()


def test_cli_compare_modes_and_seed(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    code = main(["compare", cfg, "--modes", "bsp,ssp,ssp+rr", "--seed", "4", "--out", str(tmp_path / "o")])
    assert code == 0
    rows = list(csv.DictReader(capsys.readouterr().out.splitlines()))
    assert [r["mode"] for r in rows] == ["bsp", "ssp", "ssp+rr"]
    assert rows[0]["pct_vs_bsp_waste"] == "0.000"
    echo = load_config(tmp_path / "o" / "r-bsp" / "config.echo")
    assert echo.run.seed == 4 and echo.straggler.seed == 4


def test_cli_sweep(tmp_path, capsys):
    cfg = write_cfg(tmp_path, pattern="power_law")
    code = main(["sweep", cfg, "--modes", "bsp,ssp+rr", "--param", "alpha", "--values", "4,7,11",
                 "--out", str(tmp_path / "o")])
    assert code == 0
    rows = list(csv.DictReader(capsys.readouterr().out.splitlines()))
    assert len(rows) == 6 and rows[0]["value"] == "4"
    assert main(["sweep", cfg, "--param", "alpha", "--values", ",", "--out", str(tmp_path / "p")]) == 2
