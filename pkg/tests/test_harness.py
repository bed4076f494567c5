import csv
import json
from pathlib import Path

import numpy as np
import pytest

from urllc_lab.harness import cli
from urllc_lab.harness.config import DEFAULTS, apply_overrides, config_hash, env_config, load_config
from urllc_lab.harness.plots import SCHEMAS, MissingArtifacts, emit_plot_data
from urllc_lab.harness.scenarios import recovery_epochs, run_scenario, write_csv
from urllc_lab.harness.traces import (TraceError, expand_sessions, extremeness, fixture_sessions,
                                      read_trace, sources_from_sessions, write_trace)

FIX = Path(__file__).parent / "fixtures"
DATA = Path(__file__).parent.parent / "data"

TINY = {
    "env": {"n_users": 2, "n_rbs": 4},
    "traffic": {"fixture_sessions": 20},
    "ppo": {"slots_per_rollout": 16, "minibatch": 8, "hidden": [8]},
    "schedule": {"train_epochs": 1, "eval_epochs": 1},
}


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# config -----------------------------------------------------------------------------------

def test_overrides_set_leaves():
    cfg = apply_overrides(DEFAULTS, ["env.n_users=5", "reward.alpha=0.5", "traffic.trace=runs/x.csv",
                                     "sweep.n_rbs=[1,2]"])
    assert cfg["env"]["n_users"] == 5 and cfg["reward"]["alpha"] == 0.5
    assert cfg["traffic"]["trace"] == "runs/x.csv" and cfg["sweep"]["n_rbs"] == [1, 2]
    assert DEFAULTS["env"]["n_users"] == 20


def test_unknown_override_rejected():
    with pytest.raises(KeyError):
        apply_overrides(DEFAULTS, ["env.n_user=5"])
    with pytest.raises(KeyError):
        apply_overrides(DEFAULTS, ["nosuch.key=1"])
    with pytest.raises(ValueError):
        apply_overrides(DEFAULTS, ["env.n_users"])


def test_config_hash_stable_and_sensitive():
    a = load_config(None, ["seeds=[1,2]"])
    b = json.loads(json.dumps(a))
    assert config_hash(a) == config_hash(b)
    assert config_hash(a) != config_hash(apply_overrides(a, ["env.n_rbs=251"]))


def test_defaults_match_system_parameters():
    ec = env_config(DEFAULTS)
    assert ec.n_users == 20 and ec.n_rbs == 250
    assert ec.rb_bandwidth_hz == 180e3 and ec.max_bs_power_w == 4.0
    assert ec.d_max[0] == 10e-3 and ec.slot_duration_s == 1e-3


def test_config_validation(tmp_path):
    with pytest.raises(ValueError):
        load_config(None, ["scenario=\"nope\""])
    with pytest.raises(ValueError):
        load_config(None, ["seeds=[]"])
    with pytest.raises(FileNotFoundError):
        load_config(None, [f"traffic.trace={tmp_path / 'missing.csv'}"])


# traces ------------------------------------------------------------------------------------

def test_read_trace_skips_blank_rows():
    s = read_trace(FIX / "sessions_small.csv")
    assert [x.session_id for x in s] == ["a", "b", "c"]
    assert sum(x.packet_count for x in s) == 10


def test_expanded_packet_count_matches_counts():
    s = read_trace(FIX / "sessions_small.csv")
    iat, bits, idx = expand_sessions(s, seed=0)
    assert len(iat) == 10 and np.array_equal(np.bincount(idx), [3, 5, 2])
    assert np.all(iat > 0) and np.all(bits >= 1)


def test_single_session_expands_to_its_count():
    from urllc_lab.harness.traces import Session
    iat, bits, _ = expand_sessions([Session("x", 3, 100.0, 1000.0)])
    assert len(iat) == 3


def test_bad_row_reports_line_number():
    with pytest.raises(TraceError, match=r"sessions_bad_count.csv:3:"):
        read_trace(FIX / "sessions_bad_count.csv")


@pytest.mark.parametrize("body,pattern", [
    ("", "empty trace file"),
    ("a,b,c,d\n", ":1: expected header"),
    ("session_id,packet_count,mean_size_bytes,mean_iat_us\n", "no sessions"),
    ("session_id,packet_count,mean_size_bytes,mean_iat_us\nx,2,10\n", ":2: expected 4 fields"),
    ("session_id,packet_count,mean_size_bytes,mean_iat_us\nx,2,10,1\ny,two,10,1\n", ":3:"),
    ("session_id,packet_count,mean_size_bytes,mean_iat_us\nx,2,-10,1\n", ":2:"),
    ("session_id,packet_count,mean_size_bytes,mean_iat_us\nx,2,10,nan\n", ":2:"),
])
def test_malformed_traces_rejected(tmp_path, body, pattern):
    p = tmp_path / "t.csv"
    p.write_text(body)
    with pytest.raises(TraceError, match=pattern):
        read_trace(p)


def test_trace_round_trip(tmp_path):
    s = fixture_sessions(15, 2000.0, 150.0, seed=3)
    write_trace(tmp_path / "t.csv", s)
    assert read_trace(tmp_path / "t.csv") == s


def test_shipped_fixture_trace_is_valid():
    s = read_trace(DATA / "sessions_fixture.csv")
    assert len(s) == 200
    src = sources_from_sessions(s, 20, seed=0)
    assert len(src) == 20 and all(x.mode == "trace" for x in src)


def test_round_robin_sources_and_scaling():
    s = fixture_sessions(12, 2000.0, 150.0, seed=1)
    base = sources_from_sessions(s, 3, seed=2)
    fast = sources_from_sessions(s, 3, seed=2, load_scale=2.0)
    for a, b in zip(base, fast):
        np.testing.assert_allclose(b.trace_times, a.trace_times / 2.0)
    with pytest.raises(TraceError):
        sources_from_sessions(s, 13)


def test_extremeness_percentiles():
    s = fixture_sessions(200, 2000.0, 150.0, seed=11)
    ex = extremeness(s, 200e-6, 350.0)
    assert ex["iat_percentile_sessions"] < 20
    assert ex["size_percentile_sessions"] > 80


# recovery metric -----------------------------------------------------------------------

def test_recovery_epochs():
    r = [-1.0] * 10 + [-50.0, -20.0, -1.05, -1.0]
    assert recovery_epochs(r, 10, 5, 0.1) == 2
    assert recovery_epochs(r[:12], 10, 5, 0.1) is None
    assert recovery_epochs([-1e-4] * 5 + [-0.05], 5, 5, 0.1, abs_band=0.1) == 0


# scenarios, emit, CLI -------------------------------------------------------------------

def _tiny(tmp_path, scenario, **extra):
    cfg = load_config(None)
    from urllc_lab.harness.config import deep_merge
    cfg = deep_merge(cfg, TINY)
    cfg = deep_merge(cfg, extra)
    cfg["scenario"] = scenario
    cfg["seeds"] = [0, 1]
    cfg["out"] = str(tmp_path / scenario)
    return cfg


def test_sweep_rate_emits_full_surface(tmp_path):
    cfg = _tiny(tmp_path, "sweep_rate", sweep={"load_scale": [1.0, 2.0, 3.0], "d_max_s": [0.005, 0.01]})
    run_scenario(cfg)
    written = emit_plot_data(cfg["out"], png=False)
    rows = _rows(written["fig9_surface"])
    assert len(rows) == 3 * 2
    assert tuple(rows[0]) == SCHEMAS["fig9_surface"]
    assert all(r["seeds"] == "2" for r in rows)
    assert len(_rows(Path(cfg["out"]) / "results.csv")) == 2 * 3 * 2


def test_emit_is_byte_identical(tmp_path):
    cfg = _tiny(tmp_path, "reducer_error", reducer_error={"n_rbs": [16, 32], "n_users": 4})
    run_scenario(cfg)
    first = emit_plot_data(cfg["out"])
    snap = {p: p.read_bytes() for p in Path(cfg["out"], "plots").iterdir()}
    emit_plot_data(cfg["out"])
    assert {p: p.read_bytes() for p in Path(cfg["out"], "plots").iterdir()} == snap
    assert tuple(_rows(first["fig11_reducer_error"])[0]) == SCHEMAS["fig11_reducer_error"]
    assert (Path(cfg["out"]) / "plots" / "fig11_reducer_error.png").exists()


def test_summary_records_config_hash(tmp_path):
    cfg = _tiny(tmp_path, "reducer_error", reducer_error={"n_rbs": [16], "n_users": 3})
    run_scenario(cfg)
    summary = json.loads((Path(cfg["out"]) / "summary.json").read_text())
    assert summary["config_hash"] == config_hash(cfg)
    assert summary["seeds"] == [0, 1]


def test_emit_without_artifacts(tmp_path):
    with pytest.raises(MissingArtifacts):
        emit_plot_data(tmp_path)
    assert cli.main(["emit-plots", str(tmp_path)]) == 2


def test_write_csv_formats():
    import io
    import tempfile
    with tempfile.TemporaryDirectory() as d:
        write_csv(Path(d) / "x.csv", [{"a": 0.1, "b": True}, {"a": 1}])
        assert (Path(d) / "x.csv").read_text() == "a,b\n0.1,true\n1,\n"


def test_cli_reduce(tmp_path, capsys):
    prob = {"gains": [[1e-9, 2e-9, 5e-10], [3e-10, 1e-9, 2e-9]], "rates": [3e5, 2e5]}
    (tmp_path / "p.json").write_text(json.dumps(prob))
    assert cli.main(["reduce", str(tmp_path / "p.json"), "--out", str(tmp_path / "o.json")]) == 0
    res = json.loads((tmp_path / "o.json").read_text())
    assert np.all(np.array(res["achieved_bps"]) >= np.array(prob["rates"]) * 0.99)
    assert len(res["owner"]) == 3


def test_cli_scenario_and_bad_override(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"reducer_error": {"n_rbs": [16], "n_users": 3}}))
    out = tmp_path / "run"
    assert cli.main(["scenario", "reducer_error", "--config", str(cfg), "--seed", "0", "--seed", "1",
                     "--out", str(out)]) == 0
    assert (out / "plots" / "fig11_reducer_error.csv").exists()
    assert cli.main(["scenario", "reducer_error", "--set", "env.bogus=1", "--out", str(out)]) == 2


def test_cli_simulate(tmp_path):
    args = ["simulate", "--slots", "50", "--out", str(tmp_path), "--set", "env.n_users=2",
            "--set", "env.n_rbs=4", "--set", "traffic.fixture_sessions=10"]
    assert cli.main(args) == 0
    rows = _rows(tmp_path / "simulate.csv")
    assert len(rows) == 1 and 0.0 <= float(rows[0]["reliability"]) <= 1.0


def test_cli_pretrain_then_deploy(tmp_path):
    sets = ["--set", "env.n_users=2", "--set", "env.n_rbs=4", "--set", "traffic.fixture_sessions=20",
            "--set", "ppo.slots_per_rollout=16", "--set", "ppo.minibatch=8", "--set", "ppo.hidden=[8]",
            "--set", "refiner.steps=20", "--set", "refiner.dataset_size=200",
            "--set", "schedule.pretrain_epochs=1", "--set", "schedule.train_epochs=2",
            "--set", "schedule.eval_epochs=1"]
    pre = tmp_path / "pre"
    assert cli.main(["pretrain", "--out", str(pre), *sets]) == 0
    ckpt = pre / "agent_seed0.json"
    assert ckpt.exists()
    dep = tmp_path / "dep"
    assert cli.main(["deploy", "--checkpoint", str(ckpt), "--out", str(dep), *sets]) == 0
    assert len(_rows(dep / "results.csv")) == 1
