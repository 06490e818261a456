"""
Tests for scenario configs, experiment runners, result files and the command line
"""
import csv
import json
import os

import pytest

from harness.experiments import (KeyWorkload, build_overlay, build_simulator, run_churn, run_custom, run_experiment,
                                 run_handover_scenario, run_lookup_scaling)
from harness.report import TIMESERIES_COLUMNS, emit_report
from harness.scenario import METRICS_COLUMNS, ConfigError, MetricsRow, ScenarioConfig, load_config, save_config
from main import main
from utils.trace import CHUNK_TRACE_COLUMNS

CONFIG_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "config")


def read_rows(path):
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.reader(f))


def test_defaults_are_valid():
    cfg = ScenarioConfig().validate()
    assert cfg.maintenance_rounds == cfg.m + 4
    assert ScenarioConfig(stabilize_rounds=3).maintenance_rounds == 3


@pytest.mark.parametrize("fields", [
    {"loss_prob": 1.5},
    {"m": 0},
    {"node_counts": []},
    {"node_counts": [300], "m": 8},
    {"query_deadline_ms": 0},
    {"t_switch_ms": 50000},
    {"pointer_fanout": 5},
    {"stale_finger_fraction": -0.1},
    {"experiment": "ping"},
    {"rto_ms": -5},
])
def test_invalid_fields_are_rejected(fields):
    with pytest.raises(ConfigError):
        ScenarioConfig.from_dict(fields)


def test_unknown_fields_are_rejected():
    with pytest.raises(ConfigError) as excinfo:
        ScenarioConfig.from_dict({"api_key": "x"})
    assert "api_key" in str(excinfo.value)


def test_config_file_round_trip(tmp_path):
    cfg = ScenarioConfig(experiment="custom", node_counts=[40], loss_prob=0.01,
                         churn_schedule=[{"time_ms": 500, "action": "remove", "count": 4, "graceful": False}])
    path = tmp_path / "custom.json"
    save_config(cfg, str(path))
    assert load_config(str(path)) == cfg


def test_broken_json_is_a_config_error(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{not json", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_config(str(path))


@pytest.mark.parametrize("name,experiment", [
    ("handover.json", "handover"), ("handover_churn.json", "handover"), ("lookup_scaling.json", "lookup_scaling"),
    ("churn.json", "churn"), ("churn_r1.json", "churn"), ("custom.json", "custom"),
])
def test_shipped_scenarios_load(name, experiment):
    assert load_config(os.path.join(CONFIG_DIR, name)).experiment == experiment


@pytest.mark.parametrize("name,values_per_key", [
    ("lookup_scaling.json", 1), ("lookup_values_2.json", 2), ("lookup_values_3.json", 3), ("lookup_values_4.json", 4),
])
def test_lookup_sweep_configs(name, values_per_key):
    cfg = load_config(os.path.join(CONFIG_DIR, name))
    assert cfg.values_per_key == values_per_key
    assert (cfg.loss_prob, cfg.stale_finger_fraction, cfg.seeds) == (0.01, 0.1, 20)
    assert cfg.node_counts == [50, 100, 200, 300, 400]


def test_metrics_row_counts_and_formats():
    row = MetricsRow("lookup_scaling", 100)
    row.record("ok", 3, 40)
    row.record("ok", 4, 60)
    row.record("timeout")
    row.record("failed")
    assert row.queries_failed == 1
    assert row.as_csv_row() == ["lookup_scaling", 100, 4, 2, 1, "50.00", "3.500", "50.000"]
    other = MetricsRow("lookup_scaling", 100)
    other.record("ok", 1, 10)
    row.merge(other)
    assert row.queries_issued == 5 and row.hops == [3, 4, 1]
    assert MetricsRow("churn", 1).success_pct == 0.0


def test_bundled_handover_scenario():
    outcome = run_handover_scenario(ScenarioConfig())
    report = outcome.report
    assert report.switched_at == 30000
    assert abs(report.measured_latency - 50) <= 1
    assert report.lost_bytes == 0
    totals = [total for _, total in outcome.series]
    assert totals == sorted(totals) and totals[-1] > 0
    assert outcome.row.queries_issued >= 5
    assert outcome.row.queries_succeeded == outcome.row.queries_issued
    directions = {row[1] for row in outcome.trace.rows}
    assert directions == {"MN->CN", "CN->MN"}


def test_sequential_handover_scenario():
    outcome = run_handover_scenario(ScenarioConfig(bundling=False))
    assert abs(outcome.report.measured_latency - 110) <= 1
    assert outcome.report.lost_bytes == 0
    first_asconf = outcome.trace.of_kind("ASCONF")[0]
    assert first_asconf[0] == 30000 and first_asconf[3] == "ADD_IP"


def test_zero_duration_handover_scenario():
    outcome = run_handover_scenario(ScenarioConfig(duration_ms=0))
    assert outcome.series == []
    assert outcome.row.queries_issued == 0
    assert outcome.report.lost_bytes == 0
    assert outcome.ring_size == 16


def test_handover_scenario_with_background_churn():
    cfg = ScenarioConfig(node_counts=[48],
                         churn_schedule=[{"time_ms": 15000, "action": "remove", "count": 12, "graceful": False},
                                         {"time_ms": 35000, "action": "add", "count": 6}])
    outcome = run_handover_scenario(cfg)
    assert outcome.ring_size == 42
    assert abs(outcome.report.measured_latency - 50) <= 1
    assert outcome.report.lost_bytes == 0
    totals = [total for _, total in outcome.series]
    assert totals == sorted(totals) and totals[-1] > 0
    assert outcome.row.queries_succeeded >= 1
    with pytest.raises(ConfigError):
        run_handover_scenario(ScenarioConfig(churn_schedule=[{"time_ms": 100, "action": "remove", "count": 16}]))


def test_handover_runner_rejects_other_experiments():
    with pytest.raises(ConfigError):
        run_handover_scenario(ScenarioConfig(experiment="churn"))


def test_lookup_scaling_small_rings():
    cfg = ScenarioConfig(experiment="lookup_scaling", node_counts=[16, 32], queries_per_point=10, seeds=2)
    rows = run_lookup_scaling(cfg)
    assert [row.node_count for row in rows] == [16, 32]
    for row in rows:
        assert row.queries_issued == 20
        assert row.success_pct == 100.0
        assert row.hops


def test_lookups_return_every_value_of_a_key():
    cfg = ScenarioConfig(experiment="lookup_scaling", node_counts=[32], queries_per_point=10, values_per_key=3)
    row = run_lookup_scaling(cfg)[0]
    assert row.queries_issued == 10
    assert row.success_pct == 100.0


def test_rings_and_keys_depend_on_the_seed():
    cfg = ScenarioConfig(experiment="lookup_scaling", node_counts=[16])
    first, second = (build_overlay(cfg, build_simulator(cfg, seed), 16) for seed in (1, 2))
    assert first.live_ids() != second.live_ids()
    first_keys = KeyWorkload(first, 5, 1, first.sim.stream("keys")).keys
    second_keys = KeyWorkload(second, 5, 1, second.sim.stream("keys")).keys
    assert first_keys != second_keys


def test_churn_ladder_small():
    cfg = ScenarioConfig(experiment="churn", m=12, node_counts=[64, 48, 32], queries_per_point=20)
    rows = run_churn(cfg)
    assert [row.node_count for row in rows] == [64, 48, 32]
    assert all(row.success_pct >= 90.0 for row in rows)
    unmaintained = run_churn(cfg, stabilize=False)
    assert [row.queries_issued for row in unmaintained] == [20, 20, 20]


def test_churn_with_a_single_successor():
    cfg = ScenarioConfig(experiment="churn", m=12, node_counts=[48, 24], queries_per_point=20,
                         successor_list_len=1, pointer_fanout=1)
    rows = run_churn(cfg)
    assert [row.node_count for row in rows] == [48, 24]
    assert all(row.queries_issued == 20 for row in rows)


def test_graceful_churn_keeps_every_value():
    cfg = ScenarioConfig(experiment="churn", m=12, node_counts=[64, 48, 32], queries_per_point=20,
                         graceful=True, refresh_values=False)
    rows = run_churn(cfg)
    assert [row.success_pct for row in rows] == [100.0, 100.0, 100.0]


def test_failures_lose_values_without_refresh():
    refreshed = ScenarioConfig(experiment="churn", m=12, node_counts=[64, 32], queries_per_point=40)
    stale = ScenarioConfig(experiment="churn", m=12, node_counts=[64, 32], queries_per_point=40,
                           refresh_values=False)
    kept, lost = run_churn(refreshed), run_churn(stale)
    assert kept[-1].success_pct >= 90.0
    assert lost[0].success_pct == kept[0].success_pct
    assert lost[-1].success_pct < kept[-1].success_pct
    assert lost[-1].queries_failed > 0


def test_longer_successor_lists_survive_failures_without_maintenance():
    base = dict(experiment="churn", m=12, node_counts=[64, 32], queries_per_point=40)
    single = run_churn(ScenarioConfig(successor_list_len=1, pointer_fanout=1, **base), stabilize=False)
    four = run_churn(ScenarioConfig(successor_list_len=4, **base), stabilize=False)
    assert single[-1].success_pct < four[-1].success_pct


def test_custom_schedule():
    cfg = ScenarioConfig(experiment="custom", m=12, node_counts=[40], queries_per_point=10,
                         churn_schedule=[{"time_ms": 1000, "action": "remove", "count": 10},
                                         {"time_ms": 2000, "action": "add", "count": 5, "graceful": False}])
    rows = run_custom(cfg)
    assert [row.node_count for row in rows] == [40, 30, 35]
    with pytest.raises(ConfigError):
        run_custom(ScenarioConfig(experiment="custom", node_counts=[5],
                                  churn_schedule=[{"time_ms": 0, "action": "remove", "count": 5}]))


def test_emit_report_writes_all_files(tmp_path):
    rows = [MetricsRow("lookup_scaling", 16, 1, 1, 0, [2], [30])]
    written = emit_report(rows, [], str(tmp_path), meta={"experiment": "lookup_scaling"})
    assert sorted(os.path.basename(p) for p in written) == [
        "chunk_trace.csv", "metrics.csv", "run_meta.json", "timeseries.csv"]
    assert read_rows(tmp_path / "metrics.csv") == [
        METRICS_COLUMNS, ["lookup_scaling", "16", "1", "1", "0", "100.00", "2.000", "30.000"]]
    assert read_rows(tmp_path / "chunk_trace.csv") == [CHUNK_TRACE_COLUMNS]
    assert read_rows(tmp_path / "timeseries.csv") == [TIMESERIES_COLUMNS]


def test_reruns_are_byte_identical(tmp_path):
    cfg = ScenarioConfig(seed=3)
    for run in ("first", "second"):
        rows, series, trace, _ = run_experiment(cfg)
        emit_report(rows, series, str(tmp_path / run), trace)
    for name in ("metrics.csv", "timeseries.csv", "chunk_trace.csv"):
        assert (tmp_path / "first" / name).read_bytes() == (tmp_path / "second" / name).read_bytes()


def test_cli_runs_a_scenario(tmp_path):
    config = tmp_path / "lookup.json"
    save_config(ScenarioConfig(experiment="lookup_scaling", node_counts=[16], queries_per_point=5), str(config))
    out = tmp_path / "out"
    assert main(["lookup", "--config", str(config), "--out", str(out), "--seed", "9", "--quiet"]) == 0
    meta = json.loads((out / "run_meta.json").read_text(encoding="utf-8"))
    assert meta["calibrated_reconstruction"] is True
    assert meta["config"]["seed"] == 9
    assert read_rows(out / "metrics.csv")[1][:3] == ["lookup_scaling", "16", "5"]


def test_cli_exit_codes(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"experiment": "churn", "loss_prob": 2}), encoding="utf-8")
    assert main(["churn", "--config", str(bad), "--out", str(tmp_path / "o"), "--quiet"]) == 2
    mismatch = tmp_path / "mismatch.json"
    save_config(ScenarioConfig(experiment="churn"), str(mismatch))
    assert main(["lookup", "--config", str(mismatch), "--out", str(tmp_path / "o"), "--quiet"]) == 2
    assert main(["custom", "--config", str(tmp_path / "missing.json"), "--quiet"]) == 3
    blocker = tmp_path / "file.txt"
    blocker.write_text("not a directory", encoding="utf-8")
    lookup = tmp_path / "lookup.json"
    save_config(ScenarioConfig(experiment="lookup_scaling", node_counts=[8], queries_per_point=2), str(lookup))
    assert main(["lookup", "--config", str(lookup), "--out", str(blocker / "out"), "--quiet"]) == 3


@pytest.mark.slow
def test_delivery_never_decreases_across_seeds():
    for seed in range(1, 21):
        outcome = run_handover_scenario(ScenarioConfig(seed=seed, loss_prob=0.001))
        totals = [total for _, total in outcome.series]
        assert totals == sorted(totals), seed


@pytest.mark.slow
def test_lookup_success_with_loss_and_stale_fingers():
    cfg = ScenarioConfig(experiment="lookup_scaling", node_counts=[100, 200, 300, 400], queries_per_point=25,
                         seeds=20, loss_prob=0.01, stale_finger_fraction=0.1)
    for row in run_lookup_scaling(cfg):
        assert row.success_pct >= 95.0, row.node_count


@pytest.mark.slow
def test_churn_ladder_keeps_queries_answered():
    cfg = load_config(os.path.join(CONFIG_DIR, "churn.json"))
    rows = run_churn(cfg)
    assert [row.node_count for row in rows] == [400, 300, 200, 100]
    for row in rows:
        assert row.success_pct >= 90.0, row.node_count
