"""Experiment runner: scenario behavior, report formats, determinism."""

from __future__ import annotations

import math
from fractions import Fraction
from random import Random

import pytest

from kadsignal.harness import (
    _violations,
    ConfigError,
    ExperimentConfig,
    MetricsReport,
    TrialRecord,
    attach_peer,
    build_sim_network,
    exchange_failure_probability,
    export_report,
    measure_connection,
    measure_session_survival,
    render_csv,
    render_json,
    run_experiment,
    summarize,
)
from kadsignal.overlay import Gateway
from kadsignal.transport import SimNetwork


# -- config validation ---------------------------------------------------


@pytest.mark.parametrize(
    "kwargs",
    [
        {"scenario": "teleport", "n_nodes": 8},
        {"scenario": "lookup_scaling", "n_nodes": 1},
        {"scenario": "lookup_scaling", "n_nodes": 8, "trials": 0},
        {"scenario": "lookup_scaling", "n_nodes": 8, "alpha": 21},
        {"scenario": "lookup_scaling", "n_nodes": 8, "latency_min_ms": 50, "latency_max_ms": 10},
        {"scenario": "lookup_scaling", "n_nodes": 8, "loss_rate": 1.5},
        {"scenario": "lookup_scaling", "n_nodes": 8, "churn_rate": 1.0},
        {"scenario": "session_survival", "n_nodes": 8, "session_duration": 0},
    ],
)
def test_config_rejects_bad_values(kwargs):
    with pytest.raises(ConfigError):
        ExperimentConfig(**kwargs)


# -- analytic failure oracle -----------------------------------------------


def test_failure_probability_matches_exact_enumeration():
    # independent recomputation with exact rationals: an envelope dies only
    # if all four transmissions are lost; the exchange dies if any of its
    # six envelopes dies
    p_envelope = Fraction(1, 20) ** 4
    expected = float(1 - (1 - p_envelope) ** 6)
    # the implementation walks the retry tree in floats; a few ulp drift
    assert math.isclose(exchange_failure_probability(0.05), expected, rel_tol=1e-9)
    assert exchange_failure_probability(0.0) == 0.0
    assert exchange_failure_probability(1.0) == 1.0
    assert exchange_failure_probability(0.05) < 0.05  # the design claim itself


# -- direct measurement ops ---------------------------------------------------


def make_gateways(cfg):
    sim, nodes = build_sim_network(cfg)
    return sim, nodes, [Gateway(n) for n in nodes]


def test_measure_connection_basic_and_deterministic():
    elapsed_runs = []
    for _ in range(2):
        cfg = ExperimentConfig(scenario="connection_time", n_nodes=10, trials=1, seed=42)
        sim, nodes, gws = make_gateways(cfg)
        peer_a = attach_peer(sim, gws[1], "alice")
        peer_b = attach_peer(sim, gws[7], "bob")
        outcome = measure_connection(sim, peer_a, peer_b, trial=0)
        assert outcome.established
        assert outcome.elapsed_ms >= 2 * cfg.latency_min_ms
        assert outcome.session_id is not None and outcome.hops is not None
        elapsed_runs.append(outcome.elapsed_ms)
    assert elapsed_runs[0] == elapsed_runs[1]


def test_measure_connection_unregistered_callee_fails_fast():
    cfg = ExperimentConfig(scenario="connection_time", n_nodes=10, trials=1, seed=43)
    sim, nodes, gws = make_gateways(cfg)
    peer_a = attach_peer(sim, gws[1], "alice")
    ghost = attach_peer(sim, gws[5], "ghost")
    ghost.name = "nobody-by-that-name"
    started = sim.now()
    outcome = measure_connection(sim, peer_a, ghost, trial=0)
    assert not outcome.established
    # failed at resolution, well before the 10 s exchange timeout
    assert outcome.elapsed_ms < 5_000.0
    assert sim.now() - started < 5.0


def test_survival_full_duration_without_churn():
    cfg = ExperimentConfig(scenario="session_survival", n_nodes=10, trials=1, seed=44)
    sim, nodes, gws = make_gateways(cfg)
    peer_a = attach_peer(sim, gws[2], "alice")
    peer_b = attach_peer(sim, gws[8], "bob")
    outcome = measure_connection(sim, peer_a, peer_b)
    survival = measure_session_survival(sim, peer_a, peer_b, outcome.session_id, duration=40.0)
    assert survival == 40.0


def test_survival_churn_sparing_gateways_is_harmless():
    cfg = ExperimentConfig(scenario="session_survival", n_nodes=14, trials=1, seed=45)
    sim, nodes, gws = make_gateways(cfg)
    peer_a = attach_peer(sim, gws[3], "alice")
    peer_b = attach_peer(sim, gws[9], "bob")
    outcome = measure_connection(sim, peer_a, peer_b)
    survival = measure_session_survival(
        sim, peer_a, peer_b, outcome.session_id,
        duration=40.0, churn_rate=0.3, dht_nodes=nodes, rng=Random(7),
    )
    assert survival == 40.0  # the relay path only needs the two gateways
    assert sum(1 for n in nodes if not n.running) == round(0.3 * (len(nodes) - 2))


def test_survival_detects_gateway_death_within_two_windows():
    cfg = ExperimentConfig(scenario="session_survival", n_nodes=10, trials=1, seed=46)
    sim, nodes, gws = make_gateways(cfg)
    peer_a = attach_peer(sim, gws[2], "alice")
    peer_b = attach_peer(sim, gws[6], "bob")
    outcome = measure_connection(sim, peer_a, peer_b)
    kill_at = 7.0
    sim.call_later(kill_at, peer_b.gateway.node.stop)
    survival = measure_session_survival(sim, peer_a, peer_b, outcome.session_id, duration=60.0)
    # keepalives at 0 and 5 s land; windows (10,15] and (15,20] are empty
    assert survival == 20.0
    assert survival <= kill_at + 3 * 5.0  # detected within two windows of the kill


# -- scenarios ----------------------------------------------------------------


def test_connection_time_scenario_all_established_at_zero_loss():
    report = run_experiment(
        ExperimentConfig(scenario="connection_time", n_nodes=12, trials=10, seed=5)
    )
    assert report.aggregates["failure_rate"] == 0.0
    assert all(r.established for r in report.trials)
    floor = 2 * 10.0
    assert all(r.connection_time_ms >= floor for r in report.trials)
    assert report.violations == []


def test_failure_rate_scenario_total_loss_fails_every_trial():
    report = run_experiment(
        ExperimentConfig(scenario="failure_rate", n_nodes=8, trials=3, seed=6, loss_rate=1.0)
    )
    assert report.aggregates["failure_rate"] == 1.0
    assert report.violations == []  # analytic ceiling at loss=1 is 1.0


def test_session_survival_scenario_zero_churn():
    report = run_experiment(
        ExperimentConfig(
            scenario="session_survival", n_nodes=10, trials=5, seed=8, session_duration=30.0
        )
    )
    assert all(r.survival_s == 30.0 for r in report.trials)
    assert all(r.success for r in report.trials)
    assert report.violations == []


def test_lookup_scaling_scenario_within_bounds():
    report = run_experiment(
        ExperimentConfig(scenario="lookup_scaling", n_nodes=32, trials=20, seed=9)
    )
    assert report.aggregates["failure_rate"] == 0.0
    assert report.aggregates["hops"]["median"] <= math.ceil(math.log2(32)) + 2
    assert report.aggregates["hops"]["max"] <= 2 * math.log2(32)
    assert report.violations == []


def test_churn_recovery_scenario_heals():
    report = run_experiment(
        ExperimentConfig(
            scenario="churn_recovery", n_nodes=60, trials=15, seed=10, churn_rate=0.2
        )
    )
    assert report.aggregates["failure_rate"] == 0.0
    assert report.violations == []


# -- reports -------------------------------------------------------------------


def test_reports_are_byte_identical_for_same_seed():
    cfg = dict(scenario="connection_time", n_nodes=10, trials=6, seed=23, loss_rate=0.05)
    first = run_experiment(ExperimentConfig(**cfg))
    second = run_experiment(ExperimentConfig(**cfg))
    assert render_csv(first) == render_csv(second)
    assert render_json(first) == render_json(second)
    third = run_experiment(ExperimentConfig(**{**cfg, "seed": 24}))
    assert render_csv(third) != render_csv(first)


def test_csv_row_count_and_header():
    report = run_experiment(
        ExperimentConfig(scenario="lookup_scaling", n_nodes=8, trials=4, seed=2)
    )
    lines = render_csv(report).splitlines()
    assert len(lines) == 1 + 4 + 1  # header, one per trial, aggregate
    assert lines[0] == (
        "row,trial,established,connection_time_ms,hops,messages,survival_s,success,"
        "failure_rate,connection_ms_min,connection_ms_median,connection_ms_p95,"
        "connection_ms_max,hops_median,hops_max,survival_s_min,survival_s_median,"
        "survival_s_max,messages_total"
    )
    assert lines[1].startswith("trial,0,")
    assert lines[-1].startswith("aggregate,")


def test_empty_report_renders_header_only():
    report = MetricsReport(config={}, trials=[], aggregates=summarize([]), violations=[])
    assert render_csv(report).splitlines() == [render_csv(report).splitlines()[0]]
    assert report.aggregates["failure_rate"] == 0.0


def test_csv_and_json_agree_on_aggregates():
    report = run_experiment(
        ExperimentConfig(scenario="connection_time", n_nodes=10, trials=8, seed=31)
    )
    header, *rows = render_csv(report).splitlines()
    agg_cells = dict(zip(header.split(","), rows[-1].split(",")))
    agg = report.aggregates
    assert float(agg_cells["failure_rate"]) == agg["failure_rate"]
    for stat in ("min", "median", "p95", "max"):
        assert float(agg_cells[f"connection_ms_{stat}"]) == agg["connection_time_ms"][stat]
    assert float(agg_cells["hops_median"]) == agg["hops"]["median"]
    assert int(agg_cells["messages_total"]) == agg["messages_total"]


def test_export_report_writes_both_formats(tmp_path):
    report = run_experiment(
        ExperimentConfig(scenario="lookup_scaling", n_nodes=8, trials=2, seed=3)
    )
    csv_path, json_path = tmp_path / "r.csv", tmp_path / "r.json"
    export_report(report, str(csv_path), format="csv")
    export_report(report, str(json_path), format="json")
    assert csv_path.read_text() == render_csv(report)
    assert json_path.read_text() == render_json(report)
    with pytest.raises(ConfigError):
        export_report(report, str(tmp_path / "r.xml"), format="xml")


# -- invariant checks -----------------------------------------------------------


def fabricated(cfg_kwargs, rows):
    cfg = ExperimentConfig(**cfg_kwargs)
    return _violations(cfg, rows, summarize(rows))


def test_violation_flagged_for_impossible_connection_time():
    rows = [TrialRecord(trial=0, established=True, connection_time_ms=5.0, hops=1)]
    found = fabricated(dict(scenario="connection_time", n_nodes=8, trials=1), rows)
    assert any("physical floor" in v for v in found)


def test_violation_flagged_for_excess_failure_rate_at_zero_loss():
    rows = [TrialRecord(trial=0, established=False, connection_time_ms=None)]
    found = fabricated(dict(scenario="connection_time", n_nodes=8, trials=1), rows)
    assert any("failure rate" in v for v in found)


def test_violation_flagged_for_hop_blowup():
    rows = [TrialRecord(trial=i, hops=40, success=True) for i in range(3)]
    found = fabricated(dict(scenario="lookup_scaling", n_nodes=8, trials=3), rows)
    assert any("hops" in v for v in found)


def test_violation_flagged_for_missed_oracle():
    rows = [TrialRecord(trial=0, hops=2, success=False)]
    found = fabricated(dict(scenario="churn_recovery", n_nodes=8, trials=1), rows)
    assert any("k-closest" in v for v in found)


def test_no_violations_for_clean_rows():
    rows = [TrialRecord(trial=0, established=True, connection_time_ms=120.0, hops=2)]
    assert fabricated(dict(scenario="connection_time", n_nodes=8, trials=1), rows) == []


# -- network builder ------------------------------------------------------------


def test_build_applies_loss_only_after_bootstrap():
    cfg = ExperimentConfig(scenario="connection_time", n_nodes=8, trials=1, seed=60, loss_rate=1.0)
    sim, nodes = build_sim_network(cfg)
    # the join phase succeeded despite loss_rate=1.0 in the config
    assert all(n.table.contact_count() >= 1 for n in nodes)
    assert sim.config.loss_rate == 1.0
    assert isinstance(sim, SimNetwork)
