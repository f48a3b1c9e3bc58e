import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from remote_tube_mpc.experiment import (
    CSV_COLUMNS, ScenarioConfig, average_tracking_error, compute_metrics, export, load_config,
    metrics_from_csv, quartiles, read_trace_csv, run_scenario, run_single, solve_time_histogram,
    sweep_summary,
)
from remote_tube_mpc.geometry import support
from remote_tube_mpc.mpc import Variant


@pytest.fixture(scope="module")
def rt_suite(suites):
    return suites.suite("rt")


def short(suite, **kw):
    return replace(suite, cfg=replace(suite.cfg, **kw))


@pytest.fixture(scope="module")
def lossy_trace(rt_suite):
    return run_single(short(rt_suite, horizon=150), 5, 0.5, 3)


def test_metric_examples():
    x_r = np.array([0.5, 0, 0, 0])
    assert average_tracking_error(np.tile(x_r, (10, 1)), x_r) == 0.0
    delta = np.array([0.3, -0.4, 0.0, 0.0])
    assert average_tracking_error(np.tile(x_r + delta, (7, 1)), x_r) == pytest.approx(0.5)


def test_quartiles_sort_oracle():
    vals = [7.0, 1.0, 3.0, 9.0, 5.0, 2.0, 8.0, 4.0, 6.0]
    q = quartiles(vals)
    s = sorted(vals)
    assert (q["min"], q["q1"], q["median"], q["q3"], q["max"]) == (s[0], s[2], s[4], s[6], s[8])
    assert quartiles([]) == {}


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 10), min_size=1, max_size=40))
def test_quartiles_linear_interpolation(vals):
    s = np.sort(vals)
    n = len(s)
    for key, p in (("q1", 0.25), ("median", 0.5), ("q3", 0.75)):
        pos = (n - 1) * p
        lo, hi = int(np.floor(pos)), int(np.ceil(pos))
        want = s[lo] + (s[hi] - s[lo]) * (pos - lo)
        assert quartiles(vals)[key] == pytest.approx(want, abs=1e-12)


def test_histogram_bins():
    h = solve_time_histogram([0.1, 0.2, 0.6, 1.4, 3.0])
    assert h["bin_width_ms"] == 0.5
    assert sum(h["counts"]) == 5
    assert h["counts"][:3] == [2, 1, 1]
    assert solve_time_histogram([])["n"] == 0


def test_config_validation(tmp_path):
    with pytest.raises(ValueError):
        ScenarioConfig(rhos=[1.0])
    with pytest.raises(ValueError):
        ScenarioConfig(horizon=0)
    with pytest.raises(ValueError):
        ScenarioConfig(plant="quantum")
    with pytest.raises(ValueError):
        ScenarioConfig.from_dict({"bogus": 1})
    path = tmp_path / "c.yaml"
    path.write_text("variant: ert\nrhos: [0.0, 0.2]\nseeds: 2\nhorizon: 10\n")
    cfg = load_config(path)
    assert cfg.variant is Variant.ERT and cfg.rhos == [0.0, 0.2] and cfg.seeds == 2
    assert ScenarioConfig.from_dict(cfg.to_dict()) == cfg


def test_loss_free_protocol(rt_suite):
    tr = run_single(short(rt_suite, horizon=40), 0, 0.0, 0)
    np.testing.assert_array_equal(tr.s, tr.k)
    assert np.all(tr.Theta == 1)


def test_protocol_accounting(lossy_trace):
    tr = lossy_trace
    assert len(tr) == 150
    assert np.all(tr.theta[tr.Theta == 1] == 1)
    np.testing.assert_array_equal(tr.s == tr.k, tr.Theta == 1)
    assert 0 < tr.Theta.sum() < len(tr)
    assert np.all(np.diff(tr.q) >= 0)


def test_summary_recomputable(lossy_trace, rt_suite):
    again = compute_metrics(lossy_trace, rt_suite.synthesis)
    assert again == lossy_trace.summary
    assert lossy_trace.summary["infeasible_steps"] == 0
    assert lossy_trace.summary["tube_violations"] == 0
    assert lossy_trace.summary["constraint_violation_steps"] == 0


def test_compute_metrics_empty_rejected(lossy_trace):
    empty = replace(lossy_trace, k=lossy_trace.k[:0], x=lossy_trace.x[:0])
    with pytest.raises(ValueError):
        compute_metrics(empty)


def test_loss_free_converges_to_reference(rt_suite):
    tr = run_single(short(rt_suite, horizon=500), 0, 0.0, 0)
    err = np.linalg.norm(tr.x - tr.x_r, axis=1)
    assert err[250:].mean() < err[:250].mean()
    Z = rt_suite.synthesis.sets.Z
    radius = max(support(Z, [1, 0, 0, 0]), support(Z, [-1, 0, 0, 0]))
    assert abs(tr.x[-1, 0] - 0.5) <= radius + 1e-3


def test_csv_roundtrip(lossy_trace, tmp_path):
    out = export([lossy_trace], tmp_path)
    path = out / "runs" / f"{lossy_trace.name}.csv"
    data = read_trace_csv(path)
    assert len(data["k"]) == len(lossy_trace)
    assert list(data) == CSV_COLUMNS
    x = np.column_stack([data[f"x{i}"] for i in range(4)])
    np.testing.assert_array_equal(x, lossy_trace.x)
    got = metrics_from_csv(path, lossy_trace.x_r)
    assert abs(got - lossy_trace.summary["avg_tracking_error"]) <= 1e-12
    summary = json.loads((out / "summary.json").read_text())
    assert summary["per_rho"]["0.50"]["runs"] == 1
    hist = json.loads((out / "solve_time_histogram.json").read_text())
    assert hist["n"] == len(lossy_trace)
    assert len(np.loadtxt(out / "timing" / f"{lossy_trace.name}.txt")) == len(lossy_trace)


def test_export_empty(tmp_path):
    out = export([], tmp_path / "empty")
    assert json.loads((out / "summary.json").read_text()) == {}
    assert (out / "solve_time_histogram.json").exists()


def test_export_io_error(tmp_path, lossy_trace):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="file"):
        export([lossy_trace], blocker / "sub")


def test_run_deterministic(rt_suite, tmp_path):
    s = short(rt_suite, horizon=60)
    a = export([run_single(s, 3, 0.3, 1)], tmp_path / "a")
    b = export([run_single(s, 3, 0.3, 1)], tmp_path / "b")
    name = next((a / "runs").iterdir()).name
    assert (a / "runs" / name).read_bytes() == (b / "runs" / name).read_bytes()
    c = run_single(short(rt_suite, horizon=60, master_seed=1), 3, 0.3, 1)
    assert not np.array_equal(c.theta, run_single(s, 3, 0.3, 1).theta)


def test_run_scenario_writes_outputs(rt_suite, tmp_path):
    cfg = replace(rt_suite.cfg, rhos=[0.0, 0.4], seeds=2, horizon=20, out_dir=str(tmp_path))
    traces = run_scenario(cfg, replace(rt_suite, cfg=cfg))
    assert len(traces) == 4
    assert len(list((tmp_path / "runs").glob("*.csv"))) == 4
    summary = sweep_summary(traces)
    assert set(summary["per_rho"]) == {"0.00", "0.40"}


def test_nonlinear_plant_run(rt_suite):
    tr = run_single(short(rt_suite, plant="nonlinear", horizon=100), 2, 0.2, 0)
    assert len(tr) == 100 and not tr.truncated
    assert tr.summary["infeasible_steps"] == 0


def test_unforced_start(rt_suite):
    tr = run_single(short(rt_suite, forced_init=False, horizon=60), 1, 0.1, 0)
    assert len(tr) == 60
    # nothing is applied before the first consistent packet
    first = int(np.argmax(tr.Theta == 1))
    assert np.all(tr.u_n[:first] == 0.0)
