import copy
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from safe_mppi.dynamics import NumericalBlowUp
from safe_mppi.qp import FilterInfeasible
from safe_mppi.simkit import (
    RolloutDumper,
    ScenarioError,
    SimTrace,
    compare_runs,
    evaluate_metrics,
    load_scenario,
    packaged_scenario,
    packaged_scenario_names,
    parse_scenario,
    physical_barriers,
    read_trace_csv,
    render_svg,
    run_closed_loop,
    trace_header,
    write_trace_csv,
)
from safe_mppi.simkit import engine

MINIMAL = {
    "spec_version": 1,
    "name": "minimal",
    "model": "single_integrator_2d",
    "initial_state": [0.0, 0.0],
    "duration": 2.0,
    "dt": 0.1,
    "tasks": {"goals": [{"name": "g", "x": 1.0, "y": 1.0, "radius": 0.2}]},
    "nominal_controller": {"type": "proportional_to_goal", "gain": 2.0},
}


def minimal(**changes):
    raw = copy.deepcopy(MINIMAL)
    raw.update(changes)
    return raw


def short(name, duration=0.5, samples=256, **extra):
    sc = packaged_scenario(name)
    over = {"duration": duration, **extra}
    if sc.planner is not None:
        over["planner__samples"] = samples
    return sc.with_overrides(**over)


# --- validation ------------------------------------------------------------------

BAD = [
    ("version", {"spec_version": 2}),
    ("model", {"model": "bicycle"}),
    ("state length", {"initial_state": [0.0]}),
    ("duration", {"duration": -1.0}),
    ("dt", {"dt": 0.0}),
    ("grid", {"duration": 1.05, "dt": 0.1}),
    ("noise", {"plant_noise": -0.1}),
    ("window", {"tasks": {"goals": [{"x": 1, "y": 1, "radius": 0.2, "window": [3, 1]}]}}),
    ("radius", {"tasks": {"goals": [{"x": 1, "y": 1, "radius": -0.2}]}}),
    ("combination", {"tasks": {"combination": "max", "goals": [{"x": 1, "y": 1, "radius": 0.2}]}}),
    ("mppi without planner", {"nominal_controller": "mppi_first_control"}),
    ("planner without tasks", {"tasks": {}, "nominal_controller": "zero",
                               "planner": {"horizon": 5, "samples": 10}}),
    ("noise std", {"planner": {"horizon": 5, "samples": 10, "noise_std": [1.0]}}),
    ("variant", {"filter": {"variant": "magic"}}),
    ("stochastic without noise", {"filter": {"variant": "stochastic"}}),
    ("robust without disturbance", {"filter": {"variant": "robust"}}),
    ("estimator", {"estimator": "particle"}),
    ("sensor", {"sensor": {"C": [[1.0, 0.0, 0.0]]}}),
    ("rank", {"sensor": {"C": [[1.0, 0.0]]}}),
    ("covariance", {"initial_covariance": [[1.0]]}),
]


@pytest.mark.parametrize("label,change", BAD, ids=[b[0] for b in BAD])
def test_invalid_scenarios_rejected(label, change):
    with pytest.raises(ScenarioError):
        parse_scenario(minimal(**change))


def test_minimal_scenario_validates():
    sc = parse_scenario(minimal())
    assert sc.steps == 20
    assert sc.planner is None
    assert sc.filter["variant"] == "none"


def test_packaged_scenarios_validate():
    names = packaged_scenario_names()
    assert {"reach_avoid", "mppi_cbf_scbf", "mppi_cbf_mppi", "mppi_cbf_combined"} <= set(names)
    for name in names:
        packaged_scenario(name)


def test_missing_file(tmp_path):
    with pytest.raises(ScenarioError):
        load_scenario(tmp_path / "nope.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ScenarioError):
        load_scenario(bad)


def test_overrides_revalidate():
    sc = packaged_scenario("reach_avoid")
    assert sc.with_overrides(planner__samples=123).planner.samples == 123
    with pytest.raises(ScenarioError):
        sc.with_overrides(dt=-1.0)


# --- closed loop ---------------------------------------------------------------------

def test_proportional_controller_reaches_goal():
    sc = parse_scenario(minimal(duration=5.0))
    trace = run_closed_loop(sc, seed=0)
    m = evaluate_metrics(trace, sc)
    assert m.terminal_distance < 0.2
    assert m.goals[0].first_entry_time is not None


def test_zero_control_holds_still():
    sc = parse_scenario(minimal(nominal_controller="zero", initial_state=[0.3, -0.4]))
    trace = run_closed_loop(sc, seed=0)
    states = trace.array("state")
    assert np.all(states == np.array([0.3, -0.4]))


def test_trace_shape_and_time_grid():
    sc = parse_scenario(minimal())
    trace = run_closed_loop(sc, seed=0)
    assert len(trace) == 21
    lengths = {len(getattr(trace, c)) for c in
               ("time", "state", "estimate", "measurement", "u_nom", "u", "barrier", "stage_costs",
                "mppi_cost", "events")}
    assert lengths == {21}
    assert np.all(np.diff(trace.time) > 0)
    assert np.all(np.isnan(trace.u[-1]))


def test_filter_none_applies_nominal_exactly():
    trace = run_closed_loop(short("mppi_cbf_mppi", duration=0.3), seed=2)
    for u_nom, u in zip(trace.u_nom[:-1], trace.u[:-1]):
        assert u.tobytes() == u_nom.tobytes()


def test_filter_changes_unsafe_nominal():
    raw = minimal(tasks={"goals": [{"x": 4.0, "y": 0.0, "radius": 0.2}],
                         "obstacles": [{"x": 2.0, "y": 0.0, "radius": 0.5}]},
                  filter={"variant": "vanilla", "gamma": 1.0}, duration=6.0)
    sc = parse_scenario(raw)
    trace = run_closed_loop(sc, seed=0)
    m = evaluate_metrics(trace, sc)
    assert m.min_barrier >= 0
    assert any(not np.array_equal(a, b) for a, b in zip(trace.u_nom[:-1], trace.u[:-1]))


def test_history_holds_previous_estimates(monkeypatch):
    seen = []
    original = engine.MppiPlanner.plan

    def spy(self, x, history, t, **kw):
        seen.append((len(history.states), t, np.array(x)))
        return original(self, x, history, t, **kw)

    monkeypatch.setattr(engine.MppiPlanner, "plan", spy)
    trace = run_closed_loop(short("reach_avoid", duration=0.3), seed=0)
    assert [s[0] for s in seen] == list(range(len(trace) - 1))
    for k, (_, t, x) in enumerate(seen):
        assert t == pytest.approx(trace.time[k])
        np.testing.assert_array_equal(x, trace.estimate[k])


def test_infeasible_filter_falls_back_to_zero(monkeypatch):
    def refuse(*args, **kwargs):
        raise FilterInfeasible("no room")

    monkeypatch.setattr(engine, "cbf_filter", refuse)
    raw = minimal(tasks={"goals": [{"x": 4.0, "y": 0.0, "radius": 0.2}],
                         "obstacles": [{"x": 2.0, "y": 0.0, "radius": 0.5}]},
                  filter={"variant": "vanilla"})
    sc = parse_scenario(raw)
    trace = run_closed_loop(sc, seed=0)
    assert all(np.all(u == 0) for u in trace.u[:-1])
    assert trace.infeasible_steps == sc.steps
    assert evaluate_metrics(trace, sc).infeasible_steps == sc.steps


def test_blow_up_marks_trace_diverged(monkeypatch):
    calls = {"n": 0}

    def explode(dyn, x, u):
        calls["n"] += 1
        if calls["n"] > 3:
            raise NumericalBlowUp(np.array([np.inf, 0.0]))
        return x

    monkeypatch.setattr(engine, "step_euler", explode)
    trace = run_closed_loop(parse_scenario(minimal()), seed=0)
    assert trace.diverged
    assert len(trace) == 4
    assert any(e.startswith("diverged") for e in trace.events[-1])


def test_estimator_in_the_loop():
    raw = minimal(estimator="ekf", sensor={"C": [[1, 0], [0, 1]], "D": [[0.02, 0], [0, 0.02]]},
                  initial_covariance=[0.01, 0.01], plant_noise=0.05, duration=3.0)
    sc = parse_scenario(raw)
    trace = run_closed_loop(sc, seed=1)
    err = trace.array("state") - trace.array("estimate")
    assert 0 < np.abs(err).max() < 0.5
    assert not np.array_equal(trace.array("measurement"), trace.array("state"))


def test_seed_changes_stochastic_run():
    sc = short("mppi_cbf_scbf", duration=1.0)
    a = run_closed_loop(sc, seed=0).array("state")
    b = run_closed_loop(sc, seed=1).array("state")
    assert not np.array_equal(a, b)


# --- determinism --------------------------------------------------------------------------

@pytest.mark.parametrize("name", ["reach_avoid", "mppi_cbf_combined"])
def test_trace_csv_bit_identical(tmp_path, name):
    sc = short(name, duration=0.4, samples=512)
    paths = []
    for i, workers in enumerate((1, 1, 8)):
        paths.append(write_trace_csv(run_closed_loop(sc, seed=3, workers=workers), tmp_path / f"t{i}.csv"))
    blobs = [p.read_bytes() for p in paths]
    assert blobs[0] == blobs[1] == blobs[2]


def test_compare_identical_scenarios_identical_rows():
    sc = parse_scenario(minimal(plant_noise=0.1))
    rows = compare_runs([sc, sc], seeds=[0, 1])
    assert len(rows) == 4
    assert rows[0] == rows[2] and rows[1] == rows[3]


# --- metrics --------------------------------------------------------------------------------

def synthetic_trace(sc, positions, dt=None):
    dt = sc.dt if dt is None else dt
    trace = SimTrace(sc.model.n, sc.model.m, barrier_names=[o.name for o in sc.obstacles])
    for k, p in enumerate(np.asarray(positions, dtype=float)):
        trace.time.append(k * dt)
        trace.state.append(p)
        trace.estimate.append(p)
        trace.barrier.append(physical_barriers(sc, p))
        trace.events.append([])
    return trace


def test_goal_never_reached():
    sc = parse_scenario(minimal())
    m = evaluate_metrics(synthetic_trace(sc, [[5.0, 5.0]] * 21), sc)
    assert m.goals[0].first_entry_time is None
    assert m.goals[0].in_window is False


def test_straight_pass_clearance():
    raw = minimal(tasks={"goals": [{"x": 5.0, "y": 0.0, "radius": 0.2}],
                         "obstacles": [{"x": 0.0, "y": 2.0, "radius": 0.5}]})
    sc = parse_scenario(raw)
    xs = np.linspace(-2.0, 2.0, 21)
    m = evaluate_metrics(synthetic_trace(sc, np.column_stack([xs, np.zeros(21)])), sc)
    assert m.min_clearance == pytest.approx(1.5, abs=1e-12)


def test_entry_outside_window_is_flagged():
    raw = minimal(tasks={"goals": [{"x": 1.0, "y": 0.0, "radius": 0.2, "window": [0.0, 0.5]}]})
    sc = parse_scenario(raw)
    positions = [[0.0, 0.0]] * 10 + [[1.0, 0.0]] * 11  # arrives at t = 1.0
    m = evaluate_metrics(synthetic_trace(sc, positions), sc)
    assert m.goals[0].first_entry_time == pytest.approx(1.0)
    assert m.goals[0].in_window is False
    positions = [[0.0, 0.0]] * 5 + [[1.0, 0.0]] * 16  # arrives at t = 0.5, the window edge
    assert evaluate_metrics(synthetic_trace(sc, positions), sc).goals[0].in_window is True


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.floats(-3, 3), st.floats(-3, 3)), min_size=1, max_size=30))
def test_barrier_sign_matches_clearance_sign(points):
    raw = minimal(tasks={"goals": [{"x": 5.0, "y": 0.0, "radius": 0.2}],
                         "obstacles": [{"x": 0.0, "y": 0.0, "radius": 1.0},
                                       {"x": 1.5, "y": -1.0, "radius": 0.4}]})
    sc = parse_scenario(raw)
    m = evaluate_metrics(synthetic_trace(sc, points), sc)
    assert (m.min_barrier < 0) == (m.min_clearance < 0)


def test_metrics_use_last_goal_for_terminal_distance():
    sc = packaged_scenario("reach_avoid")
    m = evaluate_metrics(synthetic_trace(sc, [[0.0, 0.0], [5.5, 1.0]]), sc)
    assert m.terminal_distance == pytest.approx(1.0)
    assert [g.name for g in m.goals] == ["g1", "g2", "g3"]


# --- files ------------------------------------------------------------------------------------

def test_trace_csv_golden_header(tmp_path):
    sc = short("reach_avoid", duration=0.2, samples=64)
    trace = run_closed_loop(sc, seed=0)
    header, rows = read_trace_csv(write_trace_csv(trace, tmp_path / "trace.csv"))
    assert header == ["time", "x0", "x1", "xhat0", "xhat1", "u_nom0", "u_nom1", "u0", "u1", "h_o1", "events"]
    assert header == trace_header(trace)
    assert len(rows) == sc.steps + 1
    assert float(rows[-1][0]) == pytest.approx(0.2)


def test_svg_golden_element_count():
    sc = short("reach_avoid", duration=0.2, samples=64)
    svg = render_svg(sc, [run_closed_loop(sc, seed=0)], labels=["run"])
    # 1 obstacle + 3 goals + start marker; one trajectory; 3 window labels + run label + start
    assert svg.count("<circle") == 5
    assert svg.count("<polyline") == 1
    assert svg.count("<text") == 5
    assert "[0, 3.5] s" in svg and "[3.6, 5] s" in svg and "[5.1, 10] s" in svg
    assert svg.startswith("<svg") and svg.rstrip().endswith("</svg>")


def test_rollout_dumper_writes_one_file_per_cycle(tmp_path):
    sc = short("reach_avoid", duration=0.2, samples=64)
    dumper = RolloutDumper(tmp_path / "rollouts")
    run_closed_loop(sc, seed=0, rollout_sink=dumper)
    files = sorted((tmp_path / "rollouts").glob("rollouts_*.npz"))
    assert len(files) == sc.steps
    with np.load(files[0]) as data:
        assert data["states"].shape == (64, sc.planner.horizon + 1, 2)
        assert data["weights"].shape == (64,)
        assert data["weights"].sum() == pytest.approx(1.0)


def test_scenario_round_trip(tmp_path):
    sc = packaged_scenario("mppi_cbf_combined")
    path = tmp_path / "s.json"
    path.write_text(json.dumps(sc.raw))
    again = load_scenario(path)
    assert again.raw == sc.raw
    assert again.filter == sc.filter
