from .engine import SimTrace, physical_barriers, proportional_to_goal, run_closed_loop
from .io import (
    RolloutDumper,
    read_trace_csv,
    render_svg,
    trace_header,
    write_metrics_json,
    write_metrics_table,
    write_svg,
    write_trace_csv,
)
from .metrics import GoalMetrics, Metrics, compare_runs, evaluate_metrics
from .scenario import (
    Scenario,
    ScenarioError,
    load_scenario,
    packaged_scenario,
    packaged_scenario_names,
    parse_scenario,
)
