"""The two packaged studies: timed reach-avoid and MPPI with a stochastic CBF.

Both return an :class:`ExperimentReport` whose checks are the pass/fail
criteria printed by ``safe-mppi reproduce`` and asserted by the acceptance
tests.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .mppi import samples_override
from .simkit import evaluate_metrics, packaged_scenario, run_closed_loop

REACH_AVOID_SAMPLES = 2000
MPPI_CBF_SAMPLES = 4000
MPPI_CBF_SCENARIOS = {"scbf": "mppi_cbf_scbf", "mppi": "mppi_cbf_mppi", "mppi_scbf": "mppi_cbf_combined"}


@dataclass
class Check:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail}"


@dataclass
class ExperimentReport:
    experiment: str
    checks: list = field(default_factory=list)
    rows: list = field(default_factory=list)
    traces: dict = field(default_factory=dict)
    wall_time: float = 0.0

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def summary(self) -> str:
        return "\n".join([r["line"] for r in self.rows if "line" in r] + [c.line() for c in self.checks])


def _scenario(name: str, samples: Optional[int]):
    sc = packaged_scenario(name)
    if sc.planner is not None:
        sc = sc.with_overrides(planner__samples=samples_override(samples or sc.planner.samples))
    return sc


def reach_avoid(seeds: Sequence[int] = range(10), samples: Optional[int] = REACH_AVOID_SAMPLES,
                workers: Optional[int] = None, progress: Optional[Callable] = None) -> ExperimentReport:
    """Every goal entered inside its window and positive obstacle clearance, per seed."""
    sc = _scenario("reach_avoid", samples)
    report = ExperimentReport("reach_avoid")
    start = time.perf_counter()
    successes = 0
    for seed in seeds:
        trace = run_closed_loop(sc, seed=seed, workers=workers)
        m = evaluate_metrics(trace, sc)
        ok = all(g.in_window for g in m.goals) and m.min_clearance > 0 and not m.diverged
        successes += ok
        flags = " ".join(f"{g.name}={'in' if g.in_window else 'MISSED'}" for g in m.goals)
        row = {"seed": int(seed), "success": ok, "min_clearance": m.min_clearance,
               **{f"{g.name}_in_window": g.in_window for g in m.goals},
               "line": f"seed {seed}: {flags} min_clearance={m.min_clearance:.3f}"}
        report.rows.append(row)
        report.traces[int(seed)] = trace
        if progress:
            progress(row["line"])
    report.wall_time = time.perf_counter() - start
    need = int(np.ceil(0.9 * len(seeds)))
    report.checks.append(Check("windows and clearance", successes >= need,
                               f"{successes}/{len(seeds)} seeds succeed (need {need})"))
    return report


def mppi_cbf(seeds: Sequence[int] = range(20), samples: Optional[int] = MPPI_CBF_SAMPLES,
             workers: Optional[int] = None, progress: Optional[Callable] = None) -> ExperimentReport:
    """SCBF alone vs MPPI alone vs MPPI filtered by the SCBF, on the same seeds."""
    report = ExperimentReport("mppi_cbf")
    start = time.perf_counter()
    min_h, terminal = {}, {}
    for method, name in MPPI_CBF_SCENARIOS.items():
        sc = _scenario(name, samples)
        min_h[method], terminal[method] = [], []
        for seed in seeds:
            trace = run_closed_loop(sc, seed=seed, workers=workers)
            m = evaluate_metrics(trace, sc)
            min_h[method].append(m.min_barrier)
            terminal[method].append(m.terminal_distance)
            report.traces[(method, int(seed))] = trace
            line = (f"{method} seed {seed}: min_h={m.min_barrier:.4f} "
                    f"terminal_distance={m.terminal_distance:.3f} infeasible_steps={m.infeasible_steps}")
            report.rows.append({"method": method, "seed": int(seed), "min_h": m.min_barrier,
                                "terminal_distance": m.terminal_distance,
                                "infeasible_steps": m.infeasible_steps, "line": line})
            if progress:
                progress(line)
    report.wall_time = time.perf_counter() - start

    n = len(seeds)
    safe = int(sum(h >= 0 for h in min_h["mppi_scbf"]))
    need = int(np.ceil(0.95 * n))
    report.checks.append(Check("MPPI+SCBF safe", safe >= need, f"h >= 0 throughout on {safe}/{n} seeds (need {need})"))
    unsafe = int(sum(h < 0 for h in min_h["mppi"]))
    report.checks.append(Check("MPPI alone violates", unsafe >= 1, f"h < 0 on {unsafe}/{n} seeds (need 1)"))
    d_scbf, d_both = float(np.median(terminal["scbf"])), float(np.median(terminal["mppi_scbf"]))
    report.checks.append(Check("SCBF alone stalls", d_scbf > d_both,
                               f"median terminal distance {d_scbf:.3f} (SCBF) vs {d_both:.3f} (MPPI+SCBF)"))
    return report


EXPERIMENTS = {"reach_avoid": reach_avoid, "mppi_cbf": mppi_cbf}
