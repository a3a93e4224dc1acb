"""Trace CSV, metrics JSON, rollout dumps and SVG plots."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

from .engine import SimTrace
from .scenario import Scenario


def trace_header(trace: SimTrace) -> list:
    n, m = trace.n, trace.m
    return (["time"] + [f"x{i}" for i in range(n)] + [f"xhat{i}" for i in range(n)]
            + [f"u_nom{i}" for i in range(m)] + [f"u{i}" for i in range(m)]
            + [f"h_{name}" for name in trace.barrier_names] + ["events"])


def _fmt(v) -> str:
    return repr(float(v))


def trace_rows(trace: SimTrace):
    for k in range(len(trace)):
        row = [_fmt(trace.time[k])]
        for channel in (trace.state, trace.estimate, trace.u_nom, trace.u, trace.barrier):
            row += [_fmt(v) for v in channel[k]]
        row.append(";".join(trace.events[k]))
        yield row


def write_trace_csv(trace: SimTrace, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(trace_header(trace))
        writer.writerows(trace_rows(trace))
    return path


def read_trace_csv(path) -> tuple:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def write_metrics_json(metrics, path) -> Path:
    path = Path(path)
    data = metrics.to_dict() if hasattr(metrics, "to_dict") else metrics
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    return path


def write_metrics_table(rows: Sequence[dict], path) -> Path:
    path = Path(path)
    keys = []
    for row in rows:
        keys += [k for k in row if k not in keys]
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        writer.writerows(rows)
    return path


class RolloutDumper:
    """Writes one ``rollouts_<cycle>.npz`` per planner cycle (sampled states, weights, mean)."""

    def __init__(self, directory, every: int = 1):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.every = max(1, int(every))

    def __call__(self, cycle, time, solution):
        if cycle % self.every:
            return
        np.savez_compressed(self.directory / f"rollouts_{cycle:05d}.npz",
                            time=time, states=solution.sampled_states.astype(np.float32),
                            weights=solution.weights, mean=solution.mean,
                            nominal=solution.nominal_trajectory)


# ---------------------------------------------------------------------------
# SVG

COLORS = ["#1f77b4", "#d62728", "#ff7f0e", "#2ca02c", "#9467bd", "#8c564b"]


class _Canvas:
    def __init__(self, xmin, xmax, ymin, ymax, size=600, pad=30):
        self.xmin, self.ymin = xmin, ymin
        span = max(xmax - xmin, ymax - ymin, 1e-6)
        self.scale = (size - 2 * pad) / span
        self.pad = pad
        self.w = int(2 * pad + (xmax - xmin) * self.scale)
        self.h = int(2 * pad + (ymax - ymin) * self.scale)
        self.items = []

    def pt(self, x, y):
        return (self.pad + (x - self.xmin) * self.scale, self.h - self.pad - (y - self.ymin) * self.scale)

    def circle(self, x, y, r, **style):
        cx, cy = self.pt(x, y)
        attrs = " ".join(f'{k.replace("_", "-")}="{v}"' for k, v in style.items())
        self.items.append(f'<circle cx="{cx:.2f}" cy="{cy:.2f}" r="{max(r * self.scale, 1.0):.2f}" {attrs}/>')

    def polyline(self, xy, **style):
        pts = " ".join("{:.2f},{:.2f}".format(*self.pt(x, y)) for x, y in xy)
        attrs = " ".join(f'{k.replace("_", "-")}="{v}"' for k, v in style.items())
        self.items.append(f'<polyline points="{pts}" fill="none" {attrs}/>')

    def text(self, x, y, s, **style):
        px, py = self.pt(x, y)
        attrs = " ".join(f'{k.replace("_", "-")}="{v}"' for k, v in style.items())
        self.items.append(f'<text x="{px:.2f}" y="{py:.2f}" font-size="12" {attrs}>{escape(s)}</text>')

    def render(self):
        body = "\n".join(self.items)
        return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.w}" height="{self.h}" '
                f'viewBox="0 0 {self.w} {self.h}">\n<rect width="100%" height="100%" fill="white"/>\n'
                f"{body}\n</svg>\n")


def _extent(scenario: Scenario, trajectories):
    pts = [np.asarray(tr)[:, :2] for tr in trajectories]
    for g in scenario.goals:
        c = g.position_at(0.0)
        pts.append(np.array([c - g.radius, c + g.radius]))
    for o in scenario.obstacles:
        c = np.asarray(o.obstacle_position)
        pts.append(np.array([c - o.physical_radius, c + o.physical_radius]))
    allpts = np.vstack(pts)
    lo, hi = allpts.min(axis=0) - 0.5, allpts.max(axis=0) + 0.5
    return lo[0], hi[0], lo[1], hi[1]


def render_svg(scenario: Scenario, traces: Sequence[SimTrace], labels: Sequence[str] = ()) -> str:
    """Trajectories with goal disks (window labels), obstacles and the start marker."""
    pi = list(scenario.model.position_indices)
    paths = [np.asarray(t.state, dtype=float)[:, pi] for t in traces]
    canvas = _Canvas(*_extent(scenario, paths))
    for o in scenario.obstacles:
        canvas.circle(*o.obstacle_position, o.physical_radius, fill="black")
    for g in scenario.goals:
        c = g.position_at(0.0)
        canvas.circle(c[0], c[1], g.radius, fill="#2ca02c", fill_opacity="0.3", stroke="#2ca02c")
        label = g.name if g.window is None else f"{g.name} [{g.window[0]:g}, {g.window[1]:g}] s"
        canvas.text(c[0] + g.radius, c[1] + g.radius, label)
    for i, path in enumerate(paths):
        color = COLORS[i % len(COLORS)]
        canvas.polyline(path, stroke=color, stroke_width="2")
        if i < len(labels):
            canvas.text(path[-1, 0], path[-1, 1], labels[i], fill=color)
    x0 = scenario.initial_state[pi]
    canvas.circle(x0[0], x0[1], 0.0, fill="blue", stroke="black")
    canvas.text(x0[0], x0[1], "start")
    return canvas.render()


def write_svg(scenario: Scenario, traces, path, labels=()) -> Path:
    path = Path(path)
    path.write_text(render_svg(scenario, traces, labels))
    return path
