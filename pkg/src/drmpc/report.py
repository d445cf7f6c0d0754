"""Run artifacts: trajectory CSV, metrics JSON and static SVG plots."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import matplotlib
import numpy as np
from matplotlib.backends.backend_svg import FigureCanvasSVG
from matplotlib.figure import Figure
from matplotlib.patches import Rectangle

from .errors import InputError

CSV_COLUMNS = ("variant", "iteration", "t", "x1", "x2", "x3", "x4", "u1", "u2", "step_time_s")
SVG_STYLE = {"svg.hashsalt": "drmpc", "svg.fonttype": "path", "path.simplify": False}


def trajectory_rows(name: str, records) -> list[list]:
    """One row per state; the terminal state has empty input and time cells."""
    rows = []
    for rec in records:
        tr = rec.trajectory
        for t, x in enumerate(tr.states):
            if t < tr.steps:
                u = [float(v) for v in tr.inputs[t]]
                dt = float(rec.step_times[t]) if t < rec.step_times.size else ""
            else:
                u, dt = ["", ""], ""
            rows.append([name, rec.iteration, t, *[float(v) for v in x], *u, dt])
    return rows


def metrics(results: dict, config: dict | None = None) -> dict:
    """Per-variant, per-iteration summary."""
    out = {}
    for name, res in results.items():
        out[name] = {
            "seed": res.seed,
            "robust_cost": res.robust.cost,
            "robust_steps": res.robust.steps,
            "iterations": [
                {
                    "iteration": r.iteration,
                    "cost": r.cost,
                    "steps": r.trajectory.steps,
                    "total_time_s": r.total_time,
                    "mean_step_time_s": r.mean_step_time,
                    "build_time_s": r.build_time,
                    "samples_gathered": r.samples_gathered,
                    "total_samples": r.total_samples,
                    "pruned": list(r.pruned),
                    "fallbacks": r.fallbacks,
                    "infeasible": r.infeasible,
                    "certified": r.certified,
                }
                for r in res.records
            ],
        }
    doc = {"variants": out}
    if config is not None:
        doc["config"] = config
    return doc


def _svg_bytes(fig: Figure) -> bytes:
    buf = io.BytesIO()
    with matplotlib.rc_context(SVG_STYLE):
        FigureCanvasSVG(fig).print_svg(buf, metadata={"Date": None, "Creator": "drmpc"})
    return buf.getvalue()


def _obstacle_patches(ax, problem):
    body = problem.obstacle.body
    lo, hi = body.bounds
    sup_lo, sup_hi = problem.support.bounds
    ax.add_patch(Rectangle(lo + sup_lo, *(hi - lo + sup_hi - sup_lo), fill=False, ls="--", ec="0.5", lw=0.8,
                           label="support halo"))
    ax.add_patch(Rectangle(lo, *(hi - lo), fc="0.3", ec="k", lw=0.8, label="obstacle"))


def plot_trajectories(results: dict, problem) -> Figure:
    names = list(results)
    fig = Figure(figsize=(4.2 * len(names), 4.0))
    axes = fig.subplots(1, len(names), squeeze=False)[0]
    start, target = problem.mpc.start, problem.mpc.target
    for ax, name in zip(axes, names):
        res = results[name]
        _obstacle_patches(ax, problem)
        cmap = matplotlib.colormaps["viridis"]
        J = max(len(res.records), 1)
        for i, rec in enumerate(res.records):
            xs = rec.trajectory.states
            ax.plot(xs[:, 0], xs[:, 1], lw=0.9, color=cmap(i / max(J - 1, 1)))
        rb = res.robust.states
        ax.plot(rb[:, 0], rb[:, 1], "k--", lw=1.2, label="robust")
        ax.plot(*start[:2], "o", color="tab:green", ms=5)
        ax.plot(*target[:2], "*", color="tab:red", ms=8)
        ax.set_title(name)
        ax.set_xlabel("x1")
        ax.set_ylabel("x2")
        ax.set_aspect("equal", adjustable="datalim")
    axes[0].legend(loc="upper left", fontsize=7)
    fig.tight_layout()
    return fig


def plot_timing(results: dict) -> Figure:
    fig = Figure(figsize=(8.4, 3.6))
    ax_mean, ax_total = fig.subplots(1, 2)
    for name, res in results.items():
        its = [r.iteration for r in res.records]
        ax_mean.plot(its, [r.mean_step_time for r in res.records], marker="o", ms=3, label=name)
        ax_total.plot(its, [r.total_time for r in res.records], marker="o", ms=3, label=name)
    ax_mean.set_ylabel("mean step solve time [s]")
    ax_total.set_ylabel("iteration solve time [s]")
    for ax in (ax_mean, ax_total):
        ax.set_xlabel("iteration")
        ax.legend(fontsize=7)
    fig.tight_layout()
    return fig


def plot_cost(results: dict) -> Figure:
    fig = Figure(figsize=(4.8, 3.6))
    ax = fig.subplots()
    for name, res in results.items():
        line, = ax.plot([r.iteration for r in res.records], [r.cost for r in res.records],
                        marker="o", ms=3, label=name)
        ax.axhline(res.robust.cost, color=line.get_color(), ls=":", lw=0.8)
    ax.set_xlabel("iteration")
    ax.set_ylabel("iteration cost")
    ax.legend(fontsize=7)
    fig.tight_layout()
    return fig


def emit_outputs(results: dict, out_dir, problem, config: dict | None = None) -> list[Path]:
    """Write ``trajectories.csv``, ``metrics.json`` and three SVG plots.

    Args:
        results: Map from variant name to its experiment result.
        out_dir: Output directory, created if missing.
        problem: The problem the results belong to (for the obstacle drawing).
        config: Optional config dump stored in the metrics file.

    Returns:
        The written paths.

    Raises:
        InputError: If there is nothing to write.
        OSError: If the directory or a file cannot be written.
    """
    if not results or not any(res.records for res in results.values()):
        raise InputError("no iteration records to write")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for name, res in results.items():
        writer.writerows(trajectory_rows(name, res.records))

    files = {
        "trajectories.csv": buf.getvalue().encode("utf-8"),
        "metrics.json": (json.dumps(metrics(results, config), sort_keys=True, indent=2) + "\n").encode("utf-8"),
        "trajectories.svg": _svg_bytes(plot_trajectories(results, problem)),
        "timing.svg": _svg_bytes(plot_timing(results)),
        "cost.svg": _svg_bytes(plot_cost(results)),
    }
    written = []
    for fname, data in files.items():
        path = out / fname
        path.write_bytes(data)
        written.append(path)
    return written


def read_trajectories(path) -> dict:
    """Parse a trajectories CSV into ``{(variant, iteration): (states, inputs)}``."""
    groups: dict = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            key = (row["variant"], int(row["iteration"]))
            groups.setdefault(key, []).append(row)
    out = {}
    for key, rows in groups.items():
        rows.sort(key=lambda r: int(r["t"]))
        states = np.array([[float(r[f"x{i}"]) for i in range(1, 5)] for r in rows])
        inputs = np.array([[float(r["u1"]), float(r["u2"])] for r in rows if r["u1"] != ""]).reshape(-1, 2)
        out[key] = (states, inputs)
    return out
