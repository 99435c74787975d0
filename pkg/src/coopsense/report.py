"""Run artifact writers: delimited outputs, JSON report, and rendered figures.

Every run directory contains:
  report.csv / report.json   per-pipeline, per-class metric table
  health.csv                 sensor health-state transitions
  messages.bin               concatenated wire messages (inter arm traffic)
  ground_truth.csv           actor trace on the tick grid
  figures/metrics.png        metric bars per pipeline and class
  figures/scene.png          BEV overview: trajectories, agents, sensor reach

CSV/JSON writers use fixed float formatting so equal-seed runs are
byte-identical; figures are rendered with the Agg backend.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .metrics import EvalReport
from .scenario import ScenarioConfig, ScenarioWorld, ground_truth_rows

_ARM_COLORS = {"vehicle": "#888888", "intra": "#4878d0", "inter": "#ee854a"}


def write_report_csv(report: EvalReport, path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["pipeline", "class", "metric", "value"])
        for pipeline, class_name, metric, value in report.rows():
            writer.writerow([pipeline, class_name, metric, f"{value:.6f}"])


def write_report_json(report: EvalReport, path: Path) -> None:
    payload = {"schema_version": 1, "pipelines": report.to_json_obj()}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_health_csv(rows, path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "sensor_id", "old", "new"])
        for t_s, sensor_id, old, new in rows:
            writer.writerow([f"{t_s:.3f}", sensor_id, old, new])


def write_ground_truth_csv(world: ScenarioWorld, path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "actor_id", "x", "y", "z", "heading", "vx", "vy", "class"])
        for t_s, actor_id, x, y, z, heading, vx, vy, cls in ground_truth_rows(world):
            writer.writerow([f"{t_s:.3f}", actor_id, f"{x:.6f}", f"{y:.6f}",
                             f"{z:.6f}", f"{heading:.6f}", f"{vx:.6f}", f"{vy:.6f}", cls])


def render_metrics_figure(report: EvalReport, path: Path) -> None:
    """Grouped bars, one panel per metric, pipelines side by side."""
    metrics = ["ap50", "ar100", "amota", "amotp"]
    arms = sorted({pipeline for pipeline, _ in report.values})
    classes = sorted({cls for _, cls in report.values})
    if not arms or not classes:
        return
    fig, axes = plt.subplots(2, 2, figsize=(10, 7))
    for ax, metric in zip(axes.flat, metrics):
        width = 0.8 / max(len(arms), 1)
        xs = np.arange(len(classes))
        for a_idx, arm in enumerate(arms):
            heights = []
            for cls in classes:
                ms = report.values.get((arm, cls))
                value = getattr(ms, metric) if ms else None
                heights.append(float("nan") if value is None else value)
            ax.bar(xs + a_idx * width, heights, width,
                   label=arm, color=_ARM_COLORS.get(arm))
        ax.set_title(metric)
        ax.set_xticks(xs + 0.4 - width / 2)
        ax.set_xticklabels(classes, fontsize=8)
        ax.grid(axis="y", alpha=0.3)
    axes.flat[0].legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def render_scene_figure(world: ScenarioWorld, path: Path) -> None:
    """Top-down overview: actor trajectories, agent paths, sensor reach."""
    config = world.config
    fig, ax = plt.subplots(figsize=(8, 8))
    n_steps = 60
    times = [config.duration_s * k / n_steps for k in range(n_steps + 1)]
    for actor in config.actors:
        xs, ys = [], []
        for t_s in times:
            x, y, *_ = actor.trajectory.state_at(t_s)
            xs.append(x)
            ys.append(y)
        ax.plot(xs, ys, "-", lw=1.2, alpha=0.8)
        ax.annotate(f"{actor.obj_class.name.lower()} {actor.actor_id}",
                    (xs[0], ys[0]), fontsize=7, alpha=0.8)
        length, width = actor.dims[0], actor.dims[1]
        heading = actor.trajectory.state_at(0.0)[2]
        rect = plt.Rectangle((-length / 2, -width / 2), length, width,
                             fill=False, lw=0.8, alpha=0.6)
        transform = (matplotlib.transforms.Affine2D()
                     .rotate(heading).translate(xs[0], ys[0]) + ax.transData)
        rect.set_transform(transform)
        ax.add_patch(rect)
    for agent in config.agents:
        xs, ys = [], []
        for t_s in times:
            x, y, *_ = agent.trajectory.state_at(t_s)
            xs.append(x)
            ys.append(y)
        marker = "s" if agent.kind == "infrastructure" else "^"
        ax.plot(xs, ys, "--", lw=1.5)
        ax.plot(xs[0], ys[0], marker, ms=9)
        ax.annotate(f"{agent.kind} {agent.agent_id}", (xs[0], ys[0]), fontsize=8)
        for sensor in agent.sensors:
            reach = plt.Circle((xs[0], ys[0]), sensor.max_range_m, fill=False,
                               ls=":", lw=0.5, alpha=0.35)
            ax.add_patch(reach)
    ax.set_aspect("equal")
    ax.grid(alpha=0.3)
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_title(f"scenario: {config.name}")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def write_outputs(out_dir: Path, config: ScenarioConfig, results, report: EvalReport) -> None:
    """Write the full artifact set for one run."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    world = ScenarioWorld(config)

    write_report_csv(report, out_dir / "report.csv")
    write_report_json(report, out_dir / "report.json")
    # sensing and monitoring are arm-independent; any arm's health log serves
    write_health_csv(results[0].health_rows if results else [], out_dir / "health.csv")
    inter = next((r for r in results if r.arm == "inter"), None)
    (out_dir / "messages.bin").write_bytes(inter.message_log if inter else b"")
    write_ground_truth_csv(world, out_dir / "ground_truth.csv")

    figures = out_dir / "figures"
    figures.mkdir(exist_ok=True)
    render_metrics_figure(report, figures / "metrics.png")
    render_scene_figure(world, figures / "scene.png")
