"""Scenario runner: the fixed-tick simulation loop behind the CLI.

Each evaluated pipeline arm re-runs the same seeded simulation with a
different fusion wiring for the ego vehicle:

  vehicle  ego fuses only its LiDAR frames; the channel is never read
  intra    ego fuses all onboard sensors
  inter    intra plus decoding and merging peer messages from the channel

Sensing and monitoring always run for every sensor of every agent, so the
health log is identical across arms.  Message traffic exists only in the
inter arm (nothing would consume it elsewhere); the message log therefore
records the inter arm's broadcasts.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

from .core import ObjectClass, Rng, Timestamp, world_pose
from .cpm import CpmMessage, MAX_OBJECTS, decode, encode
from .fusion import (
    FusionConfig,
    StaleTrack,
    TrackTable,
    inter_fuse_step,
    intra_fuse_step,
    predict_to,
)
from .geometry import transform_object
from .metrics import EvalFrame, EvalReport, GroundTruthObject, compute_metrics
from .monitor import SensorMonitor
from .netsim import Channel
from .scenario import Modality, ScenarioConfig, ScenarioWorld, SensorStream

TICK_MICROS = 10_000          # 10 ms simulation step
CPM_PERIOD_MICROS = 100_000   # 10 Hz message rate

ARM_ORDER = ("vehicle", "intra", "inter")

EVAL_CLASSES = (ObjectClass.CAR, ObjectClass.CYCLIST, ObjectClass.PEDESTRIAN)


@dataclass(frozen=True)
class RunManifest:
    scenario_path: Path
    pipelines: tuple
    out_dir: Path
    seed_override: Optional[int] = None

    def __post_init__(self):
        if not self.pipelines:
            raise ValueError("at least one pipeline arm is required")
        unknown = [p for p in self.pipelines if p not in ARM_ORDER]
        if unknown:
            raise ValueError(
                f"unknown pipeline(s) {unknown}; valid: {list(ARM_ORDER)}")


@dataclass
class ArmResult:
    arm: str
    eval_frames: list = field(default_factory=list)
    health_rows: list = field(default_factory=list)   # (t_s, sensor_id, old, new)
    message_log: bytes = b""
    channel_poll_count: int = 0
    broadcast_count: int = 0
    stale_messages: int = 0


def _published_view(table: TrackTable, cfg: FusionConfig, t: Timestamp):
    """Publishable tracks predicted to t; read-only (no drops)."""
    out = []
    for rec in table.records():
        if rec.obj.existence < cfg.existence_publish_threshold:
            continue
        try:
            out.append(predict_to(rec.obj, t, cfg.process_noise_accel,
                                  cfg.max_prediction_gap_s))
        except StaleTrack:
            continue
    return out


def _ground_truth_at(world: ScenarioWorld, t: Timestamp):
    return tuple(
        GroundTruthObject(
            actor_id=s.actor_id,
            obj_class=s.obj_class,
            center=(float(s.position[0]), float(s.position[1])),
            length=s.dims[0],
            width=s.dims[1],
            heading=s.heading,
        )
        for s in world.world_at(t)
    )


def simulate(config: ScenarioConfig, arm: str) -> ArmResult:
    """Run one pipeline arm over the whole scenario."""
    if arm not in ARM_ORDER:
        raise ValueError(f"unknown arm {arm!r}")
    world = ScenarioWorld(config)
    root = Rng(config.seed)
    fcfg = FusionConfig.with_overrides(config.fusion_overrides)
    ego = config.ego_id()
    use_channel = arm == "inter"

    streams = {}
    monitors = {}
    tables = {}
    seqs = {}
    for agent in config.agents:
        monitors[agent.agent_id] = SensorMonitor()
        tables[agent.agent_id] = TrackTable()
        seqs[agent.agent_id] = 0
        for sensor in agent.sensors:
            streams[sensor.sensor_id] = SensorStream(world, sensor, root)
            monitors[agent.agent_id].register(sensor.sensor_id, sensor.frame_rate_hz)

    channel = Channel(config.channel)
    chan_rng = root.substream("channel")
    if use_channel:
        for agent in config.agents:
            channel.register(agent.agent_id,
                             world.agent_pose(agent.agent_id, Timestamp(0)).position)

    result = ArmResult(arm=arm)
    message_chunks = []
    health_state = {s.sensor_id: "HEALTHY" for a in config.agents for s in a.sensors}

    n_ticks = int(round(config.duration_s * 1e6)) // TICK_MICROS
    for k in range(n_ticks + 1):
        t = Timestamp(k * TICK_MICROS)
        poses = {a.agent_id: world.agent_pose(a.agent_id, t) for a in config.agents}
        if use_channel:
            for agent_id, pose in poses.items():
                channel.update_position(agent_id, pose.position)

        # sense and monitor every sensor on its own grid
        frames_by_agent = {a.agent_id: [] for a in config.agents}
        for agent in config.agents:
            monitor = monitors[agent.agent_id]
            for sensor in agent.sensors:
                if t.micros % sensor.period_micros != 0:
                    continue
                frame = streams[sensor.sensor_id].step(t)
                monitor.observe(sensor.sensor_id, frame, t)
                state = monitor.classify(sensor.sensor_id, t)
                if state.name != health_state[sensor.sensor_id]:
                    result.health_rows.append(
                        (t.seconds, sensor.sensor_id,
                         health_state[sensor.sensor_id], state.name))
                    health_state[sensor.sensor_id] = state.name
                if frame is not None:
                    frames_by_agent[agent.agent_id].append(frame)

        # fusion wiring per arm
        for agent in config.agents:
            agent_id = agent.agent_id
            if agent_id != ego and not use_channel:
                continue  # nothing consumes a peer's table without the channel
            frames = frames_by_agent[agent_id]
            if agent_id == ego and arm == "vehicle":
                frames = [f for f in frames if f.modality is Modality.LIDAR]
            if frames:
                frames.sort(key=lambda f: (f.stamp, f.sensor_id))
                trust = {s.sensor_id: monitors[agent_id].trust_weight(s.sensor_id)
                         for s in agent.sensors}
                intra_fuse_step(tables[agent_id], frames, poses[agent_id], fcfg, t,
                                trust)

        # perception message exchange (inter arm only)
        if use_channel and t.micros % CPM_PERIOD_MICROS == 0:
            for agent in config.agents:
                agent_id = agent.agent_id
                pose = poses[agent_id]
                tracks = _published_view(tables[agent_id], fcfg, t)[:MAX_OBJECTS]
                objects = tuple(
                    transform_object(obj, world_pose(t), pose) for obj in tracks)
                msg = CpmMessage(sender=pose, objects=objects, seq=seqs[agent_id])
                seqs[agent_id] = (seqs[agent_id] + 1) & 0xFFFF
                wire = encode(msg)
                message_chunks.append(wire)
                channel.broadcast(wire, pose, t, chan_rng)

            for payload, _arrival in channel.poll(ego, t):
                msg = decode(payload)
                inter_fuse_step(tables[ego], msg, poses[ego], fcfg, t)

        result.eval_frames.append(EvalFrame(
            stamp=t,
            predictions=tuple(_published_view(tables[ego], fcfg, t)),
            ground_truth=_ground_truth_at(world, t),
        ))

    result.message_log = b"".join(message_chunks)
    result.channel_poll_count = channel.poll_count
    result.broadcast_count = channel.broadcast_count
    result.stale_messages = tables[ego].stale_messages
    return result


def evaluate_arms(results) -> EvalReport:
    report = EvalReport()
    for res in results:
        for obj_class in EVAL_CLASSES:
            report.add(res.arm, obj_class, compute_metrics(res.eval_frames, obj_class))
    return report


def run(manifest: RunManifest) -> int:
    """Execute the manifest; returns a process exit code."""
    import sys

    from .report import write_outputs
    from .scenario import ScenarioError, load_scenario

    try:
        config = load_scenario(manifest.scenario_path)
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if manifest.seed_override is not None:
        config = replace(config, seed=manifest.seed_override)

    arms = [a for a in ARM_ORDER if a in manifest.pipelines]
    try:
        results = [simulate(config, arm) for arm in arms]
        report = evaluate_arms(results)
        write_outputs(manifest.out_dir, config, results, report)
    except Exception as exc:  # surface invariant violations distinctly
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    for line in summary_lines(report, arms):
        print(line)
    return 0


def summary_lines(report: EvalReport, arms):
    lines = [f"{'pipeline':<10} {'class':<12} {'ap50':>8} {'ar100':>8} "
             f"{'amota':>8} {'amotp':>8}"]
    for arm in arms:
        for obj_class in EVAL_CLASSES:
            ms = report.get(arm, obj_class)
            if ms is None:
                continue
            cells = []
            for value in (ms.ap50, ms.ar100, ms.amota, ms.amotp):
                cells.append("   --   " if value is None else f"{value:8.3f}")
            lines.append(f"{arm:<10} {obj_class.name:<12} " + " ".join(cells))
    return lines
