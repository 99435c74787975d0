"""Synthetic ground-truth world and per-modality sensor models.

The scenario file (JSON, schema_version 1) defines actors on piecewise
constant-velocity/turn trajectories, sensor-equipped agents, a fault
schedule, and the channel envelope.  Everything downstream of the seed is
deterministic: ground truth never touches the RNG, and each sensor draws a
fixed-size random block per candidate actor per frame so detection outcomes
are comparable across fault conditions.

The simulator emits object-level detections directly (tracked-object lists,
BEV radar objects, 2D camera boxes); no point clouds or pixels.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from typing import Optional

import numpy as np

from .core import (
    AgentPose,
    ClassDistribution,
    ObjectClass,
    Rng,
    SensorSource,
    Timestamp,
    TrackedObject,
    wrap_heading,
)
from .geometry import Box2D, CameraModel, compose_pose, project_box, rot3z
from .netsim import ChannelConfig

SCHEMA_VERSION = 1

# detection-rate multipliers measured for covered and broken lenses
BLOCKAGE_DETECTION_FACTOR = 0.43
BROKEN_DETECTION_FACTOR = 0.83

# nighttime detection multipliers by modality (RGB degrades, thermal barely)
DEFAULT_NIGHT_FACTOR = {"lidar": 1.0, "radar": 1.0, "rgb": 0.79, "thermal": 0.98}

# occluder footprints are shrunk so grazing rays pass
OCCLUSION_INFLATION = 0.9

_CLASS_NAMES = {c.name.lower(): c for c in ObjectClass}


class Modality(Enum):
    LIDAR = "lidar"
    RADAR = "radar"
    RGB = "rgb"
    THERMAL = "thermal"

    @property
    def source(self) -> SensorSource:
        return {
            Modality.LIDAR: SensorSource.LIDAR,
            Modality.RADAR: SensorSource.RADAR,
            Modality.RGB: SensorSource.RGB,
            Modality.THERMAL: SensorSource.THERMAL,
        }[self]


class Illumination(Enum):
    DAY = "day"
    NIGHT = "night"


class FaultKind(Enum):
    BLOCKAGE = "blockage"
    BROKEN = "broken"
    FROZEN = "frozen"
    DROPOUT = "dropout"


class ScenarioError(ValueError):
    """Scenario file cannot be parsed or violates the schema."""


@dataclass(frozen=True)
class Segment:
    kind: str  # "cv" or "turn"
    duration_s: float
    speed_mps: float
    yaw_rate_rps: float = 0.0


@dataclass(frozen=True)
class Trajectory:
    """Piecewise constant-velocity / constant-turn motion, continuous in position."""

    x0: float
    y0: float
    heading0: float
    segments: tuple = ()

    def state_at(self, t_s: float):
        """(x, y, heading, vx, vy) at time t_s; holds the last pose afterwards."""
        x, y, h = self.x0, self.y0, self.heading0
        remaining = t_s
        for seg in self.segments:
            if remaining >= seg.duration_s - 1e-12:
                x, y, h = _advance(x, y, h, seg, seg.duration_s)
                remaining -= seg.duration_s
                continue
            x, y, h = _advance(x, y, h, seg, remaining)
            vx = seg.speed_mps * math.cos(h)
            vy = seg.speed_mps * math.sin(h)
            return x, y, wrap_heading(h), vx, vy
        return x, y, wrap_heading(h), 0.0, 0.0


def _advance(x: float, y: float, h: float, seg: Segment, tau: float):
    if seg.kind == "cv" or seg.yaw_rate_rps == 0.0:
        return (x + seg.speed_mps * tau * math.cos(h),
                y + seg.speed_mps * tau * math.sin(h),
                h + (seg.yaw_rate_rps * tau if seg.kind == "turn" else 0.0))
    omega = seg.yaw_rate_rps
    h1 = h + omega * tau
    radius = seg.speed_mps / omega
    return (x + radius * (math.sin(h1) - math.sin(h)),
            y + radius * (math.cos(h) - math.cos(h1)),
            h1)


@dataclass(frozen=True)
class Actor:
    actor_id: int
    obj_class: ObjectClass
    dims: tuple  # (length, width, height) meters
    trajectory: Trajectory


@dataclass(frozen=True)
class SensorModel:
    sensor_id: int
    modality: Modality
    mount_position: tuple = (0.0, 0.0, 0.0)  # in the agent frame
    mount_heading: float = 0.0
    fov_rad: float = 2.0 * math.pi
    max_range_m: float = 100.0
    detection_prob_base: float = 0.9
    sigma_pos: float = 0.1  # meters (pixels for cameras)
    sigma_vel: float = 0.2
    sigma_dim: float = 0.05
    sigma_heading: float = 0.02
    class_confusion: float = 0.02
    night_factor: float = 1.0
    frame_rate_hz: float = 10.0
    existence_confidence: float = 0.7
    camera: Optional[CameraModel] = None

    def __post_init__(self):
        if not (0.0 < self.fov_rad <= 2.0 * math.pi + 1e-12):
            raise ValueError(f"sensor {self.sensor_id}: fov must lie in (0, 2pi]")
        for name in ("detection_prob_base", "class_confusion", "night_factor",
                     "existence_confidence"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"sensor {self.sensor_id}: {name} must lie in [0,1], got {v}")
        if self.frame_rate_hz <= 0:
            raise ValueError(f"sensor {self.sensor_id}: frame_rate_hz must be positive")
        if self.modality in (Modality.RGB, Modality.THERMAL) and self.camera is None:
            raise ValueError(f"sensor {self.sensor_id}: camera intrinsics required")

    @property
    def period_micros(self) -> int:
        return int(round(1e6 / self.frame_rate_hz))


@dataclass(frozen=True)
class AgentSpec:
    agent_id: int
    kind: str  # "vehicle" or "infrastructure"
    trajectory: Trajectory
    z: float = 0.0
    sensors: tuple = ()


@dataclass(frozen=True)
class FaultWindow:
    sensor_id: int
    kind: FaultKind
    start_s: float
    end_s: float

    def __post_init__(self):
        if not (0.0 <= self.start_s < self.end_s):
            raise ValueError(f"fault interval [{self.start_s}, {self.end_s}) is not well-formed")

    def active(self, t_s: float) -> bool:
        return self.start_s <= t_s < self.end_s


@dataclass(frozen=True)
class ScenarioConfig:
    seed: int
    duration_s: float
    actors: tuple
    agents: tuple
    faults: tuple = ()
    illumination: Illumination = Illumination.DAY
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    ego_agent_id: Optional[int] = None
    fusion_overrides: dict = field(default_factory=dict)
    name: str = "unnamed"

    def __post_init__(self):
        ids = [a.actor_id for a in self.actors]
        ids += [a.agent_id for a in self.agents]
        ids += [s.sensor_id for a in self.agents for s in a.sensors]
        dupes = {i for i in ids if ids.count(i) > 1}
        if dupes:
            raise ValueError(f"ids must be unique across actors/agents/sensors: {sorted(dupes)}")
        if any(i < 1 for i in ids):
            raise ValueError("ids must be >= 1 (0 is the world frame)")
        if self.duration_s <= 0:
            raise ValueError("duration must be positive")
        sensor_ids = {s.sensor_id for a in self.agents for s in a.sensors}
        for f in self.faults:
            if f.sensor_id not in sensor_ids:
                raise ValueError(f"fault references unknown sensor {f.sensor_id}")

    def ego_id(self) -> int:
        if self.ego_agent_id is not None:
            return self.ego_agent_id
        for a in self.agents:
            if a.kind == "vehicle":
                return a.agent_id
        raise ValueError("scenario has no vehicle agent")


@dataclass(frozen=True)
class ActorState:
    actor_id: int
    obj_class: ObjectClass
    position: np.ndarray  # world frame, z = height/2
    velocity: np.ndarray
    heading: float
    dims: tuple


# ---------------------------------------------------------------------------
# detection payloads

@dataclass(frozen=True)
class RadarDetection:
    """BEV object from a radar tracker: no height, planar velocity."""

    track_id: int
    center: tuple  # (x, y) in sensor frame
    length: float
    width: float
    heading: float
    velocity: tuple  # (vx, vy)
    class_dist: ClassDistribution

    def content_bytes(self) -> bytes:
        return struct.pack(
            "<I11d", self.track_id, *self.center, self.length, self.width,
            self.heading, *self.velocity, *self.class_dist.probs)


@dataclass(frozen=True)
class CameraDetection:
    """2D image-plane detection with a confidence score."""

    track_id: int
    box: Box2D
    score: float
    class_dist: ClassDistribution

    def content_bytes(self) -> bytes:
        return struct.pack(
            "<I9d", self.track_id, self.box.x_min, self.box.y_min, self.box.x_max,
            self.box.y_max, self.score, *self.class_dist.probs)


@dataclass(frozen=True)
class SensorFrame:
    """One modality's detection batch at one timestamp.

    Carries enough sensor geometry (mount, fov, range, camera model) for the
    fusion stage to transform detections and reason about expected coverage.
    """

    sensor_id: int
    agent_id: int
    modality: Modality
    stamp: Timestamp
    detections: tuple
    mount_position: tuple
    mount_heading: float
    fov_rad: float
    max_range_m: float
    existence_confidence: float
    sigma_pos: float = 0.1
    sigma_vel: float = 0.2
    camera: Optional[CameraModel] = None

    def fingerprint(self) -> bytes:
        h = hashlib.blake2b(digest_size=16)
        h.update(struct.pack("<iiq", self.sensor_id, self.agent_id, self.stamp.micros))
        for det in self.detections:
            h.update(det.content_bytes())
        return h.digest()


# ---------------------------------------------------------------------------
# world evaluation

class ScenarioWorld:
    """Kinematic ground truth plus fault bookkeeping; the evaluation oracle."""

    def __init__(self, config: ScenarioConfig):
        self.config = config
        self._sensors = {s.sensor_id: s for a in config.agents for s in a.sensors}
        self._sensor_agent = {
            s.sensor_id: a.agent_id for a in config.agents for s in a.sensors
        }
        self._agents = {a.agent_id: a for a in config.agents}
        self._faults = tuple(config.faults)

    @property
    def duration(self) -> Timestamp:
        return Timestamp.from_seconds(self.config.duration_s)

    def sensors(self):
        return self._sensors.values()

    def sensor(self, sensor_id: int) -> SensorModel:
        return self._sensors[sensor_id]

    def agent_of_sensor(self, sensor_id: int) -> int:
        return self._sensor_agent[sensor_id]

    def world_at(self, t: Timestamp):
        """Exact ground truth at t: never consumes randomness."""
        t_s = t.seconds
        if t_s < 0 or t_s > self.config.duration_s + 1e-9:
            raise ValueError(f"t={t_s}s outside scenario duration {self.config.duration_s}s")
        states = []
        for actor in self.config.actors:
            x, y, h, vx, vy = actor.trajectory.state_at(t_s)
            states.append(
                ActorState(
                    actor_id=actor.actor_id,
                    obj_class=actor.obj_class,
                    position=np.array([x, y, actor.dims[2] / 2.0]),
                    velocity=np.array([vx, vy, 0.0]),
                    heading=h,
                    dims=actor.dims,
                )
            )
        return states

    def agent_pose(self, agent_id: int, t: Timestamp) -> AgentPose:
        agent = self._agents[agent_id]
        x, y, h, _, _ = agent.trajectory.state_at(t.seconds)
        return AgentPose(agent_id, [x, y, agent.z], h, t)

    def fault_at(self, sensor_id: int, t: Timestamp) -> Optional[FaultKind]:
        t_s = t.seconds
        for f in self._faults:
            if f.sensor_id == sensor_id and f.active(t_s):
                return f.kind
        return None

    def detection_multiplier(self, sensor: SensorModel, t: Timestamp) -> float:
        """Illumination and degradation factors applied to the detection prob."""
        mult = 1.0
        if self.config.illumination is Illumination.NIGHT:
            mult *= sensor.night_factor
        fault = self.fault_at(sensor.sensor_id, t)
        if fault is FaultKind.BLOCKAGE:
            mult *= BLOCKAGE_DETECTION_FACTOR
        elif fault is FaultKind.BROKEN:
            mult *= BROKEN_DETECTION_FACTOR
        return mult


def occluded_mask(sensor_xy: np.ndarray, targets_xy: np.ndarray, centers: np.ndarray,
                  half_dims: np.ndarray, headings: np.ndarray) -> np.ndarray:
    """True where the ray sensor->target crosses another actor's footprint.

    Footprints are oriented rectangles shrunk by OCCLUSION_INFLATION; the
    target never occludes itself.  Vectorized Liang-Barsky slab test.
    """
    n = targets_xy.shape[0]
    if n == 0 or centers.shape[0] == 0:
        return np.zeros(n, dtype=bool)
    cos_h = np.cos(headings)
    sin_h = np.sin(headings)
    # endpoints in each occluder's frame: (targets, occluders, 2)
    rel0 = sensor_xy[None, None, :] - centers[None, :, :]
    rel1 = targets_xy[:, None, :] - centers[None, :, :]
    p0 = np.stack([rel0[..., 0] * cos_h + rel0[..., 1] * sin_h,
                   -rel0[..., 0] * sin_h + rel0[..., 1] * cos_h], axis=-1)
    p1 = np.stack([rel1[..., 0] * cos_h + rel1[..., 1] * sin_h,
                   -rel1[..., 0] * sin_h + rel1[..., 1] * cos_h], axis=-1)
    d = p1 - p0
    half = half_dims[None, :, :] * OCCLUSION_INFLATION
    shape = (targets_xy.shape[0], centers.shape[0])
    t_min = np.zeros(shape)
    t_max = np.ones(shape)
    feasible = np.ones(shape, dtype=bool)
    for axis in (0, 1):
        da = d[..., axis]
        pa = p0[..., axis]
        ha = half[..., axis]
        parallel = np.abs(da) < 1e-12
        feasible &= ~parallel | (np.abs(pa) <= ha)
        da_safe = np.where(parallel, 1.0, da)
        t1 = (-ha - pa) / da_safe
        t2 = (ha - pa) / da_safe
        lo = np.where(parallel, 0.0, np.minimum(t1, t2))
        hi = np.where(parallel, 1.0, np.maximum(t1, t2))
        t_min = np.maximum(t_min, lo)
        t_max = np.minimum(t_max, hi)
    hit = feasible & (t_min <= t_max)
    if hit.shape[0] == hit.shape[1]:
        np.fill_diagonal(hit, False)
    return hit.any(axis=1)


# fixed random block per candidate actor: 10 normals + 3 uniforms
_N_NORMALS = 10
_N_UNIFORMS = 3


def sense(world: ScenarioWorld, sensor: SensorModel, agent_pose: AgentPose,
          t: Timestamp, rng: Rng) -> SensorFrame:
    """One detection batch for one sensor at one grid instant.

    Consumes a fixed-size random block per ground-truth actor regardless of
    visibility or detection outcome, so streams stay aligned across fault
    conditions (a detection that survives a degraded draw also survives the
    clear one).
    """
    if t.micros % sensor.period_micros != 0:
        raise ValueError(
            f"t={t.seconds}s is off the {sensor.frame_rate_hz} Hz grid of "
            f"sensor {sensor.sensor_id}"
        )
    actors = world.world_at(t)
    n = len(actors)
    normals = rng.normal(size=(n, _N_NORMALS)) if n else np.zeros((0, _N_NORMALS))
    uniforms = rng.uniform(size=(n, _N_UNIFORMS)) if n else np.zeros((0, _N_UNIFORMS))

    sensor_pose = compose_pose(agent_pose, sensor.mount_position, sensor.mount_heading,
                               pose_id=sensor.sensor_id)
    sensor_xy = sensor_pose.position[:2]
    targets_xy = np.array([a.position[:2] for a in actors]).reshape(n, 2)
    deltas = targets_xy - sensor_xy
    dists = np.hypot(deltas[:, 0], deltas[:, 1]) if n else np.zeros(0)
    if n:
        bearings = wrap_heading(np.arctan2(deltas[:, 1], deltas[:, 0])
                                - sensor_pose.heading)
    else:
        bearings = np.zeros(0)
    in_fov = (np.abs(bearings) <= sensor.fov_rad / 2.0 + 1e-12) | \
             (sensor.fov_rad >= 2.0 * math.pi - 1e-12)
    in_range = dists <= sensor.max_range_m

    if sensor.modality is Modality.RADAR or n == 0:
        occluded = np.zeros(n, dtype=bool)
    else:
        centers = targets_xy
        half_dims = np.array([[a.dims[0] / 2.0, a.dims[1] / 2.0] for a in actors])
        headings = np.array([a.heading for a in actors])
        occluded = occluded_mask(sensor_xy, targets_xy, centers, half_dims, headings)

    p_detect = sensor.detection_prob_base * world.detection_multiplier(sensor, t)
    ctx = _FrameContext(sensor, sensor_pose, agent_pose)
    detections = []
    for i, actor in enumerate(actors):
        if not (in_fov[i] and in_range[i] and not occluded[i]):
            continue
        if uniforms[i, 0] >= p_detect:
            continue
        det = _make_detection(ctx, actor, normals[i], uniforms[i], t)
        if det is not None:
            detections.append(det)

    return SensorFrame(
        sensor_id=sensor.sensor_id,
        agent_id=agent_pose.agent_id,
        modality=sensor.modality,
        stamp=t,
        detections=tuple(detections),
        mount_position=tuple(sensor.mount_position),
        mount_heading=sensor.mount_heading,
        fov_rad=sensor.fov_rad,
        max_range_m=sensor.max_range_m,
        existence_confidence=sensor.existence_confidence,
        sigma_pos=sensor.sigma_pos,
        sigma_vel=sensor.sigma_vel,
        camera=sensor.camera,
    )


@lru_cache(maxsize=512)
def _reported_class_dist(label_code: int, confusion: float) -> ClassDistribution:
    rest = confusion / (len(ObjectClass) - 1)
    probs = [rest] * len(ObjectClass)
    probs[label_code] = 1.0 - confusion
    total = sum(probs)
    return ClassDistribution(tuple(p / total for p in probs))


def _reported_class(actor_class: ObjectClass, sensor: SensorModel, u_flip: float,
                    u_pick: float) -> ClassDistribution:
    label = actor_class
    if u_flip < sensor.class_confusion:
        others = [c for c in ObjectClass if c != actor_class]
        label = others[min(int(u_pick * len(others)), len(others) - 1)]
    return _reported_class_dist(int(label), sensor.class_confusion)


class _FrameContext:
    """Per-frame constants shared by all detections of one sense() call."""

    __slots__ = ("sensor", "sensor_pose", "agent_pose", "rot_inv", "cov_template")

    def __init__(self, sensor: SensorModel, sensor_pose: AgentPose,
                 agent_pose: AgentPose):
        self.sensor = sensor
        self.sensor_pose = sensor_pose
        self.agent_pose = agent_pose
        self.rot_inv = rot3z(sensor_pose.heading).T
        cov = np.diag([sensor.sigma_pos**2] * 3 + [sensor.sigma_vel**2] * 3)
        cov.flags.writeable = False
        self.cov_template = cov


def _make_detection(ctx: "_FrameContext", actor: ActorState, normals: np.ndarray,
                    uniforms: np.ndarray, t: Timestamp):
    sensor = ctx.sensor
    sensor_pose = ctx.sensor_pose
    class_dist = _reported_class(actor.obj_class, sensor, uniforms[1], uniforms[2])
    rot_inv = ctx.rot_inv
    rel_pos = rot_inv @ (actor.position - sensor_pose.position)
    rel_vel = rot_inv @ actor.velocity
    rel_heading = wrap_heading(actor.heading - sensor_pose.heading)
    noisy_dims = tuple(max(0.1, d + n * sensor.sigma_dim)
                       for d, n in zip(actor.dims, normals[6:9]))

    if sensor.modality is Modality.LIDAR:
        position = rel_pos + normals[0:3] * sensor.sigma_pos
        velocity = rel_vel + normals[3:6] * sensor.sigma_vel
        return TrackedObject(
            track_id=actor.actor_id,
            class_dist=class_dist,
            position=position,
            velocity=velocity,
            heading=rel_heading + normals[9] * sensor.sigma_heading,
            dims=noisy_dims,
            cov=ctx.cov_template,
            existence=sensor.existence_confidence,
            stamp=t,
            sources=sensor.modality.source,
            frame=sensor.sensor_id,
        )

    if sensor.modality is Modality.RADAR:
        center = rel_pos[:2] + normals[0:2] * sensor.sigma_pos
        velocity = rel_vel[:2] + normals[3:5] * sensor.sigma_vel
        return RadarDetection(
            track_id=actor.actor_id,
            center=(float(center[0]), float(center[1])),
            length=noisy_dims[0],
            width=noisy_dims[1],
            heading=wrap_heading(rel_heading + normals[9] * sensor.sigma_heading),
            velocity=(float(velocity[0]), float(velocity[1])),
            class_dist=class_dist,
        )

    # cameras: project the ground-truth box through the pinhole model;
    # project_box expects the object in the agent frame the camera is mounted in
    cam = sensor.camera
    agent_pose = ctx.agent_pose
    rel_agent = rot3z(agent_pose.heading).T @ (actor.position - agent_pose.position)
    probe = TrackedObject(
        track_id=actor.actor_id,
        class_dist=class_dist,
        position=rel_agent,
        velocity=np.zeros(3),
        heading=wrap_heading(actor.heading - agent_pose.heading),
        dims=actor.dims,
        cov=np.eye(6),
        existence=1.0,
        stamp=t,
        sources=sensor.modality.source,
        frame=agent_pose.agent_id,
    )
    box = project_box(probe, cam)
    if box is None:
        return None
    jitter = normals[0:4] * sensor.sigma_pos
    xs = sorted((box.x_min + jitter[0], box.x_max + jitter[1]))
    ys = sorted((box.y_min + jitter[2], box.y_max + jitter[3]))
    clamped = Box2D(
        min(max(xs[0], 0.0), cam.image_width),
        min(max(ys[0], 0.0), cam.image_height),
        min(max(xs[1], 0.0), cam.image_width),
        min(max(ys[1], 0.0), cam.image_height),
    )
    if clamped.area <= 0.0:
        return None
    return CameraDetection(
        track_id=actor.actor_id,
        box=clamped,
        score=sensor.existence_confidence,
        class_dist=class_dist,
    )


class SensorStream:
    """Stateful per-sensor frame source handling frozen/dropout faults."""

    def __init__(self, world: ScenarioWorld, sensor: SensorModel, root_rng: Rng):
        self.world = world
        self.sensor = sensor
        self._rng = root_rng.substream(f"sensor:{sensor.sensor_id}")
        self._last_frame: Optional[SensorFrame] = None

    def due(self, t: Timestamp) -> bool:
        return t.micros % self.sensor.period_micros == 0

    def step(self, t: Timestamp) -> Optional[SensorFrame]:
        """Produce the frame for grid instant t (None on dropout)."""
        fault = self.world.fault_at(self.sensor.sensor_id, t)
        if fault is FaultKind.DROPOUT:
            return None
        if fault is FaultKind.FROZEN:
            return self._last_frame
        agent_pose = self.world.agent_pose(
            self.world.agent_of_sensor(self.sensor.sensor_id), t)
        frame = sense(self.world, self.sensor, agent_pose, t, self._rng)
        self._last_frame = frame
        return frame


# ---------------------------------------------------------------------------
# scenario file loading

def _require(mapping: dict, key: str, where: str):
    if key not in mapping:
        raise ScenarioError(f"{where}: missing required key '{key}'")
    return mapping[key]


def _parse_class(name, where: str) -> ObjectClass:
    key = str(name).lower()
    if key not in _CLASS_NAMES:
        raise ScenarioError(
            f"{where}: unknown class '{name}' (valid: {sorted(_CLASS_NAMES)})")
    return _CLASS_NAMES[key]


def _parse_trajectory(d: dict, where: str) -> Trajectory:
    start = _require(d, "start", where)
    pos = _require(start, "position", f"{where}.start")
    if len(pos) < 2:
        raise ScenarioError(f"{where}.start.position needs at least [x, y]")
    heading = math.radians(float(start.get("heading_deg", 0.0)))
    segments = []
    for i, seg in enumerate(d.get("segments", [])):
        seg_where = f"{where}.segments[{i}]"
        kind = _require(seg, "kind", seg_where)
        if kind not in ("cv", "turn"):
            raise ScenarioError(f"{seg_where}: kind must be 'cv' or 'turn', got '{kind}'")
        duration = float(_require(seg, "duration_s", seg_where))
        if duration <= 0:
            raise ScenarioError(f"{seg_where}: duration_s must be positive")
        segments.append(
            Segment(
                kind=kind,
                duration_s=duration,
                speed_mps=float(seg.get("speed_mps", 0.0)),
                yaw_rate_rps=math.radians(float(seg.get("yaw_rate_dps", 0.0))),
            )
        )
    return Trajectory(float(pos[0]), float(pos[1]), wrap_heading(heading), tuple(segments))


def _parse_sensor(d: dict, where: str) -> SensorModel:
    modality_name = str(_require(d, "modality", where)).lower()
    try:
        modality = Modality(modality_name)
    except ValueError:
        raise ScenarioError(
            f"{where}: unknown modality '{modality_name}' "
            f"(valid: {[m.value for m in Modality]})") from None
    mount = d.get("mount", {})
    mount_pos = tuple(float(v) for v in mount.get("position", (0.0, 0.0, 0.0)))
    if len(mount_pos) == 2:
        mount_pos = (*mount_pos, 0.0)
    noise = d.get("noise", {})
    camera = None
    if "camera" in d:
        c = d["camera"]
        camera = CameraModel(
            fx=float(_require(c, "fx", f"{where}.camera")),
            fy=float(_require(c, "fy", f"{where}.camera")),
            cx=float(_require(c, "cx", f"{where}.camera")),
            cy=float(_require(c, "cy", f"{where}.camera")),
            image_width=int(_require(c, "width", f"{where}.camera")),
            image_height=int(_require(c, "height", f"{where}.camera")),
            mount_position=mount_pos,
            mount_heading=math.radians(float(mount.get("heading_deg", 0.0))),
        )
    try:
        return SensorModel(
            sensor_id=int(_require(d, "id", where)),
            modality=modality,
            mount_position=mount_pos,
            mount_heading=math.radians(float(mount.get("heading_deg", 0.0))),
            fov_rad=math.radians(float(d.get("fov_deg", 360.0))),
            max_range_m=float(d.get("max_range_m", 100.0)),
            detection_prob_base=float(d.get("detection_prob", 0.9)),
            sigma_pos=float(noise.get("pos", 0.1)),
            sigma_vel=float(noise.get("vel", 0.2)),
            sigma_dim=float(noise.get("dim", 0.05)),
            sigma_heading=float(noise.get("heading", 0.02)),
            class_confusion=float(d.get("class_confusion", 0.02)),
            night_factor=float(d.get("night_factor",
                                     DEFAULT_NIGHT_FACTOR[modality.value])),
            frame_rate_hz=float(d.get("frame_rate_hz", 10.0)),
            existence_confidence=float(d.get("existence_confidence", 0.7)),
            camera=camera,
        )
    except ValueError as exc:
        raise ScenarioError(f"{where}: {exc}") from None


def config_from_dict(doc: dict, name: str = "unnamed") -> ScenarioConfig:
    where = "$"
    version = _require(doc, "schema_version", where)
    if version != SCHEMA_VERSION:
        raise ScenarioError(f"{where}: schema_version {version} unsupported "
                            f"(expected {SCHEMA_VERSION})")
    actors = []
    for i, a in enumerate(doc.get("actors", [])):
        a_where = f"$.actors[{i}]"
        dims = _require(a, "dims", a_where)
        if len(dims) != 3 or any(float(d) <= 0 for d in dims):
            raise ScenarioError(f"{a_where}: dims must be three positive numbers")
        actors.append(
            Actor(
                actor_id=int(_require(a, "id", a_where)),
                obj_class=_parse_class(_require(a, "class", a_where), a_where),
                dims=tuple(float(d) for d in dims),
                trajectory=_parse_trajectory(a, a_where),
            )
        )
    agents = []
    for i, a in enumerate(doc.get("agents", [])):
        a_where = f"$.agents[{i}]"
        kind = str(a.get("kind", "vehicle"))
        if kind not in ("vehicle", "infrastructure"):
            raise ScenarioError(f"{a_where}: kind must be vehicle|infrastructure")
        sensors = tuple(
            _parse_sensor(s, f"{a_where}.sensors[{j}]")
            for j, s in enumerate(a.get("sensors", []))
        )
        start = a.get("start", {})
        pos = start.get("position", (0.0, 0.0))
        agents.append(
            AgentSpec(
                agent_id=int(_require(a, "id", a_where)),
                kind=kind,
                trajectory=_parse_trajectory(a, a_where),
                z=float(pos[2]) if len(pos) > 2 else 0.0,
                sensors=sensors,
            )
        )
    faults = []
    valid_faults = [k.value for k in FaultKind]
    for i, f in enumerate(doc.get("faults", [])):
        f_where = f"$.faults[{i}]"
        kind_name = str(_require(f, "kind", f_where)).lower()
        if kind_name not in valid_faults:
            raise ScenarioError(
                f"{f_where}: unknown fault '{kind_name}' (valid: {valid_faults})")
        try:
            faults.append(
                FaultWindow(
                    sensor_id=int(_require(f, "sensor_id", f_where)),
                    kind=FaultKind(kind_name),
                    start_s=float(_require(f, "start_s", f_where)),
                    end_s=float(_require(f, "end_s", f_where)),
                )
            )
        except ValueError as exc:
            raise ScenarioError(f"{f_where}: {exc}") from None
    illumination_name = str(doc.get("illumination", "day")).lower()
    try:
        illumination = Illumination(illumination_name)
    except ValueError:
        raise ScenarioError(
            f"$.illumination: unknown value '{illumination_name}' "
            f"(valid: {[v.value for v in Illumination]})") from None
    channel_doc = doc.get("channel", {})
    try:
        channel = ChannelConfig(
            mean_delay_s=float(channel_doc.get("mean_delay_s", 0.003)),
            max_delay_s=float(channel_doc.get("max_delay_s", 0.005)),
            min_delay_s=float(channel_doc.get("min_delay_s", 0.001)),
            loss_prob=float(channel_doc.get("loss_prob", 0.0)),
            max_range_m=float(channel_doc.get("max_range_m", 1000.0)),
        )
    except ValueError as exc:
        raise ScenarioError(f"$.channel: {exc}") from None
    try:
        return ScenarioConfig(
            seed=int(doc.get("seed", 0)),
            duration_s=float(_require(doc, "duration_s", where)),
            actors=tuple(actors),
            agents=tuple(agents),
            faults=tuple(faults),
            illumination=illumination,
            channel=channel,
            ego_agent_id=doc.get("ego_agent_id"),
            fusion_overrides=dict(doc.get("fusion", {})),
            name=str(doc.get("name", name)),
        )
    except ValueError as exc:
        raise ScenarioError(f"$: {exc}") from None


def load_scenario(path) -> ScenarioConfig:
    """Load and fully validate a scenario file."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ScenarioError(f"scenario file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ScenarioError(
            f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}"
        ) from None
    if not isinstance(doc, dict):
        raise ScenarioError(f"{path}: top level must be an object")
    import os
    return config_from_dict(doc, name=os.path.splitext(os.path.basename(str(path)))[0])


def bundled_scenario_path(name: str):
    """Filesystem path of a scenario shipped inside the package."""
    from importlib.resources import files

    path = files("coopsense").joinpath("scenarios", f"{name}.json")
    if not path.is_file():
        available = sorted(p.name[:-5] for p in files("coopsense").joinpath(
            "scenarios").iterdir() if p.name.endswith(".json"))
        raise ScenarioError(f"no bundled scenario '{name}' (available: {available})")
    return path


def bundled_scenario_names():
    from importlib.resources import files

    return sorted(p.name[:-5] for p in files("coopsense").joinpath("scenarios").iterdir()
                  if p.name.endswith(".json"))


def ground_truth_rows(world: ScenarioWorld, tick_s: float = 0.01):
    """Rows (t, actor_id, x, y, z, heading, vx, vy, class) on the tick grid."""
    n_ticks = int(round(world.config.duration_s / tick_s))
    for k in range(n_ticks + 1):
        t = Timestamp(int(round(k * tick_s * 1e6)))
        for state in world.world_at(t):
            yield (
                t.seconds,
                state.actor_id,
                float(state.position[0]),
                float(state.position[1]),
                float(state.position[2]),
                state.heading,
                float(state.velocity[0]),
                float(state.velocity[1]),
                state.obj_class.name,
            )
