"""Track-to-track late fusion: alignment, association, and Kalman merging.

The same three-stage pipeline serves both intra-agent merging (across one
platform's sensors) and inter-agent merging (across V2X peers): observations
are aligned to a common time and frame, associated to the maintained track
set by Euclidean distance and BEV IoU gates, and fused with an adapted Kalman
update treating each observation as a measurement of the full state.

Class evidence is combined multiplicatively with per-source exponents
(cameras weigh more than LiDAR, LiDAR more than radar); shape comes from the
highest-priority source present (LiDAR first); radar velocities enter the
filter with tightened measurement noise.  Existence probabilities follow an
independent-evidence product on observation and exponential decay on misses,
and only tracks above the publish threshold leave the table.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import (
    AgentPose,
    ClassDistribution,
    SensorSource,
    Timestamp,
    TrackedObject,
    world_pose,
    wrap_heading,
)
from .geometry import (
    bev_iou,
    bev_of,
    box2d_iou,
    compose_pose,
    project_box,
    transform_object,
)
from .scenario import Modality, RadarDetection, SensorFrame

# z state of radar-lifted objects is a guess, not a measurement
RADAR_Z_VARIANCE = 10.0

# cost of an inadmissible pair; far above any gated cost
_FORBIDDEN = 1e9

# minimum trust divisor so a distrusted sensor widens covariances finitely
TRUST_FLOOR = 0.05


class StaleTrack(Exception):
    """Prediction across more than the allowed time gap."""


@dataclass(frozen=True)
class FusionConfig:
    dist_gate_m: float = 2.0
    iou_gate: float = 0.1
    class_weight: Mapping = field(default_factory=lambda: {
        SensorSource.RGB: 2.0,
        SensorSource.THERMAL: 2.0,
        SensorSource.LIDAR: 1.0,
        SensorSource.RADAR: 0.5,
        SensorSource.REMOTE: 1.0,
    })
    shape_priority: tuple = (SensorSource.LIDAR, SensorSource.RGB, SensorSource.THERMAL,
                             SensorSource.RADAR, SensorSource.REMOTE)
    velocity_weight: float = 4.0  # radar velocity measurement-noise divisor
    existence_publish_threshold: float = 0.5
    existence_decay_per_second: float = 0.3
    track_drop_threshold: float = 0.05
    radar_default_height_m: float = 1.5
    nms_iou: float = 0.5
    process_noise_accel: float = 2.0  # m/s^2, CV model white-noise level
    max_prediction_gap_s: float = 1.0

    def __post_init__(self):
        if not (0.0 < self.dist_gate_m and 0.0 <= self.iou_gate <= 1.0):
            raise ValueError("association gates out of range")
        for name in ("existence_publish_threshold", "track_drop_threshold"):
            if not (0.0 <= getattr(self, name) <= 1.0):
                raise ValueError(f"{name} must lie in [0,1]")
        if any(w <= 0 for w in self.class_weight.values()):
            raise ValueError("class weights must be positive")
        if self.velocity_weight < 1.0:
            raise ValueError("velocity_weight must be >= 1")

    @classmethod
    def with_overrides(cls, overrides: Mapping) -> "FusionConfig":
        known = {k: v for k, v in overrides.items() if k in cls.__dataclass_fields__}
        unknown = set(overrides) - set(known)
        if unknown:
            raise ValueError(f"unknown fusion config keys: {sorted(unknown)}")
        return cls(**known)


def make_cv_matrices(dt: float, q_accel: float):
    """Constant-velocity transition F and process noise Q for step dt."""
    f = np.eye(6)
    f[0, 3] = f[1, 4] = f[2, 5] = dt
    g = np.zeros((6, 3))
    g[0, 0] = g[1, 1] = g[2, 2] = 0.5 * dt * dt
    g[3, 0] = g[4, 1] = g[5, 2] = dt
    q = (q_accel ** 2) * (g @ g.T)
    return f, q


def predict_to(obj: TrackedObject, t: Timestamp, q_accel: float,
               max_gap_s: float = 1.0) -> TrackedObject:
    """Project a track state to time t with the CV model (both directions)."""
    dt = t - obj.stamp
    if abs(dt) > max_gap_s:
        raise StaleTrack(
            f"track {obj.track_id}: prediction gap {dt:.3f}s exceeds {max_gap_s}s")
    if dt == 0.0:
        return obj
    f, q = make_cv_matrices(dt, q_accel)
    cov = f @ obj.cov @ f.T + q
    return obj.replace(
        position=obj.position + obj.velocity * dt,
        cov=0.5 * (cov + cov.T),
        stamp=t,
    )


def _planar_distance(a: TrackedObject, b: TrackedObject) -> float:
    dx = a.position[0] - b.position[0]
    dy = a.position[1] - b.position[1]
    return math.hypot(dx, dy)


def _gated_cost(a: TrackedObject, b: TrackedObject, cfg: FusionConfig):
    """(admissible, cost) for one candidate pair."""
    dist = _planar_distance(a, b)
    # IoU can only clear the gate when footprints can overlap at all
    reach = 0.5 * (math.hypot(a.dims[0], a.dims[1]) + math.hypot(b.dims[0], b.dims[1]))
    iou = bev_iou(bev_of(a), bev_of(b)) if dist <= reach else 0.0
    admissible = dist <= cfg.dist_gate_m or iou >= cfg.iou_gate
    return admissible, dist - cfg.dist_gate_m * iou


def _solve_assignment(cost: np.ndarray, admissible: np.ndarray):
    """Minimum-cost assignment over admissible pairs (Hungarian, no greedy)."""
    if cost.size == 0:
        return []
    padded = np.where(admissible, cost, _FORBIDDEN)
    rows, cols = linear_sum_assignment(padded)
    return [(int(i), int(j)) for i, j in zip(rows, cols) if admissible[i, j]]


def associate(a: Sequence[TrackedObject], b: Sequence[TrackedObject], cfg: FusionConfig):
    """Match two aligned object lists.

    A pair is admissible iff planar distance <= dist_gate_m or BEV IoU >=
    iou_gate; the assignment minimizes sum(distance - dist_gate_m * iou) over
    admissible pairs, matching each track at most once.

    Returns (matches, unmatched_a, unmatched_b) as index lists.
    """
    n, m = len(a), len(b)
    if n == 0 or m == 0:
        return [], list(range(n)), list(range(m))
    cost = np.zeros((n, m))
    admissible = np.zeros((n, m), dtype=bool)
    for i, ta in enumerate(a):
        for j, tb in enumerate(b):
            admissible[i, j], cost[i, j] = _gated_cost(ta, tb, cfg)
    matches = _solve_assignment(cost, admissible)
    matched_a = {i for i, _ in matches}
    matched_b = {j for _, j in matches}
    return (matches,
            [i for i in range(n) if i not in matched_a],
            [j for j in range(m) if j not in matched_b])


def _class_evidence_weight(sources: SensorSource, cfg: FusionConfig) -> float:
    weights = [w for src, w in cfg.class_weight.items() if src in SensorSource(sources)]
    return max(weights) if weights else 1.0


def fuse_class_dists(a: ClassDistribution, weight_a: float,
                     b: ClassDistribution, weight_b: float) -> ClassDistribution:
    """Exponent-weighted product of class evidence: p ~ prod p_s^w_s."""
    raw = [(pa ** weight_a) * (pb ** weight_b) for pa, pb in zip(a.probs, b.probs)]
    total = sum(raw)
    if total <= 0.0:
        # disjoint supports: fall back to the plain product of mixtures
        raw = [0.5 * (pa + pb) for pa, pb in zip(a.probs, b.probs)]
        total = sum(raw)
    return ClassDistribution(tuple(r / total for r in raw))


def _shape_rank(sources: SensorSource, cfg: FusionConfig) -> int:
    for rank, src in enumerate(cfg.shape_priority):
        if src in SensorSource(sources):
            return rank
    return len(cfg.shape_priority)


def fuse_pair(global_track: TrackedObject, obs: TrackedObject,
              cfg: FusionConfig) -> TrackedObject:
    """Kalman-update the maintained track with one observation (H = identity).

    The observation's covariance is the measurement noise; when the
    observation carries radar evidence its velocity block is tightened by
    1/velocity_weight.  Class, shape, and heading fuse outside the filter.
    """
    if global_track.stamp != obs.stamp:
        raise ValueError("fuse_pair requires temporally aligned inputs")
    if global_track.frame != obs.frame:
        raise ValueError("fuse_pair requires a common frame")

    p = global_track.cov
    r = np.array(obs.cov, dtype=float, copy=True)
    if SensorSource.RADAR in obs.sources:
        r[3:6, 3:6] = r[3:6, 3:6] / cfg.velocity_weight

    x = np.concatenate([global_track.position, global_track.velocity])
    z = np.concatenate([obs.position, obs.velocity])
    s = p + r
    gain = np.linalg.solve(s.T, p.T).T  # K = P (P + R)^-1
    x_new = x + gain @ (z - x)
    cov_new = (np.eye(6) - gain) @ p
    cov_new = 0.5 * (cov_new + cov_new.T)

    w_global = _class_evidence_weight(global_track.sources, cfg)
    w_obs = _class_evidence_weight(obs.sources, cfg)
    class_dist = fuse_class_dists(global_track.class_dist, w_global,
                                  obs.class_dist, w_obs)

    dims = global_track.dims
    if _shape_rank(obs.sources, cfg) < _shape_rank(global_track.sources, cfg):
        dims = obs.dims

    # information-weighted circular mean of the two headings
    wg = 1.0 / max(float(np.trace(p[:3, :3])), 1e-9)
    wo = 1.0 / max(float(np.trace(r[:3, :3])), 1e-9)
    heading = math.atan2(
        wg * math.sin(global_track.heading) + wo * math.sin(obs.heading),
        wg * math.cos(global_track.heading) + wo * math.cos(obs.heading),
    )

    return global_track.replace(
        position=x_new[:3],
        velocity=x_new[3:],
        cov=cov_new,
        class_dist=class_dist,
        dims=dims,
        heading=wrap_heading(heading),
        sources=global_track.sources | obs.sources,
    )


def update_existence(track: TrackedObject, confidences: Iterable[float], dt_s: float,
                     cfg: FusionConfig) -> TrackedObject:
    """Existence recalculation: independent-evidence fusion or miss decay."""
    confs = [float(c) for c in confidences]
    p = track.existence
    if confs:
        miss = 1.0 - p
        for c in confs:
            if not (0.0 <= c <= 1.0):
                raise ValueError(f"confidence must lie in [0,1], got {c}")
            miss *= 1.0 - c
        p = 1.0 - miss
    else:
        p = p * math.exp(-cfg.existence_decay_per_second * max(dt_s, 0.0))
    return track.replace(existence=min(max(p, 0.0), 1.0))


def radar_lift(det: RadarDetection, cfg: FusionConfig, stamp: Timestamp, frame: int,
               existence: float, sigma_pos: float, sigma_vel: float) -> TrackedObject:
    """Lift a BEV radar object to 3D with the default height convention."""
    h = cfg.radar_default_height_m
    cov = np.diag([sigma_pos ** 2, sigma_pos ** 2, RADAR_Z_VARIANCE,
                   sigma_vel ** 2, sigma_vel ** 2, sigma_vel ** 2])
    return TrackedObject(
        track_id=det.track_id,
        class_dist=det.class_dist,
        position=[det.center[0], det.center[1], h / 2.0],
        velocity=[det.velocity[0], det.velocity[1], 0.0],
        heading=det.heading,
        dims=(det.length, det.width, h),
        cov=cov,
        existence=existence,
        stamp=stamp,
        sources=SensorSource.RADAR,
        frame=frame,
    )


def nms_merge_2d(boxes: Sequence, nms_iou: float):
    """Greedy same-class non-maximum suppression over (Box2D, score, class, ...).

    Ties break by higher score, then smaller input index.  Returns the kept
    entries in descending-score order; trailing tuple elements pass through.
    """
    order = sorted(range(len(boxes)), key=lambda k: (-boxes[k][1], k))
    kept = []
    for k in order:
        box_k, class_k = boxes[k][0], boxes[k][2]
        suppressed = any(
            class_k == boxes[j][2] and box2d_iou(box_k, boxes[j][0]) >= nms_iou
            for j in kept
        )
        if not suppressed:
            kept.append(k)
    return [boxes[k] for k in kept]


# ---------------------------------------------------------------------------
# track table and the two pipeline steps

@dataclass
class TrackRecord:
    obj: TrackedObject
    misses: int = 0
    last_update: Timestamp = Timestamp(0)
    last_existence_stamp: Timestamp = Timestamp(0)


class TrackTable:
    """The maintained global track set of one agent (world frame, single writer)."""

    def __init__(self):
        self._records: dict[int, TrackRecord] = {}
        self._next_id = 1
        self.stale_messages = 0
        self.rejected_births = 0

    def __len__(self):
        return len(self._records)

    def records(self):
        return [self._records[i] for i in sorted(self._records)]

    def get(self, track_id: int) -> Optional[TrackRecord]:
        return self._records.get(track_id)

    def insert(self, obj: TrackedObject, stamp: Timestamp) -> int:
        track_id = self._next_id
        self._next_id += 1
        self._records[track_id] = TrackRecord(
            obj=obj.replace(track_id=track_id),
            last_update=stamp,
            last_existence_stamp=stamp,
        )
        return track_id

    def publish(self, cfg: FusionConfig):
        """Tracks above the publish threshold; drops those below the drop threshold."""
        for track_id in [i for i, rec in self._records.items()
                         if rec.obj.existence < cfg.track_drop_threshold]:
            del self._records[track_id]
        return [rec.obj for _, rec in sorted(self._records.items())
                if rec.obj.existence >= cfg.existence_publish_threshold]


def publish(table: TrackTable, cfg: FusionConfig):
    return table.publish(cfg)


def _sensor_world_pose(frame: SensorFrame, agent_pose: AgentPose) -> AgentPose:
    return compose_pose(agent_pose, frame.mount_position, frame.mount_heading,
                        pose_id=frame.sensor_id)


def _in_sensor_coverage(obj: TrackedObject, frame: SensorFrame,
                        sensor_pose: AgentPose) -> bool:
    dx = obj.position[0] - sensor_pose.position[0]
    dy = obj.position[1] - sensor_pose.position[1]
    if math.hypot(dx, dy) > frame.max_range_m:
        return False
    if frame.fov_rad >= 2.0 * math.pi - 1e-12:
        return True
    bearing = wrap_heading(math.atan2(dy, dx) - sensor_pose.heading)
    return abs(bearing) <= frame.fov_rad / 2.0


def _predictable_records(table: TrackTable, stamp: Timestamp, cfg: FusionConfig):
    """Records predicted to stamp; tracks beyond the gap stay untouched."""
    out = []
    for rec in table.records():
        try:
            predicted = predict_to(rec.obj, stamp, cfg.process_noise_accel,
                                   cfg.max_prediction_gap_s)
        except StaleTrack:
            continue
        rec.obj = predicted
        out.append(rec)
    return out


def _decay_record(rec: TrackRecord, stamp: Timestamp, cfg: FusionConfig):
    dt = stamp - rec.last_existence_stamp
    rec.obj = update_existence(rec.obj, (), dt, cfg)
    rec.last_existence_stamp = stamp
    rec.misses += 1


def _observe_record(rec: TrackRecord, fused: TrackedObject, confidence: float,
                    stamp: Timestamp, cfg: FusionConfig):
    rec.obj = update_existence(fused, [confidence], 0.0, cfg)
    rec.last_update = stamp
    rec.last_existence_stamp = stamp
    rec.misses = 0


def _scale_measurement(obs: TrackedObject, trust: float) -> TrackedObject:
    if trust >= 1.0:
        return obs
    return obs.replace(cov=obs.cov / max(trust, TRUST_FLOOR))


def _fuse_3d_frame(table: TrackTable, observations, frame: SensorFrame,
                   sensor_pose: AgentPose, cfg: FusionConfig, trust: float):
    records = _predictable_records(table, frame.stamp, cfg)
    tracks = [rec.obj for rec in records]
    matches, unmatched_tracks, unmatched_obs = associate(tracks, observations, cfg)
    for i, j in matches:
        obs = _scale_measurement(observations[j], trust)
        fused = fuse_pair(tracks[i], obs, cfg)
        _observe_record(records[i], fused, frame.existence_confidence, frame.stamp, cfg)
    for j in unmatched_obs:
        if trust <= 0.0:
            table.rejected_births += 1
            continue
        obs = _scale_measurement(observations[j], trust)
        birth = update_existence(
            obs.replace(existence=0.0), [0.5 * frame.existence_confidence], 0.0, cfg)
        table.insert(birth, frame.stamp)
    for i in unmatched_tracks:
        if _in_sensor_coverage(records[i].obj, frame, sensor_pose):
            _decay_record(records[i], frame.stamp, cfg)


def _fuse_camera_frame(table: TrackTable, frame: SensorFrame, agent_pose: AgentPose,
                       cfg: FusionConfig, trust: float):
    detections = list(frame.detections)
    if not detections and len(table) == 0:
        return
    kept = nms_merge_2d(
        [(d.box, d.score, d.class_dist.argmax(), i) for i, d in enumerate(detections)],
        cfg.nms_iou)
    keep_idx = {item[3] for item in kept}
    detections = [d for i, d in enumerate(detections) if i in keep_idx]

    records = _predictable_records(table, frame.stamp, cfg)
    pose_at_stamp = AgentPose(agent_pose.agent_id, agent_pose.position,
                              agent_pose.heading, frame.stamp)
    projected = []
    for rec in records:
        obj_agent = transform_object(rec.obj, world_pose(frame.stamp), pose_at_stamp)
        box = project_box(obj_agent, frame.camera)
        projected.append(box)

    n, m = len(records), len(detections)
    matched_tracks = set()
    if n and m:
        cost = np.zeros((n, m))
        admissible = np.zeros((n, m), dtype=bool)
        for i, box in enumerate(projected):
            if box is None:
                continue
            for j, det in enumerate(detections):
                iou = box2d_iou(box, det.box)
                admissible[i, j] = iou >= cfg.iou_gate
                cost[i, j] = -iou
        for i, j in _solve_assignment(cost, admissible):
            det = detections[j]
            rec = records[i]
            source = (SensorSource.THERMAL if frame.modality is Modality.THERMAL
                      else SensorSource.RGB)
            w_track = _class_evidence_weight(rec.obj.sources, cfg)
            w_det = cfg.class_weight.get(source, 1.0)
            fused = rec.obj.replace(
                class_dist=fuse_class_dists(rec.obj.class_dist, w_track,
                                            det.class_dist, w_det),
                sources=rec.obj.sources | source,
            )
            _observe_record(rec, fused, det.score, frame.stamp, cfg)
            matched_tracks.add(i)
    # camera-only detections carry no depth: no births, spotted objects must
    # first be ranged by a 3D modality or a remote peer
    for i, rec in enumerate(records):
        if i not in matched_tracks and projected[i] is not None:
            _decay_record(rec, frame.stamp, cfg)


def intra_fuse_step(table: TrackTable, frames: Sequence[SensorFrame],
                    agent_pose: AgentPose, cfg: FusionConfig, t: Timestamp,
                    trust: Optional[Mapping] = None):
    """One intra-agent fusion step over this tick's sensor frames.

    Frames must be sorted by stamp and belong to one agent.  Returns the
    published track list (world frame).
    """
    trust = dict(trust or {})
    agent_ids = {f.agent_id for f in frames}
    if agent_ids - {agent_pose.agent_id}:
        raise ValueError(f"frames from foreign agents: {sorted(agent_ids)}")
    if any(frames[i].stamp > frames[i + 1].stamp for i in range(len(frames) - 1)):
        raise ValueError("frames must be sorted by stamp")

    for frame in frames:
        if abs(t - frame.stamp) > cfg.max_prediction_gap_s:
            continue  # long-frozen or replayed frame: unusable for fusion
        pose_at_stamp = AgentPose(agent_pose.agent_id, agent_pose.position,
                                  agent_pose.heading, frame.stamp)
        sensor_trust = float(trust.get(frame.sensor_id, 1.0))
        if frame.modality in (Modality.RGB, Modality.THERMAL):
            _fuse_camera_frame(table, frame, pose_at_stamp, cfg, sensor_trust)
            continue
        sensor_pose = _sensor_world_pose(frame, pose_at_stamp)
        observations = []
        for det in frame.detections:
            if isinstance(det, RadarDetection):
                det = radar_lift(det, cfg, frame.stamp, frame.sensor_id,
                                 frame.existence_confidence, frame.sigma_pos,
                                 frame.sigma_vel)
            observations.append(transform_object(det, sensor_pose,
                                                 world_pose(frame.stamp)))
        _fuse_3d_frame(table, observations, frame, sensor_pose, cfg, sensor_trust)

    return table.publish(cfg)


def inter_fuse_step(table: TrackTable, msg, ego_pose: AgentPose, cfg: FusionConfig,
                    t: Timestamp):
    """Merge one decoded remote perception message into the local table.

    Remote objects are transformed sender frame -> world, predicted to t, and
    run through the identical associate/fuse/publish path with the Remote
    source bit set.  Stale messages are dropped (counted, not an error).
    """
    age = t - msg.sender.stamp
    if age > cfg.max_prediction_gap_s or age < 0.0:
        table.stale_messages += 1
        return table.publish(cfg)

    observations = []
    for obj in msg.objects:
        world_obj = transform_object(obj, msg.sender, world_pose(msg.sender.stamp))
        world_obj = predict_to(world_obj, t, cfg.process_noise_accel,
                               cfg.max_prediction_gap_s)
        observations.append(world_obj.replace(sources=world_obj.sources
                                              | SensorSource.REMOTE))

    records = _predictable_records(table, t, cfg)
    tracks = [rec.obj for rec in records]
    matches, _, unmatched_obs = associate(tracks, observations, cfg)
    for i, j in matches:
        obs = observations[j]
        fused = fuse_pair(tracks[i], obs, cfg)
        _observe_record(records[i], fused, obs.existence, t, cfg)
    for j in unmatched_obs:
        obs = observations[j]
        # the sender already gated existence at its own publish threshold
        table.insert(obs, t)
    return table.publish(cfg)
