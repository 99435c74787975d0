import math

import numpy as np
import pytest

from coopsense.core import (
    AgentPose,
    ClassDistribution,
    ObjectClass,
    SensorSource,
    Timestamp,
    TrackedObject,
    WORLD_FRAME,
)
from coopsense.cpm import CpmMessage
from coopsense.fusion import (
    FusionConfig,
    StaleTrack,
    TrackTable,
    associate,
    fuse_class_dists,
    fuse_pair,
    inter_fuse_step,
    intra_fuse_step,
    make_cv_matrices,
    nms_merge_2d,
    predict_to,
    publish,
    radar_lift,
    update_existence,
)
from coopsense.geometry import Box2D, CameraModel
from coopsense.scenario import CameraDetection, Modality, RadarDetection, SensorFrame

CFG = FusionConfig()
T0 = Timestamp(0)
T100MS = Timestamp(100_000)


def obj(position, velocity=(0, 0, 0), cov=None, stamp=T0, heading=0.0,
        class_dist=None, existence=0.9, sources=SensorSource.LIDAR,
        dims=(4.0, 1.8, 1.5), frame=WORLD_FRAME, track_id=1):
    return TrackedObject(
        track_id=track_id,
        class_dist=class_dist or ClassDistribution.certain(ObjectClass.CAR),
        position=position,
        velocity=velocity,
        heading=heading,
        dims=dims,
        cov=np.eye(6) if cov is None else cov,
        existence=existence,
        stamp=stamp,
        sources=sources,
        frame=frame,
    )


def random_spd(rng, scale=1.0):
    a = rng.normal(size=(6, 6))
    return scale * (a @ a.T) + 0.5 * np.eye(6)


# ---------------------------------------------------------------------------
# predict_to

def test_predict_zero_dt_unchanged():
    o = obj([1, 2, 3], velocity=[1, 1, 1])
    assert predict_to(o, T0, 1.0) is o


def test_predict_linear_motion():
    o = obj([0, 0, 0], velocity=[2, 1, 0])
    out = predict_to(o, Timestamp(500_000), 0.0)
    assert np.allclose(out.position, [1.0, 0.5, 0.0])
    assert np.allclose(out.velocity, o.velocity)
    assert out.stamp == Timestamp(500_000)


def test_predict_covariance_matches_matrix_oracle():
    # scalar case embedded on the x axis: P = I, dt = 1, q = 0
    o = obj([0, 0, 0], stamp=T0)
    out = predict_to(o, Timestamp(1_000_000), 0.0)
    # oracle: F = [[1,1],[0,1]] acting on (x, vx)
    f = np.array([[1.0, 1.0], [0.0, 1.0]])
    oracle = f @ np.eye(2) @ f.T
    assert out.cov[0, 0] == pytest.approx(oracle[0, 0])  # position variance 2
    assert out.cov[0, 3] == pytest.approx(oracle[0, 1])  # cross-covariance 1
    assert out.cov[3, 3] == pytest.approx(oracle[1, 1])


def test_predict_covariance_stays_psd_both_directions():
    rng = np.random.default_rng(0)
    base_stamp = Timestamp(1_000_000)
    for _ in range(50):
        cov = random_spd(rng)
        o = obj(rng.normal(size=3), velocity=rng.normal(size=3), cov=cov,
                stamp=base_stamp)
        dt = float(rng.uniform(-0.9, 0.9))
        out = predict_to(o, base_stamp.plus_micros(int(dt * 1e6)), 2.0)
        assert np.min(np.linalg.eigvalsh(out.cov)) >= -1e-9


def test_predict_stale_gate():
    o = obj([0, 0, 0])
    with pytest.raises(StaleTrack):
        predict_to(o, Timestamp(1_100_000), 1.0)
    # backwards within the gate is allowed
    late = obj([0, 0, 0], stamp=Timestamp(500_000))
    back = predict_to(late, T0, 1.0)
    assert back.stamp == T0


def test_make_cv_q_outer_product():
    f, q = make_cv_matrices(0.1, 2.0)
    g = np.zeros((6, 3))
    g[0, 0] = g[1, 1] = g[2, 2] = 0.5 * 0.01
    g[3, 0] = g[4, 1] = g[5, 2] = 0.1
    assert np.allclose(q, 4.0 * g @ g.T)


# ---------------------------------------------------------------------------
# association

def brute_force_match(tracks, observations, cfg):
    """Exhaustive assignment oracle: max cardinality, then min total cost."""
    from coopsense.fusion import _gated_cost

    n, m = len(tracks), len(observations)
    best_key, best_pairs = (1, float("inf")), []

    def recurse(i, used, pairs, total):
        nonlocal best_key, best_pairs
        if i == n:
            key = (-len(pairs), total)
            if key < best_key:
                best_key, best_pairs = key, sorted(pairs)
            return
        recurse(i + 1, used, pairs, total)
        for j in range(m):
            if j in used:
                continue
            ok, cost = _gated_cost(tracks[i], observations[j], cfg)
            if ok:
                recurse(i + 1, used | {j}, pairs + [(i, j)], total + cost)

    recurse(0, frozenset(), [], 0.0)
    return best_pairs


def test_associate_empty():
    assert associate([], [], CFG) == ([], [], [])
    a = [obj([0, 0, 0])]
    matches, ua, ub = associate(a, [], CFG)
    assert matches == [] and ua == [0] and ub == []


def test_associate_single_pair_within_gate():
    a = [obj([0, 0, 0])]
    b = [obj([0.5, 0, 0])]
    matches, ua, ub = associate(a, b, CFG)
    assert matches == [(0, 0)] and not ua and not ub


def test_associate_worked_example_vs_brute_force():
    a = [obj([0, 0, 0], track_id=1), obj([5, 0, 0], track_id=2)]
    b = [obj([0.4, 0, 0], track_id=3), obj([5.3, 0, 0], track_id=4)]
    matches, ua, ub = associate(a, b, CFG)
    assert sorted(matches) == [(0, 0), (1, 1)]
    assert brute_force_match(a, b, CFG) == sorted(matches)


def test_associate_against_brute_force_randomized():
    rng = np.random.default_rng(1)
    for _ in range(150):
        n, m = rng.integers(0, 5), rng.integers(0, 5)
        a = [obj(np.append(rng.uniform(-6, 6, 2), 0.0), track_id=10 + i,
                 dims=tuple(rng.uniform(0.5, 5, 3))) for i in range(n)]
        b = [obj(np.append(rng.uniform(-6, 6, 2), 0.0), track_id=50 + j,
                 dims=tuple(rng.uniform(0.5, 5, 3))) for j in range(m)]
        got = sorted(associate(a, b, CFG)[0])
        want = brute_force_match(a, b, CFG)
        assert len(got) == len(want)
        from coopsense.fusion import _gated_cost
        got_cost = sum(_gated_cost(a[i], b[j], CFG)[1] for i, j in got)
        want_cost = sum(_gated_cost(a[i], b[j], CFG)[1] for i, j in want)
        assert got_cost == pytest.approx(want_cost, abs=1e-9)


def test_associate_never_violates_gates():
    rng = np.random.default_rng(2)
    from coopsense.fusion import _gated_cost
    for _ in range(1000):
        n, m = rng.integers(0, 6), rng.integers(0, 6)
        a = [obj(np.append(rng.uniform(-10, 10, 2), 0.0), track_id=10 + i)
             for i in range(n)]
        b = [obj(np.append(rng.uniform(-10, 10, 2), 0.0), track_id=50 + j)
             for j in range(m)]
        matches, _, _ = associate(a, b, CFG)
        seen_a, seen_b = set(), set()
        for i, j in matches:
            assert i not in seen_a and j not in seen_b
            seen_a.add(i)
            seen_b.add(j)
            assert _gated_cost(a[i], b[j], CFG)[0]


# ---------------------------------------------------------------------------
# fuse_pair

def test_fuse_identical_halves_variance():
    a = obj([1, 2, 0], cov=np.eye(6))
    b = obj([1, 2, 0], cov=np.eye(6))
    fused = fuse_pair(a, b, CFG)
    assert np.allclose(fused.position, a.position, atol=1e-12)
    assert np.allclose(fused.cov, 0.5 * np.eye(6), atol=1e-12)


def test_fuse_1d_closed_form():
    a = obj([0, 0, 0], cov=np.eye(6))
    b = obj([2, 0, 0], cov=np.eye(6))
    fused = fuse_pair(a, b, CFG)
    assert fused.position[0] == pytest.approx(1.0, abs=1e-12)
    assert fused.cov[0, 0] == pytest.approx(0.5, abs=1e-12)


def test_fuse_matches_information_filter_oracle():
    rng = np.random.default_rng(3)
    for _ in range(300):
        p = random_spd(rng)
        r = random_spd(rng)
        xa = rng.normal(size=6)
        xb = rng.normal(size=6)
        a = obj(xa[:3], velocity=xa[3:], cov=p)
        b = obj(xb[:3], velocity=xb[3:], cov=r)
        fused = fuse_pair(a, b, CFG)
        # oracle: P_f = (P^-1 + R^-1)^-1, x_f = P_f (P^-1 x + R^-1 z)
        p_inv, r_inv = np.linalg.inv(p), np.linalg.inv(r)
        cov_oracle = np.linalg.inv(p_inv + r_inv)
        x_oracle = cov_oracle @ (p_inv @ xa + r_inv @ xb)
        assert np.allclose(np.concatenate([fused.position, fused.velocity]),
                           x_oracle, atol=1e-9)
        assert np.allclose(fused.cov, cov_oracle, atol=1e-9)
        # fused positional variance never exceeds either input's
        tr = np.trace(fused.cov[:3, :3])
        assert tr <= min(np.trace(p[:3, :3]), np.trace(r[:3, :3])) + 1e-9


def test_fuse_mean_commutes_for_equal_covariance():
    rng = np.random.default_rng(4)
    for _ in range(100):
        cov = random_spd(rng)
        xa, xb = rng.normal(size=6), rng.normal(size=6)
        a = obj(xa[:3], velocity=xa[3:], cov=cov)
        b = obj(xb[:3], velocity=xb[3:], cov=cov)
        ab = fuse_pair(a, b, CFG)
        ba = fuse_pair(b, a, CFG)
        assert np.allclose(ab.position, ba.position, atol=1e-9)
        assert np.allclose(ab.velocity, ba.velocity, atol=1e-9)


def test_fuse_class_weighted_product_worked_example():
    lidar_track = obj([0, 0, 0],
                      class_dist=ClassDistribution((0.6, 0.0, 0.4, 0.0)),
                      sources=SensorSource.LIDAR)
    camera_obs = obj([0, 0, 0],
                     class_dist=ClassDistribution((0.1, 0.0, 0.9, 0.0)),
                     sources=SensorSource.RGB)
    fused = fuse_pair(lidar_track, camera_obs, CFG)
    # hand arithmetic: Car 0.6*0.1^2 = 0.006, Ped 0.4*0.9^2 = 0.324
    assert fused.class_dist.prob(ObjectClass.PEDESTRIAN) == pytest.approx(0.324 / 0.330,
                                                                          abs=1e-9)
    assert fused.class_dist.prob(ObjectClass.CAR) == pytest.approx(0.006 / 0.330, abs=1e-9)
    assert fused.class_dist.argmax() == ObjectClass.PEDESTRIAN


def test_fuse_class_dists_function():
    a = ClassDistribution((0.6, 0.0, 0.4, 0.0))
    b = ClassDistribution((0.1, 0.0, 0.9, 0.0))
    out = fuse_class_dists(a, 1.0, b, 2.0)
    assert out.prob(ObjectClass.PEDESTRIAN) == pytest.approx(0.9818, abs=1e-3)
    # disjoint supports fall back gracefully
    c = ClassDistribution.certain(ObjectClass.CAR)
    d = ClassDistribution.certain(ObjectClass.PEDESTRIAN)
    mixed = fuse_class_dists(c, 1.0, d, 1.0)
    assert abs(sum(mixed.probs) - 1.0) < 1e-9


def test_fuse_shape_priority_lidar_over_camera_over_radar():
    radar_track = obj([0, 0, 0], dims=(3.0, 3.0, 1.5), sources=SensorSource.RADAR)
    lidar_obs = obj([0, 0, 0], dims=(4.5, 1.9, 1.4), sources=SensorSource.LIDAR)
    fused = fuse_pair(radar_track, lidar_obs, CFG)
    assert fused.dims == lidar_obs.dims
    # and the reverse keeps the better source's shape
    fused2 = fuse_pair(lidar_obs.replace(track_id=9), radar_track.replace(frame=0), CFG)
    assert fused2.dims == lidar_obs.dims


def test_fuse_radar_velocity_weighting():
    p = np.eye(6)
    r = np.eye(6)
    track = obj([0, 0, 0], velocity=[0, 0, 0], cov=p)
    radar_obs = obj([0, 0, 0], velocity=[4, 0, 0], cov=r, sources=SensorSource.RADAR)
    fused = fuse_pair(track, radar_obs, CFG)
    # oracle with R_vel / 4: K_vel = 1/(1 + 0.25) = 0.8
    assert fused.velocity[0] == pytest.approx(0.8 * 4.0, abs=1e-9)
    plain_obs = obj([0, 0, 0], velocity=[4, 0, 0], cov=r, sources=SensorSource.LIDAR)
    fused_plain = fuse_pair(track, plain_obs, CFG)
    assert fused_plain.velocity[0] == pytest.approx(2.0, abs=1e-9)


def test_fuse_requires_alignment():
    a = obj([0, 0, 0], stamp=T0)
    b = obj([0, 0, 0], stamp=T100MS)
    with pytest.raises(ValueError):
        fuse_pair(a, b, CFG)
    c = obj([0, 0, 0], frame=3)
    with pytest.raises(ValueError):
        fuse_pair(a, c, CFG)


# ---------------------------------------------------------------------------
# existence, publish, radar lift, NMS

def test_update_existence_examples():
    t = obj([0, 0, 0], existence=0.5)
    assert update_existence(t, [0.5], 0.0, CFG).existence == pytest.approx(0.75)
    t = obj([0, 0, 0], existence=0.8)
    assert update_existence(t, [], 0.0, CFG).existence == pytest.approx(0.8)
    t = obj([0, 0, 0], existence=1.0)
    assert update_existence(t, [0.3], 0.0, CFG).existence == pytest.approx(1.0)


def test_update_existence_decay():
    t = obj([0, 0, 0], existence=0.8)
    out = update_existence(t, [], 2.0, CFG)
    assert out.existence == pytest.approx(0.8 * math.exp(-0.3 * 2.0))


def test_existence_stays_in_unit_interval():
    rng = np.random.default_rng(5)
    for _ in range(2000):
        t = obj([0, 0, 0], existence=float(rng.uniform()))
        for _ in range(50):
            if rng.uniform() < 0.5:
                t = update_existence(t, [float(rng.uniform())], 0.0, CFG)
            else:
                t = update_existence(t, [], float(rng.uniform(0, 3)), CFG)
            assert 0.0 <= t.existence <= 1.0


def test_publish_threshold_and_drop():
    assert publish(TrackTable(), CFG) == []
    table = TrackTable()
    for p in (0.9, 0.5, 0.3, 0.04):
        table.insert(obj([0, 0, 0], existence=p), T0)
    out = publish(table, CFG)
    assert [o.existence for o in out] == [0.9, 0.5]
    # 0.04 < 0.05 drop threshold: removed from the table
    assert len(table) == 3
    # idempotent on an unchanged table
    assert [o.track_id for o in publish(table, CFG)] == [o.track_id for o in out]


def test_radar_lift_examples():
    det = RadarDetection(track_id=4, center=(3.0, 4.0), length=4.0, width=1.8,
                         heading=0.2, velocity=(5.0, -1.0),
                         class_dist=ClassDistribution.certain(ObjectClass.CAR))
    lifted = radar_lift(det, CFG, T0, frame=101, existence=0.7,
                        sigma_pos=0.3, sigma_vel=0.1)
    assert lifted.dims[2] == pytest.approx(1.5)
    assert np.allclose(lifted.position, [3.0, 4.0, 0.75])
    assert np.allclose(lifted.velocity, [5.0, -1.0, 0.0])
    assert lifted.cov[2, 2] == pytest.approx(10.0)
    assert lifted.sources == SensorSource.RADAR


def test_nms_merge_examples():
    box = Box2D(0, 0, 10, 10)
    assert nms_merge_2d([(box, 0.9, ObjectClass.CAR)], 0.5) == [(box, 0.9, ObjectClass.CAR)]

    dup = [(box, 0.9, ObjectClass.CAR), (box, 0.8, ObjectClass.CAR)]
    assert nms_merge_2d(dup, 0.5) == [dup[0]]

    a = (Box2D(0, 0, 10, 10), 0.9, ObjectClass.CAR)
    b = (Box2D(2, 0, 12, 10), 0.8, ObjectClass.CAR)    # iou with a = 8/12 = 0.67
    c = (Box2D(9, 9, 19, 19), 0.7, ObjectClass.CAR)    # iou with a = 1/199
    kept = nms_merge_2d([a, b, c], 0.5)
    assert kept == [a, c]
    # different class is never suppressed
    d = (Box2D(0, 0, 10, 10), 0.1, ObjectClass.PEDESTRIAN)
    assert d in nms_merge_2d([a, d], 0.5)


# ---------------------------------------------------------------------------
# pipeline steps

AGENT_POSE = AgentPose(10, [0.0, 0.0, 0.0], 0.0, T0)


def lidar_frame(detections, stamp=T0, sensor_id=100, conf=0.9):
    return SensorFrame(
        sensor_id=sensor_id, agent_id=10, modality=Modality.LIDAR, stamp=stamp,
        detections=tuple(detections), mount_position=(0, 0, 0), mount_heading=0.0,
        fov_rad=2 * math.pi, max_range_m=100.0, existence_confidence=conf,
        sigma_pos=0.1, sigma_vel=0.2)


def camera_frame(detections, stamp=T0, sensor_id=102, conf=0.9):
    cam = CameraModel(fx=500, fy=500, cx=320, cy=240, image_width=640, image_height=480)
    return SensorFrame(
        sensor_id=sensor_id, agent_id=10, modality=Modality.RGB, stamp=stamp,
        detections=tuple(detections), mount_position=(0, 0, 0), mount_heading=0.0,
        fov_rad=math.radians(90), max_range_m=60.0, existence_confidence=conf,
        sigma_pos=2.0, sigma_vel=0.0, camera=cam)


def sensor_det(position, sensor_id=100, class_dist=None, track_id=1, conf=0.9):
    return obj(position, cov=np.diag([0.01] * 3 + [0.04] * 3), frame=sensor_id,
               class_dist=class_dist, existence=conf, track_id=track_id)


def pose_at(t):
    return AgentPose(10, [0.0, 0.0, 0.0], 0.0, t)


def test_intra_no_frames_publishes_table():
    table = TrackTable()
    table.insert(obj([1, 1, 0], existence=0.9), T0)
    out = intra_fuse_step(table, [], AGENT_POSE, CFG, T0)
    assert len(out) == 1


def test_intra_births_from_lidar_frame():
    table = TrackTable()
    dets = [sensor_det([5.0, 0.0, 0.5], track_id=1),
            sensor_det([10.0, 2.0, 0.5], track_id=2)]
    out = intra_fuse_step(table, [lidar_frame(dets)], AGENT_POSE, CFG, T0)
    assert len(table) == 2
    # tentative births sit below the publish threshold (0.5 * 0.9 = 0.45)
    assert out == []
    for rec in table.records():
        assert rec.obj.existence == pytest.approx(0.45)
        assert rec.obj.frame == WORLD_FRAME


def test_intra_repeated_observation_confirms_and_fuses():
    table = TrackTable()
    for k in range(3):
        t = Timestamp(k * 100_000)
        det = sensor_det([5.0, 0.0, 0.5], track_id=1)
        frame = lidar_frame([det.replace(stamp=t)], stamp=t)
        out = intra_fuse_step(table, [frame], pose_at(t), CFG, t)
    assert len(table) == 1
    rec = table.records()[0]
    assert rec.obj.existence > 0.9
    assert len(out) == 1
    assert np.allclose(out[0].position, [5.0, 0.0, 0.5], atol=1e-6)
    # fused variance tightened below the single-measurement noise
    assert rec.obj.cov[0, 0] < 0.01


def test_intra_mixed_agent_frames_rejected():
    table = TrackTable()
    foreign = SensorFrame(
        sensor_id=200, agent_id=99, modality=Modality.LIDAR, stamp=T0,
        detections=(), mount_position=(0, 0, 0), mount_heading=0.0,
        fov_rad=2 * math.pi, max_range_m=100.0, existence_confidence=0.9)
    with pytest.raises(ValueError):
        intra_fuse_step(table, [foreign], AGENT_POSE, CFG, T0)


def test_intra_camera_class_dominates():
    table = TrackTable()
    lidar_dist = ClassDistribution((0.6, 0.0, 0.4, 0.0))
    cam_dist = ClassDistribution((0.1, 0.0, 0.9, 0.0))
    det = sensor_det([10.0, 0.0, 0.0], class_dist=lidar_dist)
    intra_fuse_step(table, [lidar_frame([det])], AGENT_POSE, CFG, T0)
    track = table.records()[0].obj
    assert track.class_dist.argmax() == ObjectClass.CAR

    cam_det = CameraDetection(track_id=1, box=Box2D(280, 200, 360, 280), score=0.9,
                              class_dist=cam_dist)
    # the camera box must overlap the projected track; the track at (10,0,0)
    # projects near the image center
    intra_fuse_step(table, [camera_frame([cam_det])], AGENT_POSE, CFG, T0)
    track = table.records()[0].obj
    assert track.class_dist.argmax() == ObjectClass.PEDESTRIAN
    assert SensorSource.RGB in track.sources


def test_intra_unobserved_in_fov_decays():
    table = TrackTable()
    table.insert(obj([5.0, 0.0, 0.5], existence=0.9, stamp=T0), T0)
    t1 = T100MS
    out = intra_fuse_step(table, [lidar_frame([], stamp=t1)], pose_at(t1), CFG, t1)
    rec = table.records()[0]
    assert rec.obj.existence == pytest.approx(0.9 * math.exp(-0.3 * 0.1))
    assert rec.misses == 1
    # a track outside the sensor's range is not penalized
    table2 = TrackTable()
    table2.insert(obj([500.0, 0.0, 0.5], existence=0.9, stamp=T0), T0)
    intra_fuse_step(table2, [lidar_frame([], stamp=t1)], pose_at(t1), CFG, t1)
    assert table2.records()[0].obj.existence == pytest.approx(0.9)


def test_intra_trust_scales_measurement_and_blocks_births():
    table = TrackTable()
    table.insert(obj([5.0, 0.0, 0.5], existence=0.9, cov=np.eye(6), stamp=T0), T0)
    det = sensor_det([5.2, 0.0, 0.5])
    intra_fuse_step(table, [lidar_frame([det])], AGENT_POSE, CFG, T0,
                    trust={100: 0.2})
    rec = table.records()[0]
    # oracle: R = diag(0.01..) / 0.2, K = P (P+R)^-1 on the x axis
    r = 0.01 / 0.2
    k = 1.0 / (1.0 + r)
    assert rec.obj.position[0] == pytest.approx(5.0 + k * 0.2, abs=1e-9)

    table2 = TrackTable()
    intra_fuse_step(table2, [lidar_frame([det])], AGENT_POSE, CFG, T0, trust={100: 0.0})
    assert len(table2) == 0
    assert table2.rejected_births == 1


def test_intra_radar_frames_get_lifted():
    table = TrackTable()
    det = RadarDetection(track_id=3, center=(8.0, 1.0), length=4.0, width=1.8,
                         heading=0.0, velocity=(3.0, 0.0),
                         class_dist=ClassDistribution.certain(ObjectClass.CAR))
    frame = SensorFrame(
        sensor_id=101, agent_id=10, modality=Modality.RADAR, stamp=T0,
        detections=(det,), mount_position=(0, 0, 0), mount_heading=0.0,
        fov_rad=2 * math.pi, max_range_m=150.0, existence_confidence=0.8,
        sigma_pos=0.3, sigma_vel=0.1)
    intra_fuse_step(table, [frame], AGENT_POSE, CFG, T0)
    rec = table.records()[0]
    assert rec.obj.position[2] == pytest.approx(0.75)
    assert rec.obj.dims[2] == pytest.approx(1.5)
    assert SensorSource.RADAR in rec.obj.sources


def remote_message(objects, sender_id=20, stamp=T0, seq=0):
    sender = AgentPose(sender_id, [0.0, 0.0, 0.0], 0.0, stamp)
    return CpmMessage(sender=sender, objects=tuple(objects), seq=seq)


def test_inter_empty_message_only_decay():
    table = TrackTable()
    table.insert(obj([1, 1, 0], existence=0.9), T0)
    out = inter_fuse_step(table, remote_message([]), pose_at(T0), CFG, T0)
    assert len(out) == 1
    assert table.stale_messages == 0


def test_inter_occluded_remote_object_becomes_track():
    table = TrackTable()
    remote_obj = obj([15.0, 3.0, 0.8], frame=20, existence=0.92,
                     sources=SensorSource.LIDAR, track_id=7)
    out = inter_fuse_step(table, remote_message([remote_obj]), pose_at(T0), CFG, T0)
    assert len(out) == 1
    track = out[0]
    assert SensorSource.REMOTE in track.sources
    assert track.existence == pytest.approx(0.92)
    assert np.allclose(track.position, [15.0, 3.0, 0.8])


def test_inter_duplicate_fuses_and_tightens():
    table = TrackTable()
    local = obj([10.0, 0.0, 0.5], existence=0.9, cov=np.eye(6) * 0.25, stamp=T0)
    table.insert(local, T0)
    remote_obj = obj([10.3, 0.0, 0.5], frame=20, existence=0.9,
                     cov=np.eye(6) * 0.25, track_id=5)
    out = inter_fuse_step(table, remote_message([remote_obj]), pose_at(T0), CFG, T0)
    assert len(out) == 1
    fused = out[0]
    assert float(np.trace(fused.cov[:3, :3])) < 0.75 - 1e-9
    assert 10.0 < fused.position[0] < 10.3


def test_inter_stale_message_dropped():
    table = TrackTable()
    old = remote_message([], stamp=T0)
    t_now = Timestamp(2_000_000)
    inter_fuse_step(table, old, pose_at(t_now), CFG, t_now)
    assert table.stale_messages == 1


def test_inter_sender_frame_transform():
    # sender at (10, 0) facing +y; its object at local (2, 0) is world (10, 2)
    sender = AgentPose(20, [10.0, 0.0, 0.0], math.pi / 2, T0)
    remote_obj = obj([2.0, 0.0, 0.0], frame=20, track_id=4)
    msg = CpmMessage(sender=sender, objects=(remote_obj,), seq=0)
    table = TrackTable()
    out = inter_fuse_step(table, msg, pose_at(T0), CFG, T0)
    assert np.allclose(out[0].position[:2], [10.0, 2.0], atol=1e-9)


def test_intra_then_inter_order_insensitive_at_set_level():
    def run(order):
        table = TrackTable()
        local = sensor_det([5.0, 0.0, 0.5])
        intra_fuse_step(table, [lidar_frame([local])], AGENT_POSE, CFG, T0)
        msg_a = remote_message([obj([20.0, 5.0, 0.5], frame=20, track_id=11,
                                    existence=0.9)], sender_id=20)
        msg_b = remote_message([obj([-15.0, -4.0, 0.5], frame=21, track_id=12,
                                    existence=0.85)], sender_id=21, seq=1)
        msgs = [msg_a, msg_b] if order == "ab" else [msg_b, msg_a]
        for m in msgs:
            inter_fuse_step(table, m, pose_at(T0), CFG, T0)
        return {
            (round(float(rec.obj.position[0]), 6), round(float(rec.obj.position[1]), 6),
             rec.obj.existence)
            for rec in table.records()
        }

    assert run("ab") == run("ba")
