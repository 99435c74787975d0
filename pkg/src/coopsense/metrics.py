"""Detection and tracking quality against ground truth.

Per class: AP50 (all-point interpolated average precision at the 0.5 BEV-IoU
operating point), AR100 (recall keeping at most 100 detections per frame),
and recall-averaged AMOTA / AMOTP.  Matching is greedy in descending score;
cars and cyclists match by rotated BEV IoU, pedestrians by center distance
(small footprints make IoU brittle).

Classes with no ground truth report None ("absent"), never 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import ObjectClass, Timestamp, TrackedObject
from .geometry import BevBox, bev_iou, bev_of

#: pedestrian match gate, meters center distance
PED_MATCH_DIST_M = 1.0

#: default BEV IoU operating point
IOU_THRESHOLD = 0.5

N_RECALL_STEPS = 40


@dataclass(frozen=True)
class GroundTruthObject:
    actor_id: int
    obj_class: ObjectClass
    center: tuple        # (x, y) world
    length: float
    width: float
    heading: float

    def bev(self) -> BevBox:
        return BevBox(self.center, self.length, self.width, self.heading)


@dataclass(frozen=True)
class EvalFrame:
    """Predictions (score = existence) and ground truth for one tick."""

    stamp: Timestamp
    predictions: tuple   # TrackedObject, world frame
    ground_truth: tuple  # GroundTruthObject


@dataclass(frozen=True)
class MetricSet:
    ap50: Optional[float]
    ar100: Optional[float]
    amota: Optional[float]
    amotp: Optional[float]

    def as_dict(self):
        return {"ap50": self.ap50, "ar100": self.ar100,
                "amota": self.amota, "amotp": self.amotp}


def _matches_by_distance(obj_class: ObjectClass) -> bool:
    return obj_class is ObjectClass.PEDESTRIAN


class _ClassFrame:
    """Per-frame, per-class matching workspace with cached affinities."""

    __slots__ = ("scores", "pred_ids", "gt_ids", "affinity", "admissible", "distance")

    def __init__(self, preds: Sequence[TrackedObject], gts: Sequence[GroundTruthObject],
                 obj_class: ObjectClass, iou_thr: float):
        order = sorted(range(len(preds)), key=lambda k: (-preds[k].existence, k))
        preds = [preds[k] for k in order]
        self.scores = np.array([p.existence for p in preds])
        self.pred_ids = [p.track_id for p in preds]
        self.gt_ids = [g.actor_id for g in gts]
        n, m = len(preds), len(gts)
        self.affinity = np.zeros((n, m))
        self.admissible = np.zeros((n, m), dtype=bool)
        self.distance = np.zeros((n, m))
        by_distance = _matches_by_distance(obj_class)
        for i, p in enumerate(preds):
            box_p = bev_of(p)
            for j, g in enumerate(gts):
                d = math.hypot(p.position[0] - g.center[0], p.position[1] - g.center[1])
                self.distance[i, j] = d
                if by_distance:
                    self.affinity[i, j] = -d
                    self.admissible[i, j] = d <= PED_MATCH_DIST_M
                else:
                    # footprints further apart than their reach cannot overlap
                    reach = 0.5 * (math.hypot(p.dims[0], p.dims[1])
                                   + math.hypot(g.length, g.width))
                    iou = bev_iou(box_p, g.bev()) if d <= reach else 0.0
                    self.affinity[i, j] = iou
                    self.admissible[i, j] = iou >= iou_thr

    @property
    def n_preds(self) -> int:
        return len(self.pred_ids)

    @property
    def n_gts(self) -> int:
        return len(self.gt_ids)

    def greedy(self, prefix: int):
        """Match the top-`prefix` predictions in score order.

        Each prediction takes the best admissible unmatched ground truth
        (ties to the smaller gt index).  Returns [(pred_idx, gt_idx)].
        """
        taken = np.zeros(self.n_gts, dtype=bool)
        pairs = []
        for i in range(min(prefix, self.n_preds)):
            best_j, best_aff = -1, -math.inf
            for j in range(self.n_gts):
                if taken[j] or not self.admissible[i, j]:
                    continue
                if self.affinity[i, j] > best_aff:
                    best_j, best_aff = j, self.affinity[i, j]
            if best_j >= 0:
                taken[best_j] = True
                pairs.append((i, best_j))
        return pairs


def _filter_class(frame: EvalFrame, obj_class: ObjectClass):
    preds = [p for p in frame.predictions if p.class_dist.argmax() == obj_class]
    gts = [g for g in frame.ground_truth if g.obj_class == obj_class]
    return preds, gts


def match_frame(preds: Sequence[TrackedObject], gts: Sequence[GroundTruthObject],
                iou_thr: float = IOU_THRESHOLD,
                obj_class: ObjectClass = ObjectClass.CAR):
    """Greedy single-frame matching; returns (tp, fp, fn, matched distances)."""
    cf = _ClassFrame(preds, gts, obj_class, iou_thr)
    pairs = cf.greedy(cf.n_preds)
    tp = len(pairs)
    distances = [float(cf.distance[i, j]) for i, j in pairs]
    return tp, cf.n_preds - tp, cf.n_gts - tp, distances


def _prepare(frames: Sequence[EvalFrame], obj_class: ObjectClass, iou_thr: float):
    return [_ClassFrame(*_filter_class(f, obj_class), obj_class, iou_thr)
            for f in frames]


def _pooled_flags(class_frames):
    """(scores desc, tp flags) pooled over frames via full greedy matching.

    Greedy matching in score order has the prefix property: the matches of
    the top-k predictions do not depend on lower-scored ones, so per-frame
    flags computed once serve every score threshold.
    """
    scores, flags = [], []
    for cf in class_frames:
        matched = {i for i, _ in cf.greedy(cf.n_preds)}
        for i in range(cf.n_preds):
            scores.append(float(cf.scores[i]))
            flags.append(i in matched)
    order = sorted(range(len(scores)), key=lambda k: -scores[k])
    return ([scores[k] for k in order], [flags[k] for k in order])


def ap50(frames: Sequence[EvalFrame], obj_class: ObjectClass,
         iou_thr: float = IOU_THRESHOLD) -> Optional[float]:
    """All-point interpolated average precision (percent), or None without gt."""
    class_frames = _prepare(frames, obj_class, iou_thr)
    total_gt = sum(cf.n_gts for cf in class_frames)
    if total_gt == 0:
        return None
    scores, flags = _pooled_flags(class_frames)
    if not scores:
        return 0.0
    # one PR point per distinct score (threshold sweep semantics)
    points = []
    tp = fp = 0
    for k in range(len(scores)):
        tp += flags[k]
        fp += not flags[k]
        if k + 1 == len(scores) or scores[k + 1] != scores[k]:
            points.append((tp / total_gt, tp / (tp + fp)))
    ap = 0.0
    prev_recall = 0.0
    best_future = [0.0] * (len(points) + 1)
    for k in range(len(points) - 1, -1, -1):
        best_future[k] = max(points[k][1], best_future[k + 1])
    for k, (recall, _) in enumerate(points):
        if recall > prev_recall:
            ap += (recall - prev_recall) * best_future[k]
            prev_recall = recall
    return 100.0 * ap


def ar100(frames: Sequence[EvalFrame], obj_class: ObjectClass,
          iou_thr: float = IOU_THRESHOLD, max_per_frame: int = 100) -> Optional[float]:
    """Pooled recall with at most `max_per_frame` detections per frame (percent)."""
    class_frames = _prepare(frames, obj_class, iou_thr)
    total_gt = sum(cf.n_gts for cf in class_frames)
    if total_gt == 0:
        return None
    tp = sum(len(cf.greedy(max_per_frame)) for cf in class_frames)
    return 100.0 * tp / total_gt


def _clear_stats(class_frames, threshold: float):
    """CLEAR-style counts at one score threshold: tp, fp, fn, ids, distances."""
    tp = fp = fn = ids = 0
    distances = []
    last_match: dict = {}
    for cf in class_frames:
        prefix = int(np.searchsorted(-cf.scores, -threshold, side="right"))
        pairs = cf.greedy(prefix)
        tp += len(pairs)
        fp += prefix - len(pairs)
        fn += cf.n_gts - len(pairs)
        for i, j in pairs:
            gt_id = cf.gt_ids[j]
            pred_id = cf.pred_ids[i]
            if gt_id in last_match and last_match[gt_id] != pred_id:
                ids += 1
            last_match[gt_id] = pred_id
            distances.append(float(cf.distance[i, j]))
    return tp, fp, fn, ids, distances


def amota_amotp(frames: Sequence[EvalFrame], obj_class: ObjectClass,
                n_thresholds: int = N_RECALL_STEPS,
                iou_thr: float = IOU_THRESHOLD):
    """Recall-averaged MOTA and mean matched distance; (None, None) without gt.

    For each target recall r the operating threshold is the highest score
    achieving recall >= r; MOTAR(r) = clamp(1 - (IDS + FP + FN - (1-r) P) /
    (r P), 0, 1).  AMOTA averages over the achievable targets, AMOTP averages
    the mean matched center distance at the same operating points.
    """
    class_frames = _prepare(frames, obj_class, iou_thr)
    total_gt = sum(cf.n_gts for cf in class_frames)
    if total_gt == 0:
        return None, None
    scores, flags = _pooled_flags(class_frames)
    if not scores:
        return 0.0, 0.0
    # recall as a function of threshold, via the pooled tp flags
    tp_cum = np.cumsum(flags)
    recalls_at_k = tp_cum / total_gt
    motars, mean_dists = [], []
    stats_cache: dict = {}
    for step in range(1, n_thresholds + 1):
        r = step / n_thresholds
        k = int(np.searchsorted(recalls_at_k, r - 1e-12, side="left"))
        if k >= len(scores):
            continue  # target recall not achievable
        threshold = scores[k]
        if threshold not in stats_cache:
            stats_cache[threshold] = _clear_stats(class_frames, threshold)
        tp, fp, fn, ids, distances = stats_cache[threshold]
        motar = 1.0 - (ids + fp + fn - (1.0 - r) * total_gt) / (r * total_gt)
        motars.append(min(1.0, max(0.0, motar)))
        mean_dists.append(sum(distances) / len(distances) if distances else 0.0)
    if not motars:
        return 0.0, 0.0
    return (float(sum(motars) / len(motars)),
            float(sum(mean_dists) / len(mean_dists)))


def compute_metrics(frames: Sequence[EvalFrame], obj_class: ObjectClass,
                    n_thresholds: int = N_RECALL_STEPS) -> MetricSet:
    amota, amotp = amota_amotp(frames, obj_class, n_thresholds)
    return MetricSet(
        ap50=ap50(frames, obj_class),
        ar100=ar100(frames, obj_class),
        amota=amota,
        amotp=amotp,
    )


@dataclass
class EvalReport:
    """Per-pipeline, per-class metric values with a stable row schema."""

    values: dict = field(default_factory=dict)  # (pipeline, class_name) -> MetricSet

    def add(self, pipeline: str, obj_class: ObjectClass, metrics: MetricSet) -> None:
        self.values[(pipeline, obj_class.name)] = metrics

    def get(self, pipeline: str, obj_class: ObjectClass) -> Optional[MetricSet]:
        return self.values.get((pipeline, obj_class.name))

    def rows(self):
        """(pipeline, class, metric, value) rows; absent metrics are skipped."""
        out = []
        for (pipeline, class_name), ms in sorted(self.values.items()):
            for metric, value in ms.as_dict().items():
                if value is not None:
                    out.append((pipeline, class_name, metric, value))
        return out

    def to_json_obj(self):
        obj: dict = {}
        for (pipeline, class_name), ms in sorted(self.values.items()):
            obj.setdefault(pipeline, {})[class_name] = ms.as_dict()
        return obj
