"""Rigid planar transforms, rotated BEV box overlap, and pinhole projection.

All rotations are yaw-only; per-sensor roll/pitch are folded into the camera
extrinsics.  Functions here are pure and safe for parallel use.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import AgentPose, TrackedObject, Timestamp, wrap_heading


@dataclass(frozen=True)
class BevBox:
    """Rotated rectangle in the bird's-eye-view plane."""

    center: tuple
    length: float
    width: float
    heading: float

    def __post_init__(self):
        cx, cy = self.center
        object.__setattr__(self, "center", (float(cx), float(cy)))
        if self.length <= 0 or self.width <= 0:
            raise ValueError(f"box sides must be positive, got {self.length} x {self.width}")
        object.__setattr__(self, "length", float(self.length))
        object.__setattr__(self, "width", float(self.width))
        object.__setattr__(self, "heading", wrap_heading(float(self.heading)))

    @property
    def area(self) -> float:
        return self.length * self.width

    def corners(self):
        """Corner coordinates as a list of (x, y), counter-clockwise."""
        c, s = math.cos(self.heading), math.sin(self.heading)
        hl, hw = 0.5 * self.length, 0.5 * self.width
        cx, cy = self.center
        return [
            (cx + c * dx - s * dy, cy + s * dx + c * dy)
            for dx, dy in ((hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw))
        ]


@dataclass(frozen=True)
class Box2D:
    """Axis-aligned pixel rectangle, min corner <= max corner."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ValueError(f"min corner must not exceed max corner: {self}")

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    @property
    def center(self):
        return (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))


@dataclass(frozen=True)
class CameraModel:
    """Pinhole intrinsics plus the camera's mount pose in the agent frame.

    The optical axis points along mount_heading in the agent's ground plane;
    image x is to the right of it, image y is down.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    image_width: int
    image_height: int
    mount_position: tuple = (0.0, 0.0, 0.0)
    mount_heading: float = 0.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx <= self.image_width and 0 <= self.cy <= self.image_height):
            raise ValueError("principal point must lie inside the image")
        object.__setattr__(self, "mount_position", tuple(float(v) for v in self.mount_position))
        object.__setattr__(self, "mount_heading", wrap_heading(float(self.mount_heading)))


def rot2(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def rot3z(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def compose_pose(base: AgentPose, offset_position, offset_heading: float,
                 pose_id: int, stamp: Optional[Timestamp] = None) -> AgentPose:
    """World pose of something mounted at (offset_position, offset_heading) on `base`."""
    offset = np.asarray(offset_position, dtype=float).reshape(3)
    position = base.position + rot3z(base.heading) @ offset
    return AgentPose(
        pose_id, position, base.heading + offset_heading,
        base.stamp if stamp is None else stamp,
    )


def transform_object(obj: TrackedObject, frm: AgentPose, to: AgentPose) -> TrackedObject:
    """Re-express an object estimate from frame `frm` into frame `to`.

    Both poses must refer to the same instant as the object (temporal
    alignment happens first).  The covariance rotates as R P R^T with the
    planar rotation block; dims, class, and existence are untouched.
    """
    if obj.frame != frm.agent_id:
        raise ValueError(f"object tagged frame {obj.frame}, expected {frm.agent_id}")
    if frm.stamp != to.stamp or obj.stamp != frm.stamp:
        raise ValueError("transform endpoints must share the object's stamp")
    r_from = rot3z(frm.heading)
    r_to_inv = rot3z(to.heading).T
    world_pos = frm.position + r_from @ obj.position
    world_vel = r_from @ obj.velocity
    position = r_to_inv @ (world_pos - to.position)
    velocity = r_to_inv @ world_vel
    heading = wrap_heading(obj.heading + frm.heading - to.heading)
    rot = r_to_inv @ r_from
    rot6 = np.zeros((6, 6))
    rot6[:3, :3] = rot
    rot6[3:, 3:] = rot
    cov = rot6 @ obj.cov @ rot6.T
    return obj.replace(position=position, velocity=velocity, heading=heading,
                       cov=cov, frame=to.agent_id)


def _polygon_area(poly) -> float:
    """Shoelace area of a polygon given as [(x, y), ...]; positive if CCW."""
    area = 0.0
    n = len(poly)
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        area += x0 * y1 - x1 * y0
    return 0.5 * area


def _clip_polygon(subject, clip):
    """Sutherland-Hodgman clip of `subject` against convex CCW polygon `clip`."""
    output = list(subject)
    n = len(clip)
    for i in range(n):
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        input_poly = output
        output = []
        if not input_poly:
            break
        for j in range(len(input_poly)):
            px, py = input_poly[j - 1]
            qx, qy = input_poly[j]
            p_in = ex * (py - ay) - ey * (px - ax) >= 0.0
            q_in = ex * (qy - ay) - ey * (qx - ax) >= 0.0
            if q_in:
                if not p_in:
                    output.append(_edge_intersection(px, py, qx, qy, ax, ay, bx, by))
                output.append((qx, qy))
            elif p_in:
                output.append(_edge_intersection(px, py, qx, qy, ax, ay, bx, by))
    return output


def _edge_intersection(px, py, qx, qy, ax, ay, bx, by):
    dx, dy = qx - px, qy - py
    ex, ey = bx - ax, by - ay
    denom = ex * dy - ey * dx
    if denom == 0.0:
        return (qx, qy)
    t = (ex * (ay - py) - ey * (ax - px)) / denom
    return (px + t * dx, py + t * dy)


def bev_iou(a: BevBox, b: BevBox) -> float:
    """Intersection-over-union of two rotated BEV rectangles, in [0, 1]."""
    # corners() winds counter-clockwise, as the clipper expects
    inter = _clip_polygon(a.corners(), b.corners())
    if len(inter) < 3:
        return 0.0
    inter_area = abs(_polygon_area(inter))
    union = a.area + b.area - inter_area
    if union <= 0.0:
        return 0.0
    return min(1.0, inter_area / union)


def box2d_iou(a: Box2D, b: Box2D) -> float:
    """Axis-aligned IoU of two pixel boxes, in [0, 1]."""
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return min(1.0, inter / union)


def box_corners_3d(position, dims, heading: float) -> np.ndarray:
    """The 8 corner points of an oriented 3D box, shape (8, 3)."""
    length, width, height = dims
    hx, hy, hz = 0.5 * length, 0.5 * width, 0.5 * height
    signs = np.array(
        [[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)],
        dtype=float,
    )
    local = signs * np.array([hx, hy, hz])
    return np.asarray(position, dtype=float) + local @ rot3z(heading).T


def project_box(obj: TrackedObject, cam: CameraModel) -> Optional[Box2D]:
    """Project an object's 3D box into the image; None when not visible.

    The object must already be expressed in the agent frame the camera is
    mounted in.  Corners behind the image plane are dropped; the remaining
    hull is clamped to the image, matching detector behavior at borders.
    """
    corners = box_corners_3d(obj.position, obj.dims, obj.heading)
    rel = (corners - np.array(cam.mount_position)) @ rot3z(cam.mount_heading)
    # camera optical frame: Z forward along the mount heading, X right, Y down
    depth = rel[:, 0]
    visible = depth > 1e-9
    if not np.any(visible):
        return None
    x_right = -rel[visible, 1]
    y_down = -rel[visible, 2]
    z = depth[visible]
    u = cam.fx * x_right / z + cam.cx
    v = cam.fy * y_down / z + cam.cy
    x_min = max(0.0, float(np.min(u)))
    y_min = max(0.0, float(np.min(v)))
    x_max = min(float(cam.image_width), float(np.max(u)))
    y_max = min(float(cam.image_height), float(np.max(v)))
    if x_min >= x_max or y_min >= y_max:
        return None
    return Box2D(x_min, y_min, x_max, y_max)


def bev_of(obj: TrackedObject) -> BevBox:
    """The BEV footprint of a tracked object."""
    return BevBox((obj.position[0], obj.position[1]), obj.dims[0], obj.dims[1], obj.heading)
