"""Shared domain types: simulated clock, object classes, track states, poses, RNG.

Every other module builds on these. All types here are immutable value
objects; numpy array fields are frozen (writeable=False) so instances can be
shared across threads and hashed into frame fingerprints.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, replace
from enum import IntEnum, IntFlag

import numpy as np

TWO_PI = 2.0 * math.pi

#: frame tag of the global Cartesian world frame; scenario ids start at 1
WORLD_FRAME = 0


def wrap_heading(theta):
    """Wrap an angle (radians) to [-pi, pi); pi maps to -pi.

    Accepts a scalar or an ndarray. The half-open interval gives every
    heading exactly one representation, which the wire codec relies on.
    """
    if isinstance(theta, (float, int)):
        t = float(theta)
        if not math.isfinite(t):
            raise ValueError(f"heading must be finite, got {theta!r}")
        w = math.fmod(t + math.pi, TWO_PI)
        if w < 0.0:
            w += TWO_PI
        return w - math.pi
    arr = np.asarray(theta, dtype=float)
    if not np.isfinite(arr).all():
        raise ValueError(f"heading must be finite, got {theta!r}")
    wrapped = np.mod(arr + np.pi, TWO_PI) - np.pi
    if arr.ndim == 0:
        return float(wrapped)
    return wrapped


@dataclass(frozen=True, order=True)
class Timestamp:
    """Simulated clock instant, integer microseconds since scenario start."""

    micros: int

    def __post_init__(self):
        if not isinstance(self.micros, (int, np.integer)) or isinstance(self.micros, bool):
            raise TypeError(f"micros must be an integer, got {type(self.micros).__name__}")
        if self.micros < 0:
            raise ValueError(f"timestamp must be non-negative, got {self.micros}")
        object.__setattr__(self, "micros", int(self.micros))

    @classmethod
    def from_seconds(cls, seconds: float) -> "Timestamp":
        return cls(int(round(seconds * 1e6)))

    @property
    def seconds(self) -> float:
        return self.micros * 1e-6

    def __sub__(self, other: "Timestamp") -> float:
        """Signed duration in seconds."""
        return (self.micros - other.micros) * 1e-6

    def plus_micros(self, delta: int) -> "Timestamp":
        return Timestamp(self.micros + int(delta))


class ObjectClass(IntEnum):
    """Closed object taxonomy with stable 1-byte wire codes."""

    CAR = 0
    CYCLIST = 1
    PEDESTRIAN = 2
    UNKNOWN = 3

    @classmethod
    def from_wire(cls, code: int) -> "ObjectClass":
        try:
            return cls(code)
        except ValueError:
            raise ValueError(f"unknown object class code {code}") from None


class SensorSource(IntFlag):
    """Bit set naming which sensing routes contributed to a track.

    Bit positions are the wire flag bits 0..4.
    """

    LIDAR = 1
    RADAR = 2
    RGB = 4
    THERMAL = 8
    REMOTE = 16


ALL_SOURCES = (
    SensorSource.LIDAR,
    SensorSource.RADAR,
    SensorSource.RGB,
    SensorSource.THERMAL,
    SensorSource.REMOTE,
)

_N_CLASSES = len(ObjectClass)


@dataclass(frozen=True)
class ClassDistribution:
    """Probability distribution over ObjectClass, indexed by wire code."""

    probs: tuple

    def __post_init__(self):
        p = tuple(float(x) for x in self.probs)
        if len(p) != _N_CLASSES:
            raise ValueError(f"need {_N_CLASSES} probabilities, got {len(p)}")
        if any((x < 0.0 or x > 1.0 or not math.isfinite(x)) for x in p):
            raise ValueError(f"probabilities must lie in [0,1], got {p}")
        if abs(sum(p) - 1.0) > 1e-9:
            raise ValueError(f"probabilities must sum to 1 +- 1e-9, got {sum(p)}")
        object.__setattr__(self, "probs", p)

    @classmethod
    def certain(cls, obj_class: ObjectClass) -> "ClassDistribution":
        probs = [0.0] * _N_CLASSES
        probs[int(obj_class)] = 1.0
        return cls(tuple(probs))

    @classmethod
    def from_weights(cls, weights) -> "ClassDistribution":
        return normalize_class_dist(weights)

    def prob(self, obj_class: ObjectClass) -> float:
        return self.probs[int(obj_class)]

    def argmax(self) -> ObjectClass:
        # ties break toward the lower wire code
        best = max(range(_N_CLASSES), key=lambda i: (self.probs[i], -i))
        return ObjectClass(best)


def normalize_class_dist(raw) -> ClassDistribution:
    """Normalize a class->weight mapping into a ClassDistribution.

    All weights must be >= 0 and at least one > 0; proportions are preserved.
    """
    weights = [0.0] * _N_CLASSES
    for obj_class, w in dict(raw).items():
        w = float(w)
        if w < 0.0 or not math.isfinite(w):
            raise ValueError(f"class weight for {obj_class} must be >= 0 and finite, got {w}")
        weights[int(ObjectClass(obj_class))] = w
    total = sum(weights)
    if total <= 0.0:
        raise ValueError("at least one class weight must be positive")
    return ClassDistribution(tuple(w / total for w in weights))


def _frozen_array(value, shape) -> np.ndarray:
    # read-only arrays of the right shape were validated when first frozen
    if (isinstance(value, np.ndarray) and not value.flags.writeable
            and value.shape == shape and value.dtype == np.float64):
        return value
    arr = np.array(value, dtype=float, copy=True).reshape(shape)
    if not np.isfinite(arr).all():
        raise ValueError(f"array field must be finite, got {arr}")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class AgentPose:
    """Timestamped rigid (planar) pose of an agent in the world frame."""

    agent_id: int
    position: np.ndarray
    heading: float
    stamp: Timestamp

    def __post_init__(self):
        object.__setattr__(self, "position", _frozen_array(self.position, (3,)))
        object.__setattr__(self, "heading", wrap_heading(float(self.heading)))


def world_pose(stamp: Timestamp) -> AgentPose:
    """Identity pose of the world frame itself, for frame-change endpoints."""
    return AgentPose(WORLD_FRAME, np.zeros(3), 0.0, stamp)


# position/velocity state layout used by the 6x6 covariance
STATE_DIM = 6


@dataclass(frozen=True, eq=False)
class TrackedObject:
    """A sensor-local or fused 3D object estimate; the unit of fusion and messaging.

    `cov` is the full symmetric 6x6 covariance over (x, y, z, vx, vy, vz).
    `frame` tags the coordinate frame the state lives in: WORLD_FRAME or the
    id of an agent/sensor from the scenario.
    """

    track_id: int
    class_dist: ClassDistribution
    position: np.ndarray
    velocity: np.ndarray
    heading: float
    dims: tuple
    cov: np.ndarray
    existence: float
    stamp: Timestamp
    sources: SensorSource
    frame: int = WORLD_FRAME

    def __post_init__(self):
        object.__setattr__(self, "position", _frozen_array(self.position, (3,)))
        object.__setattr__(self, "velocity", _frozen_array(self.velocity, (3,)))
        object.__setattr__(self, "heading", wrap_heading(float(self.heading)))
        dims = tuple(float(d) for d in self.dims)
        if len(dims) != 3 or any(d <= 0.0 or not math.isfinite(d) for d in dims):
            raise ValueError(f"dims must be three positive numbers, got {self.dims}")
        object.__setattr__(self, "dims", dims)
        if not (0.0 <= self.existence <= 1.0):
            raise ValueError(f"existence must lie in [0,1], got {self.existence}")
        object.__setattr__(self, "existence", float(self.existence))
        object.__setattr__(self, "sources", SensorSource(self.sources))
        cov = self.cov
        if not (isinstance(cov, np.ndarray) and not cov.flags.writeable
                and cov.shape == (STATE_DIM, STATE_DIM) and cov.dtype == np.float64):
            cov = np.array(cov, dtype=float, copy=True).reshape((STATE_DIM, STATE_DIM))
            if not np.isfinite(cov).all():
                raise ValueError("covariance must be finite")
            asym = float(np.max(np.abs(cov - cov.T)))
            if asym > 1e-6 * max(1.0, float(np.max(np.abs(cov)))):
                raise ValueError(
                    f"covariance must be symmetric (max asymmetry {asym:.3e})")
            cov = 0.5 * (cov + cov.T)
            _check_psd(cov)
            cov.flags.writeable = False
        object.__setattr__(self, "cov", cov)

    def replace(self, **changes) -> "TrackedObject":
        return replace(self, **changes)

    def content_bytes(self) -> bytes:
        """Deterministic byte rendering of the numeric content, for fingerprints."""
        return struct.pack(
            "<Iq15dB",
            self.track_id & 0xFFFFFFFF,
            self.stamp.micros,
            *self.position,
            *self.velocity,
            self.heading,
            *self.dims,
            *self.class_dist.probs,
            self.existence,
            int(self.sources),
        ) + self.cov.tobytes()


def _check_psd(cov: np.ndarray, tol: float = -1e-9) -> None:
    # cheap path for diagonal matrices (sensor noise models, decoded wire covs)
    off = cov.copy()
    np.fill_diagonal(off, 0.0)
    if not off.any():
        smallest = float(np.min(np.diagonal(cov)))
    else:
        smallest = float(np.min(np.linalg.eigvalsh(cov)))
    if smallest < tol:
        raise ValueError(f"covariance not positive semi-definite (min eigenvalue {smallest:.3e})")


_MASK64 = (1 << 64) - 1


def _label_to_stream(parent_stream: int, label: str) -> int:
    digest = hashlib.blake2b(
        parent_stream.to_bytes(8, "big") + label.encode("utf-8"), digest_size=8
    ).digest()
    return int.from_bytes(digest, "big")


class Rng:
    """Counter-based random generator (Philox) with named substreams.

    Identical (seed, stream) and call sequence produce identical outputs on
    every platform; substreams derived from labels are independent, so
    per-sensor streams never interleave.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def substream(self, label: str) -> "Rng":
        return Rng(self.seed, _label_to_stream(self.stream, label))

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def triangular(self, left, mode, right, size=None):
        return self._gen.triangular(left, mode, right, size)

    def bytes(self, n: int) -> bytes:
        return self._gen.bytes(n)
