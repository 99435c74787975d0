"""Statistical sensor-condition monitoring over frame streams.

Replaces image-domain anomaly classifiers with stream features that the
simulator exposes: detection-count EMA against a learned healthy baseline,
inter-frame gaps, and exact-repeat counting.  Threshold placement bisects the
measured degradation multipliers (0.43 for a covered lens, 0.83 for a broken
one), so the rule set separates the injected fault classes by construction.

States carry fixed trust weights consumed by fusion: measurement covariance
is widened by 1/trust and track births are blocked entirely at trust 0.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from typing import Optional

from .core import Timestamp
from .scenario import SensorFrame


class HealthState(IntEnum):
    """Sensor condition, ordered by severity."""

    HEALTHY = 0
    DEGRADED = 1
    BLOCKED = 2
    FAILED = 3


TRUST = {
    HealthState.HEALTHY: 1.0,
    HealthState.DEGRADED: 0.5,
    HealthState.BLOCKED: 0.2,
    HealthState.FAILED: 0.0,
}

EMA_ALPHA = 0.1
BASELINE_FRAMES = 100
WINDOW = 50

BLOCKED_RATIO = 0.55
DEGRADED_RATIO = 0.90
ENTRY_STREAK = 20          # frames below a ratio before an alarm raises
IDENTICAL_LIMIT = 10       # exact-repeat frames before Blocked
MISSING_LIMIT = 10         # expected periods without a frame before Failed
RECOVERY_STREAK = 10       # frames of evidence before any downgrade

# alarms hold until the stream clears these bands (hysteresis)
DEGRADED_HOLD_RATIO = 0.97
BLOCKED_HOLD_RATIO = 0.75

# below this many detections per frame the count channel carries no signal
MIN_BASELINE = 0.5


@dataclass
class StreamStats:
    """Rolling per-sensor stream features."""

    frame_rate_hz: float
    ema: Optional[float] = None
    baseline: Optional[float] = None
    baseline_count: int = 0
    baseline_sum: float = 0.0
    frames_seen: int = 0
    missing_streak: int = 0
    identical_streak: int = 0
    below_blocked_streak: int = 0
    below_degraded_streak: int = 0
    recovery_streak: int = 0
    last_fingerprint: Optional[bytes] = None
    last_time: Optional[Timestamp] = None
    state: HealthState = HealthState.HEALTHY
    since: Timestamp = Timestamp(0)
    last_classified: Optional[Timestamp] = None

    @property
    def period_s(self) -> float:
        return 1.0 / self.frame_rate_hz


class SensorMonitor:
    """Per-agent monitor; observe() every expected frame slot, then classify()."""

    def __init__(self):
        self._stats: dict[int, StreamStats] = {}

    def register(self, sensor_id: int, frame_rate_hz: float) -> None:
        if sensor_id in self._stats:
            raise ValueError(f"sensor {sensor_id} already registered")
        self._stats[sensor_id] = StreamStats(frame_rate_hz=frame_rate_hz)

    def _get(self, sensor_id: int) -> StreamStats:
        if sensor_id not in self._stats:
            raise KeyError(f"unknown sensor {sensor_id}")
        return self._stats[sensor_id]

    def observe(self, sensor_id: int, frame: Optional[SensorFrame], t: Timestamp) -> None:
        """Account one expected frame slot (frame=None when nothing arrived)."""
        st = self._get(sensor_id)
        if st.last_time is not None and t < st.last_time:
            raise ValueError(f"observation time regressed for sensor {sensor_id}")
        st.last_time = t
        if frame is None:
            st.missing_streak += 1
            return
        st.missing_streak = 0
        st.frames_seen += 1

        fingerprint = frame.fingerprint()
        if (st.last_fingerprint is not None and fingerprint == st.last_fingerprint
                and len(frame.detections) > 0):
            st.identical_streak += 1
        else:
            st.identical_streak = 0
        st.last_fingerprint = fingerprint

        count = float(len(frame.detections))
        st.ema = count if st.ema is None else (1 - EMA_ALPHA) * st.ema + EMA_ALPHA * count
        if st.baseline is None:
            st.baseline_sum += count
            st.baseline_count += 1
            if st.baseline_count >= BASELINE_FRAMES:
                st.baseline = max(st.baseline_sum / st.baseline_count, 1e-6)
            return

        if st.baseline < MIN_BASELINE:
            return  # empty-scene baseline: count ratios carry no signal
        if st.ema < BLOCKED_RATIO * st.baseline:
            st.below_blocked_streak += 1
        else:
            st.below_blocked_streak = 0
        if st.ema < DEGRADED_RATIO * st.baseline:
            st.below_degraded_streak += 1
        else:
            st.below_degraded_streak = 0

    def _raw_state(self, st: StreamStats) -> HealthState:
        """Alarm level supported by the current evidence, before hysteresis."""
        if st.missing_streak > MISSING_LIMIT:
            return HealthState.FAILED
        candidates = [HealthState.HEALTHY]
        if st.below_blocked_streak >= ENTRY_STREAK or st.identical_streak >= IDENTICAL_LIMIT:
            candidates.append(HealthState.BLOCKED)
        if st.below_degraded_streak >= ENTRY_STREAK:
            candidates.append(HealthState.DEGRADED)
        # hold conditions: an active alarm persists while the stream is still
        # anywhere near the faulty band, preventing oscillation
        if st.baseline is not None and st.ema is not None and st.baseline >= MIN_BASELINE:
            if st.state >= HealthState.BLOCKED and (
                    st.ema < BLOCKED_HOLD_RATIO * st.baseline or st.identical_streak >= 3):
                candidates.append(HealthState.BLOCKED)
            if st.state >= HealthState.DEGRADED and st.ema < DEGRADED_HOLD_RATIO * st.baseline:
                candidates.append(HealthState.DEGRADED)
        if st.state >= HealthState.FAILED and st.missing_streak >= 1:
            candidates.append(HealthState.FAILED)
        return max(candidates)

    def classify(self, sensor_id: int, t: Timestamp) -> HealthState:
        """Decision rules plus hysteresis; call once per observed frame slot."""
        st = self._get(sensor_id)
        if st.last_classified is not None and st.last_classified == t:
            return st.state
        st.last_classified = t
        raw = self._raw_state(st)
        if raw >= st.state:
            if raw > st.state:
                st.since = t
            st.state = raw
            st.recovery_streak = 0
            return st.state
        st.recovery_streak += 1
        if st.recovery_streak >= RECOVERY_STREAK:
            st.state = raw
            st.since = t
            st.recovery_streak = 0
        return st.state

    def state(self, sensor_id: int) -> HealthState:
        return self._get(sensor_id).state

    def trust_weight(self, sensor_id: int) -> float:
        """Fixed trust of the current state, consumed by fusion."""
        return TRUST[self._get(sensor_id).state]

    def stats(self, sensor_id: int) -> StreamStats:
        return self._get(sensor_id)

    def sensor_ids(self):
        return sorted(self._stats)
