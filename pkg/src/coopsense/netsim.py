"""Deterministic simulated V2X broadcast channel.

Single-shot broadcast semantics (no ACK, no retransmit, no forwarding) with a
triangular one-way delay matched to the measured envelope: min 1 ms, mean
3 ms, max 5 ms, and a hard range cutoff at 1 km.  All randomness comes from
the caller-supplied counter-based generator, so a seed fully determines the
delivery schedule.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import AgentPose, Rng, Timestamp


class ConfigError(ValueError):
    """Channel configuration outside the representable envelope."""


@dataclass(frozen=True)
class ChannelConfig:
    mean_delay_s: float = 0.003
    max_delay_s: float = 0.005
    min_delay_s: float = 0.001
    loss_prob: float = 0.0
    max_range_m: float = 1000.0

    def __post_init__(self):
        if not (0.0 <= self.min_delay_s <= self.mean_delay_s <= self.max_delay_s):
            raise ConfigError(
                f"need min <= mean <= max delay, got {self.min_delay_s}/"
                f"{self.mean_delay_s}/{self.max_delay_s}"
            )
        if not (0.0 <= self.loss_prob <= 1.0):
            raise ConfigError(f"loss_prob must lie in [0,1], got {self.loss_prob}")
        if self.max_range_m <= 0:
            raise ConfigError(f"max_range_m must be positive, got {self.max_range_m}")
        mode = self.delay_mode_s
        if not (self.min_delay_s - 1e-12 <= mode <= self.max_delay_s + 1e-12):
            raise ConfigError(
                f"mean delay {self.mean_delay_s} not reachable by a triangular "
                f"distribution on [{self.min_delay_s}, {self.max_delay_s}] "
                f"(mode {mode} outside)"
            )

    @property
    def delay_mode_s(self) -> float:
        """Triangle mode so the distribution mean equals mean_delay_s."""
        return 3.0 * self.mean_delay_s - self.min_delay_s - self.max_delay_s


def sample_delay(cfg: ChannelConfig, rng: Rng) -> float:
    """One-way delay draw in seconds, always within [min, max]."""
    if cfg.max_delay_s == cfg.min_delay_s:
        return cfg.min_delay_s
    return float(rng.triangular(cfg.min_delay_s, cfg.delay_mode_s, cfg.max_delay_s))


@dataclass(frozen=True)
class InFlightMessage:
    """A scheduled delivery of one broadcast payload to one receiver."""

    payload: bytes
    sender_id: int
    sender_position: tuple
    send_time: Timestamp
    delivery_time: Timestamp
    seq: int


class Channel:
    """Broadcast medium connecting registered agents.

    Receivers poll with non-decreasing local time; deliveries become visible
    once their delivery time has passed.  Message order at a receiver is
    (delivery_time, sender_id, seq), so equal-time deliveries are stable.
    """

    def __init__(self, cfg: ChannelConfig):
        self.cfg = cfg
        self._positions: dict[int, np.ndarray] = {}
        self._queues: dict[int, list[InFlightMessage]] = {}
        self._last_poll: dict[int, Timestamp] = {}
        self._send_counters: dict[int, int] = {}
        self.poll_count = 0
        self.broadcast_count = 0
        self.dropped_by_loss = 0
        self.dropped_by_range = 0

    def register(self, agent_id: int, position) -> None:
        if agent_id in self._queues:
            raise ValueError(f"agent {agent_id} already registered")
        self._queues[agent_id] = []
        self.update_position(agent_id, position)

    def update_position(self, agent_id: int, position) -> None:
        self._positions[agent_id] = np.asarray(position, dtype=float).reshape(3)

    def broadcast(self, payload: bytes, sender_pose: AgentPose, t: Timestamp, rng: Rng) -> None:
        """Schedule delivery to every in-range registered receiver.

        Loss and delay draws are consumed for every receiver in id order,
        independent of range, so a draw outcome at distance d implies the
        same outcome at any closer distance (range monotonicity).
        """
        if not payload:
            raise ValueError("payload must be non-empty")
        sender_id = sender_pose.agent_id
        seq = self._send_counters.get(sender_id, 0)
        self._send_counters[sender_id] = seq + 1
        self.broadcast_count += 1
        sender_pos = np.asarray(sender_pose.position, dtype=float)
        for receiver_id in sorted(self._queues):
            if receiver_id == sender_id:
                continue
            lost = rng.uniform() < self.cfg.loss_prob
            delay = sample_delay(self.cfg, rng)
            distance = float(np.linalg.norm(self._positions[receiver_id] - sender_pos))
            if distance > self.cfg.max_range_m:
                self.dropped_by_range += 1
                continue
            if lost:
                self.dropped_by_loss += 1
                continue
            self._queues[receiver_id].append(
                InFlightMessage(
                    payload=payload,
                    sender_id=sender_id,
                    sender_position=tuple(sender_pos),
                    send_time=t,
                    delivery_time=t.plus_micros(int(round(delay * 1e6))),
                    seq=seq,
                )
            )

    def poll(self, receiver_id: int, t: Timestamp):
        """All not-yet-collected messages with delivery_time <= t, in order."""
        if receiver_id not in self._queues:
            raise ValueError(f"agent {receiver_id} not registered")
        last = self._last_poll.get(receiver_id)
        if last is not None and t < last:
            raise ValueError(
                f"poll time regressed for agent {receiver_id}: {t.seconds} < {last.seconds}"
            )
        self._last_poll[receiver_id] = t
        self.poll_count += 1
        queue = self._queues[receiver_id]
        ready = [m for m in queue if m.delivery_time <= t]
        if ready:
            self._queues[receiver_id] = [m for m in queue if m.delivery_time > t]
            ready.sort(key=lambda m: (m.delivery_time, m.sender_id, m.seq))
        return [(m.payload, m.delivery_time) for m in ready]
