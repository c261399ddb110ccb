"""Propagation, reception decisions and 1D mobility.

Reception is deterministic threshold-based by default (log-distance path loss
against a sensitivity floor); an optional seeded log-normal shadowing term can
be enabled per scenario.  Defaults are calibrated so a 3 dBm transmitter seen
through a 20 dB port attenuator reaches ~25 m.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

from scipy.optimize import brentq


@dataclass(frozen=True)
class RadioParams:
    tx_power_dbm: float = 3.0
    ext_attenuation_db: float = 20.0
    pl0_db: float = 40.0
    exponent: float = 2.36
    sensitivity_dbm: float = -90.0


@dataclass(frozen=True)
class Trajectory:
    """Constant-speed straight-line motion clamped at both ends."""

    start_pos: float
    end_pos: float = None  # type: ignore[assignment]
    speed: float = 0.0
    start_time: float = 0.0

    def __post_init__(self):
        if self.end_pos is None:
            object.__setattr__(self, "end_pos", self.start_pos)


def position_at(traj: Trajectory, t: float) -> float:
    if t <= traj.start_time or traj.speed == 0.0:
        return traj.start_pos
    pos = traj.start_pos + traj.speed * (t - traj.start_time)
    if traj.speed > 0:
        return min(pos, traj.end_pos)
    return max(pos, traj.end_pos)


def rssi_at(params: RadioParams, distance: float) -> float:
    """Received power in dBm at ``distance`` metres.

    Log-distance path loss referenced at 1 m; the port attenuation enters the
    link budget once per link.  Distances under the reference clamp to 1 m.
    """
    if distance <= 0:
        raise ValueError("distance must be positive")
    d = max(distance, 1.0)
    return (
        params.tx_power_dbm
        - params.ext_attenuation_db
        - params.pl0_db
        - 10.0 * params.exponent * math.log10(d)
    )


def coverage_radius(params: RadioParams, d_max: float = 10_000.0) -> float:
    """Distance at which the received power crosses the sensitivity floor."""
    if rssi_at(params, 1.0) <= params.sensitivity_dbm:
        return 1.0
    if rssi_at(params, d_max) > params.sensitivity_dbm:
        raise ValueError(f"coverage exceeds search bracket of {d_max} m")
    return float(
        brentq(lambda d: rssi_at(params, d) - params.sensitivity_dbm, 1.0, d_max)
    )


class Outcome(Enum):
    DELIVERED = "delivered"
    COLLISION = "collision"
    NOTHING = "nothing"


@dataclass(frozen=True)
class TransmissionAttempt:
    """One over-the-air transmission with its power as seen per receiver."""

    sender: str
    frame: object
    channel: int
    asn: int
    rssi_by_receiver: dict[str, float] = field(default_factory=dict)


@dataclass(frozen=True)
class SlotOutcome:
    outcome: Outcome
    attempt: TransmissionAttempt | None = None
    rssi: float | None = None


def resolve_listener(
    audible: list[tuple[TransmissionAttempt, float]],
) -> SlotOutcome:
    """Outcome for one listener given the attempts it can hear.

    Exactly one audible attempt is a delivery; two or more stomp on each other
    and nothing gets through.
    """
    if not audible:
        return SlotOutcome(Outcome.NOTHING)
    if len(audible) > 1:
        return SlotOutcome(Outcome.COLLISION)
    attempt, rssi = audible[0]
    return SlotOutcome(Outcome.DELIVERED, attempt, rssi)


def deliver_slot(
    attempts: list[TransmissionAttempt],
    listeners: list[tuple[str, int]],
    sensitivity_dbm: float,
) -> dict[str, SlotOutcome]:
    """Per-receiver outcome for one slot's worth of attempts.

    A broadcast attempt may be delivered to many listeners at once; each
    listener independently applies the channel, sensitivity and collision
    rules.
    """
    asns = {a.asn for a in attempts}
    if len(asns) > 1:
        raise ValueError(f"attempts span multiple slots: {sorted(asns)}")
    outcomes: dict[str, SlotOutcome] = {}
    for receiver, channel in listeners:
        audible = [
            (a, a.rssi_by_receiver[receiver])
            for a in attempts
            if a.channel == channel
            and a.sender != receiver
            and a.rssi_by_receiver.get(receiver, -math.inf) >= sensitivity_dbm
        ]
        outcomes[receiver] = resolve_listener(audible)
    return outcomes
