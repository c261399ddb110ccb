"""Drifting local clocks and backbone time distribution.

Each device owns a ClockState drifting against the single true simulated time
axis.  In grandmaster mode the network server periodically re-anchors every
gateway clock to within ``sync_error_bound`` of true time; nodes re-anchor
from any frame they successfully receive.  In the desynchronized baseline each
gateway keeps its own reference and free-running clock.
"""

from __future__ import annotations

import random
from dataclasses import dataclass

from .timing import asn_at

# Abstraction of a PTP-class backbone: residual error after a sync exchange.
DEFAULT_SYNC_ERROR_BOUND = 0.0001
# Typical crystal tolerance.
DRIFT_PPM_RANGE = 30.0
DEFAULT_SYNC_PERIOD = 10.0
DEFAULT_GUARD_TIME = 0.001


@dataclass
class ClockState:
    """Local clock error model: offset at last correction plus linear drift."""

    drift_ppm: float = 0.0
    offset: float = 0.0
    last_sync_t: float = 0.0

    def error_at(self, t_true: float) -> float:
        return self.offset + self.drift_ppm * 1e-6 * (t_true - self.last_sync_t)


@dataclass(frozen=True)
class GrandMaster:
    """Network-wide time authority: fixed reference instant, sync cadence."""

    t_ref: float = 0.0
    sync_period: float = DEFAULT_SYNC_PERIOD


@dataclass(frozen=True)
class SyncMessage:
    t_ref: float
    asn_now: int
    emitted_at: float


def clock_read(clock: ClockState, t_true: float) -> float:
    """The device's estimate of true time at instant ``t_true``."""
    return t_true + clock.error_at(t_true)


def vgm_emit_sync(gm: GrandMaster, t_true: float, slot_duration: float) -> SyncMessage:
    return SyncMessage(
        t_ref=gm.t_ref,
        asn_now=asn_at(t_true, gm.t_ref, slot_duration),
        emitted_at=t_true,
    )


def apply_sync(
    clock: ClockState,
    msg: SyncMessage,
    backbone_delay: float,
    t_true: float,
    sync_error_bound: float = DEFAULT_SYNC_ERROR_BOUND,
    rng: random.Random | None = None,
) -> ClockState:
    """Re-anchor a gateway clock from a backbone sync message.

    The exchange replaces the accumulated error with a residual drawn inside
    the sync error bound; the wire delay is assumed compensated by the
    two-way exchange the bound abstracts.
    """
    if backbone_delay < 0:
        raise ValueError("backbone_delay must be non-negative")
    residual = 0.0
    if sync_error_bound > 0:
        residual = (rng or random).uniform(-sync_error_bound, sync_error_bound)
    return ClockState(drift_ppm=clock.drift_ppm, offset=residual, last_sync_t=t_true)


def node_frame_sync(
    clock: ClockState,
    sender_clock: ClockState,
    t_true: float,
    sync_error_bound: float = DEFAULT_SYNC_ERROR_BOUND,
    rng: random.Random | None = None,
) -> ClockState:
    """Correct a node clock from a received frame's slot boundary.

    The node ends up within the sync error bound of the *sender's* clock, so
    it inherits whatever error the serving gateway carries.
    """
    residual = 0.0
    if sync_error_bound > 0:
        residual = (rng or random).uniform(-sync_error_bound, sync_error_bound)
    return ClockState(
        drift_ppm=clock.drift_ppm,
        offset=sender_clock.error_at(t_true) + residual,
        last_sync_t=t_true,
    )


def is_desynchronized(clock: ClockState, t_true: float, guard_time: float) -> bool:
    """Worst-case error accumulated since the last correction exceeds guard.

    Only drift accrued since the sync counts: right after a correction the
    device trusts its time source, whatever that source's own absolute error.
    """
    if guard_time <= 0:
        raise ValueError("guard_time must be positive")
    worst = abs(clock.drift_ppm) * 1e-6 * (t_true - clock.last_sync_t)
    return worst > guard_time


def draw_drift_ppm(rng: random.Random, ppm_range: float = DRIFT_PPM_RANGE) -> float:
    return rng.uniform(-ppm_range, ppm_range)
