"""TSCH timing primitives: ASN arithmetic, slotframe geometry, channel hopping.

Everything here is a pure function over immutable configuration, shared by
nodes, gateways and the simulation kernel alike.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

# IEEE 802.15.4 channel page 0, 2.4 GHz band
DEFAULT_HOPPING_SEQUENCE = tuple(range(11, 27))

# Owner sentinel for cells any party may use (EB cells).
ANY = "any"


class TimeReferenceError(ValueError):
    """An instant earlier than the network time reference was queried."""


class CellRole(Enum):
    EB = "eb"
    SHARED_DOWNLINK = "shared_downlink"
    NEG_UPLINK = "neg_uplink"


class ActionKind(Enum):
    TRANSMIT = "transmit"
    RECEIVE = "receive"
    SLEEP = "sleep"


@dataclass(frozen=True)
class Cell:
    """One (slot offset, channel offset) schedule entry."""

    slot_offset: int
    channel_offset: int
    role: CellRole
    owner: str = ANY


@dataclass(frozen=True)
class Action:
    kind: ActionKind
    cell: Cell | None = None


@dataclass(frozen=True)
class SlotframeConfig:
    length: int = 97
    slot_duration: float = 0.010
    hopping_sequence: tuple[int, ...] = DEFAULT_HOPPING_SEQUENCE
    # Beacon cadence: an EB opportunity every eb_every-th slotframe.
    eb_every: int = 2

    def __post_init__(self):
        if self.length < 2:
            raise ValueError(f"slotframe length must be >= 2, got {self.length}")
        if self.slot_duration <= 0:
            raise ValueError("slot_duration must be positive")
        if len(set(self.hopping_sequence)) != len(self.hopping_sequence):
            raise ValueError("hopping sequence contains duplicate channels")
        if not self.hopping_sequence:
            raise ValueError("hopping sequence is empty")
        if self.eb_every < 1:
            raise ValueError("eb_every must be >= 1")

    @property
    def num_channel_offsets(self) -> int:
        return len(self.hopping_sequence)

    @property
    def frame_duration(self) -> float:
        return self.length * self.slot_duration

    @property
    def eb_slot(self) -> int:
        return 0

    @property
    def first_downlink_slot(self) -> int:
        return 1

    @property
    def contention_slot(self) -> int:
        """Shared join-request slot, pinned to the last slot of the frame."""
        return self.length - 1

    @property
    def response_slot(self) -> int:
        """Join-response slot: gateways answer requests here, so grants never
        contend with other joiners' requests."""
        return self.length - 2

    @property
    def eb_cycle_stride(self) -> int:
        """Channel-offset stride between consecutive beacon cycles.

        Chosen so that (eb_every * length + stride) is odd, hence coprime with
        the 16-channel hopping sequence: successive beacons then sweep every
        physical channel, which a fixed-channel scanner relies on.
        """
        return 1 if (self.eb_every * self.length) % 2 == 0 else 2


def asn_at(t: float, t_ref: float, slot_duration: float) -> int:
    """Absolute slot number elapsed at instant ``t`` since the reference."""
    if slot_duration <= 0:
        raise ValueError("slot_duration must be positive")
    if t < t_ref:
        raise TimeReferenceError(f"instant {t} precedes time reference {t_ref}")
    return int(math.floor((t - t_ref) / slot_duration))


def slot_start(asn: int, t_ref: float, slot_duration: float) -> float:
    """Nominal true-time start of slot ``asn`` on the reference grid."""
    return t_ref + asn * slot_duration


def slot_offset_of(asn: int, cfg: SlotframeConfig) -> int:
    return asn % cfg.length


def channel_for(asn: int, channel_offset: int, cfg: SlotframeConfig) -> int:
    """Physical channel used in slot ``asn`` for a given channel offset."""
    if not 0 <= channel_offset < cfg.num_channel_offsets:
        raise IndexError(
            f"channel offset {channel_offset} out of range "
            f"[0, {cfg.num_channel_offsets})"
        )
    return cfg.hopping_sequence[(asn + channel_offset) % cfg.num_channel_offsets]


def eb_cycle_of(asn: int, cfg: SlotframeConfig) -> int:
    """Index of the beacon cycle containing ``asn``."""
    return asn // (cfg.eb_every * cfg.length)


def is_eb_emission_slot(asn: int, cfg: SlotframeConfig) -> bool:
    """True in the EB cell of every eb_every-th slotframe."""
    if slot_offset_of(asn, cfg) != cfg.eb_slot:
        return False
    return (asn // cfg.length) % cfg.eb_every == 0


def eb_channel_offset(asn: int, bbr_index: int, cfg: SlotframeConfig) -> int:
    """Channel offset for the beacon transmitted around slot ``asn``.

    Rotates per beacon cycle (see eb_cycle_stride) and shifts per gateway so
    co-located gateways beacon on distinct channels in the same slot.
    """
    cycle = eb_cycle_of(asn, cfg)
    return (cycle * cfg.eb_cycle_stride + bbr_index) % cfg.num_channel_offsets


def schedule_action(
    schedule: frozenset[Cell] | set[Cell],
    asn: int,
    cfg: SlotframeConfig,
    actor: str,
    *,
    is_bbr: bool = False,
    downlink_pending: frozenset[str] | set[str] = frozenset(),
    eb_due: bool = False,
    uplink_pending: bool = True,
) -> Action:
    """What ``actor`` does in slot ``asn`` under ``schedule``.

    Transmit beats receive beats sleep.  A gateway transmits a beacon when one
    is due, serves at most one pending downlink owner per slot, and otherwise
    idle-listens in any cell scheduled at this offset.  A plain node transmits
    in its own uplink cell when it has traffic and listens in its own downlink
    cell; with no cell at this offset both sleep.
    """
    offset = slot_offset_of(asn, cfg)
    here = sorted(
        (c for c in schedule if c.slot_offset == offset),
        key=lambda c: (c.channel_offset, c.role.value, c.owner),
    )
    if is_bbr:
        for cell in here:
            if cell.role is CellRole.EB and eb_due:
                return Action(ActionKind.TRANSMIT, cell)
        for cell in here:
            if cell.role is CellRole.SHARED_DOWNLINK and cell.owner in downlink_pending:
                return Action(ActionKind.TRANSMIT, cell)
        if here:
            return Action(ActionKind.RECEIVE, here[0])
        return Action(ActionKind.SLEEP)

    for cell in here:
        if cell.role is CellRole.NEG_UPLINK and cell.owner == actor:
            if uplink_pending:
                return Action(ActionKind.TRANSMIT, cell)
            return Action(ActionKind.SLEEP)
    for cell in here:
        if cell.role is CellRole.SHARED_DOWNLINK and cell.owner == actor:
            return Action(ActionKind.RECEIVE, cell)
    return Action(ActionKind.SLEEP)
