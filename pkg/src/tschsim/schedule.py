"""Master schedule kept at the network server and replicated to gateways.

Downlink traffic shares slots in the time domain only: every node gets its own
channel offset inside a shared downlink slot, and extra downlink slots are
opened once all offsets of the existing ones are taken.  Each node additionally
owns a single negotiated uplink slot, so upstream broadcasts are collision-free
by construction.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from .timing import ANY, Cell, CellRole, SlotframeConfig


class CapacityError(RuntimeError):
    """The slotframe has no free slot left for the requested allocation."""


# Candidate slots offered per negotiation round.
NEGOTIATION_CANDIDATES = 3


@dataclass
class MasterSchedule:
    downlink: dict[str, tuple[int, int]] = field(default_factory=dict)
    uplink: dict[str, Cell] = field(default_factory=dict)
    downlink_slots: list[int] = field(default_factory=list)
    version: int = 0

    def used_slots(self, cfg: SlotframeConfig) -> set[int]:
        used = {cfg.eb_slot, cfg.contention_slot, cfg.response_slot}
        used.update(self.downlink_slots)
        used.update(cell.slot_offset for cell in self.uplink.values())
        return used

    def free_slots(self, cfg: SlotframeConfig) -> list[int]:
        used = self.used_slots(cfg)
        return [s for s in range(cfg.length) if s not in used]

    def cells_for(self, node: str, cfg: SlotframeConfig) -> list[Cell]:
        cells = []
        if node in self.downlink:
            slot, offset = self.downlink[node]
            cells.append(Cell(slot, offset, CellRole.SHARED_DOWNLINK, node))
        if node in self.uplink:
            cells.append(self.uplink[node])
        return cells

    def all_cells(self, cfg: SlotframeConfig) -> set[Cell]:
        cells = {Cell(cfg.eb_slot, 0, CellRole.EB, ANY)}
        for node in self.downlink:
            slot, offset = self.downlink[node]
            cells.add(Cell(slot, offset, CellRole.SHARED_DOWNLINK, node))
        cells.update(self.uplink.values())
        return cells

    def snapshot(self) -> "MasterSchedule":
        return MasterSchedule(
            downlink=dict(self.downlink),
            uplink=dict(self.uplink),
            downlink_slots=list(self.downlink_slots),
            version=self.version,
        )


def allocate_downlink(
    ms: MasterSchedule, node: str, cfg: SlotframeConfig
) -> tuple[int, int]:
    """Assign the lowest free channel offset in the first open downlink slot.

    Once every offset of every existing downlink slot is taken, a fresh slot is
    pulled from the front of the negotiable pool.
    """
    if node in ms.downlink:
        raise ValueError(f"{node} already holds a downlink assignment")
    if not ms.downlink_slots:
        ms.downlink_slots.append(cfg.first_downlink_slot)
    taken = {}
    for n, (slot, offset) in ms.downlink.items():
        taken.setdefault(slot, set()).add(offset)
    for slot in ms.downlink_slots:
        for offset in range(cfg.num_channel_offsets):
            if offset not in taken.get(slot, set()):
                ms.downlink[node] = (slot, offset)
                ms.version += 1
                return slot, offset
    free = ms.free_slots(cfg)
    if not free:
        raise CapacityError("no free slot left to open for downlink overflow")
    slot = free[0]
    ms.downlink_slots.append(slot)
    ms.downlink[node] = (slot, 0)
    ms.version += 1
    return slot, 0


def candidate_slots(ms: MasterSchedule, cfg: SlotframeConfig, k: int = NEGOTIATION_CANDIDATES) -> list[int]:
    """The k lowest-numbered free slots a node proposes for its uplink cell.

    Earliest-first keeps the granted cell close behind the downlink slot, which
    bounds the request-to-reply turnaround to roughly one slotframe.
    """
    return ms.free_slots(cfg)[:k]


def grant_uplink(
    ms: MasterSchedule,
    node: str,
    candidates: list[int],
    channel_offset: int,
    cfg: SlotframeConfig,
) -> Cell | None:
    """Grant the first candidate slot still free, or None if all are taken.

    A node that already holds a cell gets the same cell back (lost grants are
    retried by the node, and the retry must not consume a second slot).
    """
    if node in ms.uplink:
        return ms.uplink[node]
    if not ms.free_slots(cfg):
        raise CapacityError("uplink slot pool exhausted")
    used = ms.used_slots(cfg)
    for slot in candidates:
        if 0 <= slot < cfg.length and slot not in used:
            cell = Cell(slot, channel_offset, CellRole.NEG_UPLINK, node)
            ms.uplink[node] = cell
            ms.version += 1
            return cell
    return None


def negotiate_uplink(
    node: str,
    ms: MasterSchedule,
    cfg: SlotframeConfig,
    rng: random.Random,
    candidates: list[int] | None = None,
) -> Cell:
    """One complete negotiation round: propose candidates, take the grant.

    Raises CapacityError when the pool is empty; returns None never — a round
    whose candidates were all taken in the meantime re-proposes fresh ones.
    """
    while True:
        offered = candidates if candidates is not None else candidate_slots(ms, cfg)
        cell = grant_uplink(
            ms, node, offered, rng.randrange(cfg.num_channel_offsets), cfg
        )
        if cell is not None:
            return cell
        candidates = None


def propagate_schedule(ms: MasterSchedule, last_propagated_version: int) -> MasterSchedule | None:
    """Snapshot to install on every gateway, or None when nothing changed.

    Gateways keep whichever snapshot carries the highest version, so replays
    and reordered deliveries are harmless.
    """
    if ms.version == last_propagated_version:
        return None
    return ms.snapshot()


def release_node(ms: MasterSchedule, node: str) -> None:
    """Drop a node's allocations; emptied overflow downlink slots are freed."""
    changed = False
    if ms.downlink.pop(node, None) is not None:
        changed = True
    if ms.uplink.pop(node, None) is not None:
        changed = True
    still_used = {slot for slot, _ in ms.downlink.values()}
    kept = [s for i, s in enumerate(ms.downlink_slots) if i == 0 or s in still_used]
    if kept != ms.downlink_slots:
        ms.downlink_slots = kept
        changed = True
    if changed:
        ms.version += 1


def validate_schedule(ms: MasterSchedule, cfg: SlotframeConfig) -> list[str]:
    """All conflicts in the schedule; an empty list means it is collision-free."""
    conflicts: list[str] = []
    seen_downlink: dict[tuple[int, int], str] = {}
    for node in ms.downlink:
        slot, offset = ms.downlink[node]
        if not 0 <= slot < cfg.length or not 0 <= offset < cfg.num_channel_offsets:
            conflicts.append(f"downlink cell for {node} out of bounds: ({slot}, {offset})")
            continue
        if slot not in ms.downlink_slots:
            conflicts.append(f"downlink cell for {node} in unregistered slot {slot}")
        key = (slot, offset)
        if key in seen_downlink:
            conflicts.append(
                f"downlink cell ({slot}, {offset}) shared by {seen_downlink[key]} and {node}"
            )
        seen_downlink[key] = node

    reserved = {
        cfg.eb_slot: "eb",
        cfg.contention_slot: "contention",
        cfg.response_slot: "join-response",
    }
    for slot in ms.downlink_slots:
        if slot in reserved:
            conflicts.append(f"downlink slot {slot} overlaps the {reserved[slot]} slot")

    seen_uplink: dict[int, str] = {}
    for node, cell in ms.uplink.items():
        slot = cell.slot_offset
        if not 0 <= slot < cfg.length:
            conflicts.append(f"uplink slot for {node} out of bounds: {slot}")
            continue
        if cell.owner != node:
            conflicts.append(f"uplink cell registered under {node} owned by {cell.owner}")
        if slot in seen_uplink:
            conflicts.append(f"uplink slot {slot} owned by both {seen_uplink[slot]} and {node}")
        seen_uplink[slot] = node
        if slot in reserved:
            conflicts.append(f"uplink slot {slot} overlaps the {reserved[slot]} slot")
        if slot in ms.downlink_slots:
            conflicts.append(f"uplink slot {slot} overlaps a downlink slot")
    return conflicts
