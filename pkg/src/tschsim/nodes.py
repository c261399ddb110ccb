"""Protocol state machines: mobile nodes, gateways (BBRs) and the network server.

Uplink data frames are layer-2 broadcasts carrying a layer-3 unicast
destination, so every in-range gateway picks them up and forwards them over
the backbone.  The network server deduplicates those copies by frame hash,
tracks through which gateways each node was recently heard, and routes
downlink unicasts through the gateway with the best recent signal.
"""

from __future__ import annotations

import hashlib
from collections import deque
from dataclasses import dataclass, field
from enum import Enum

from . import clocks, timing
from .clocks import ClockState
from .timing import Cell, CellRole, SlotframeConfig

NS_ID = "ns"

MIN_PAYLOAD = 8
MAX_PAYLOAD = 128


class NoRouteError(LookupError):
    """No gateway has recently heard the destination node."""


class L2Kind(Enum):
    BROADCAST = "broadcast"
    UNICAST = "unicast"
    EB = "eb"


class FrameKind(Enum):
    EB = "eb"
    DATA = "data"
    REPLY = "reply"
    KEEPALIVE = "keepalive"
    ADD_REQUEST = "add_request"
    GRANT = "grant"


@dataclass
class Frame:
    l2_kind: L2Kind
    src: str
    dst: str
    seq: int
    payload_len: int
    l3_dst: str
    created_at: float
    kind: FrameKind
    payload: dict = field(default_factory=dict)

    def __post_init__(self):
        if not MIN_PAYLOAD <= self.payload_len <= MAX_PAYLOAD:
            raise ValueError(
                f"payload_len {self.payload_len} outside [{MIN_PAYLOAD}, {MAX_PAYLOAD}]"
            )


def frame_hash(frame: Frame) -> int:
    """Stable 64-bit digest over the frame identity (source, seq, payload)."""
    material = f"{frame.src}|{frame.seq}|{frame.payload_len}".encode()
    return int.from_bytes(hashlib.blake2b(material, digest_size=8).digest(), "big")


class DedupTable:
    """Hash table of recently accepted frames; a present hash means discard."""

    def __init__(self, ttl: float = 5.0):
        self.ttl = ttl
        self._first_seen: dict[int, float] = {}

    def check_and_insert(self, h: int, t: float) -> bool:
        """True when the hash is new (or expired) and was (re)inserted."""
        first = self._first_seen.get(h)
        if first is not None and t - first < self.ttl:
            return False
        self._first_seen[h] = t
        return True

    def purge(self, t: float) -> None:
        stale = [h for h, first in self._first_seen.items() if t - first >= self.ttl]
        for h in stale:
            del self._first_seen[h]

    def __len__(self) -> int:
        return len(self._first_seen)


@dataclass
class BbrSighting:
    reports: deque  # (rssi, t), newest last
    last_seen: float


class BbrTable:
    """Per-node record of which gateways recently heard it, and how loudly."""

    def __init__(self, entry_ttl: float = 3.0, window: int = 4):
        self.entry_ttl = entry_ttl
        self.window = window
        self._table: dict[str, dict[str, BbrSighting]] = {}

    def update(self, node: str, bbr: str, rssi: float, t: float) -> None:
        sightings = self._table.setdefault(node, {})
        entry = sightings.get(bbr)
        if entry is None:
            entry = BbrSighting(reports=deque(maxlen=self.window), last_seen=t)
            sightings[bbr] = entry
        entry.reports.append((rssi, t))
        entry.last_seen = t

    def fresh_bbrs(self, node: str, t: float) -> dict[str, tuple[float, float]]:
        """bbr -> (mean rssi over the fresh window, last seen)."""
        out: dict[str, tuple[float, float]] = {}
        for bbr, entry in self._table.get(node, {}).items():
            if t - entry.last_seen >= self.entry_ttl:
                continue
            fresh = [rssi for rssi, rt in entry.reports if t - rt < self.entry_ttl]
            if fresh:
                out[bbr] = (sum(fresh) / len(fresh), entry.last_seen)
        return out

    def select(self, node: str, t: float) -> str:
        """Best gateway for downlink: highest mean RSSI, then most recently
        heard, then lowest id."""
        fresh = self.fresh_bbrs(node, t)
        if not fresh:
            raise NoRouteError(f"no fresh gateway entry for {node}")
        return min(fresh, key=lambda b: (-fresh[b][0], -fresh[b][1], b))


@dataclass(frozen=True)
class UplinkReport:
    frame: Frame
    rssi: float
    bbr: str
    received_at: float


@dataclass
class PendingDownlink:
    frame: Frame
    queued_at: float


class NetworkServer:
    """Traffic management: deduplication, reachability tracking, routing.

    Transport is the caller's job; route decisions come back as gateway ids and
    frames that could not be routed wait in a per-node queue until a fresh
    reachability entry appears or the drop timeout expires.
    """

    def __init__(
        self,
        dedup_ttl: float = 5.0,
        entry_ttl: float = 3.0,
        rssi_window: int = 4,
        drop_timeout: float = 10.0,
    ):
        self.dedup = DedupTable(ttl=dedup_ttl)
        self.bbr_table = BbrTable(entry_ttl=entry_ttl, window=rssi_window)
        self.drop_timeout = drop_timeout
        self.pending: dict[str, list[PendingDownlink]] = {}

    def ingest(self, report: UplinkReport, t: float) -> str:
        """Returns "accepted" for the first copy of a frame, "duplicate" after.

        The reachability table is updated either way: a duplicate still proves
        the node is audible through that gateway.
        """
        self.bbr_table.update(report.frame.src, report.bbr, report.rssi, t)
        if self.dedup.check_and_insert(frame_hash(report.frame), t):
            return "accepted"
        return "duplicate"

    def select_downlink_bbr(self, node: str, t: float) -> str:
        return self.bbr_table.select(node, t)

    def route_downlink(self, frame: Frame, t: float) -> str | None:
        """Gateway to transmit through, or None once queued for retry."""
        try:
            return self.select_downlink_bbr(frame.l3_dst, t)
        except NoRouteError:
            self.pending.setdefault(frame.l3_dst, []).append(PendingDownlink(frame, t))
            return None

    def flush_pending(self, node: str, t: float) -> list[tuple[str, Frame]]:
        """Route whatever queued frames for ``node`` have a gateway now."""
        routable: list[tuple[str, Frame]] = []
        queue = self.pending.get(node)
        if not queue:
            return routable
        try:
            bbr = self.select_downlink_bbr(node, t)
        except NoRouteError:
            return routable
        for item in queue:
            routable.append((bbr, item.frame))
        self.pending[node] = []
        return routable

    def sweep(self, t: float) -> tuple[list[tuple[str, Frame]], list[Frame]]:
        """Periodic maintenance: retry queued downlinks, expire old ones."""
        routed: list[tuple[str, Frame]] = []
        dropped: list[Frame] = []
        for node in list(self.pending):
            kept: list[PendingDownlink] = []
            for item in self.pending[node]:
                if t - item.queued_at >= self.drop_timeout:
                    dropped.append(item.frame)
                else:
                    kept.append(item)
            self.pending[node] = kept
            routed.extend(self.flush_pending(node, t))
        self.dedup.purge(t)
        return routed, dropped


# ---------------------------------------------------------------------------
# Devices
# ---------------------------------------------------------------------------

class NodePhase(Enum):
    SCANNING = "scanning"
    SYNCHRONIZING = "synchronizing"
    NEGOTIATING = "negotiating"
    OPERATIONAL = "operational"
    DESYNC = "desync"


class Device:
    """Anything with a radio, a drifting clock and a believed time reference."""

    is_bbr = False

    def __init__(self, dev_id: str, clock: ClockState, t_ref: float):
        self.id = dev_id
        self.clock = clock
        self.t_ref = t_ref
        self.boundary_gen = 0
        self.tx_seq = 0
        self.kern = None  # wired by the kernel at registration

    def next_seq(self) -> int:
        self.tx_seq += 1
        return self.tx_seq

    def position(self, t: float) -> float:
        raise NotImplementedError

    def wants_slot(self, asn: int) -> bool:
        raise NotImplementedError

    def on_boundary(self, asn: int) -> None:
        raise NotImplementedError

    def on_frame(self, frame: Frame, sender: "Device", rssi: float, ctx: str) -> None:
        raise NotImplementedError


class Bbr(Device):
    """Gateway: beacons, serves downlink queues, forwards uplink to the server."""

    is_bbr = True

    def __init__(self, dev_id: str, index: int, pos: float, clock: ClockState, t_ref: float):
        super().__init__(dev_id, clock, t_ref)
        self.index = index
        self.pos = pos
        self.schedule = None  # MasterSchedule snapshot, installed by the server
        self.downlink_queue: list[Frame] = []
        self.grant_queue: list[Frame] = []
        self._downlink_slots: set[int] = set()
        self._uplink_cells: dict[int, Cell] = {}

    def position(self, t: float) -> float:
        return self.pos

    def install(self, snapshot) -> None:
        """Adopt a schedule snapshot unless a newer version is already live."""
        if self.schedule is not None and snapshot.version <= self.schedule.version:
            return
        self.schedule = snapshot
        self._downlink_slots = set(snapshot.downlink_slots)
        self._uplink_cells = {
            cell.slot_offset: cell for cell in snapshot.uplink.values()
        }
        if self.kern is not None:
            self.kern.reschedule(self)

    def wants_slot(self, asn: int) -> bool:
        cfg = self.kern.cfg
        offset = timing.slot_offset_of(asn, cfg)
        if offset == cfg.eb_slot:
            return timing.is_eb_emission_slot(asn, cfg)
        if offset == cfg.contention_slot:
            return True
        if offset == cfg.response_slot:
            return bool(self.grant_queue)
        return offset in self._downlink_slots or offset in self._uplink_cells

    def _queued_downlink_for_slot(self, offset: int) -> Frame | None:
        for frame in self.downlink_queue:
            assignment = self.schedule.downlink.get(frame.l3_dst)
            if assignment is not None and assignment[0] == offset:
                return frame
        return None

    def on_boundary(self, asn: int) -> None:
        kern = self.kern
        cfg = kern.cfg
        offset = timing.slot_offset_of(asn, cfg)

        if offset == cfg.eb_slot and timing.is_eb_emission_slot(asn, cfg):
            choff = timing.eb_channel_offset(asn, self.index, cfg)
            eb = Frame(
                l2_kind=L2Kind.EB,
                src=self.id,
                dst=timing.ANY,
                seq=self.next_seq(),
                payload_len=32,
                l3_dst=timing.ANY,
                created_at=kern.now,
                kind=FrameKind.EB,
                payload={"asn": asn},
            )
            kern.transmit(self, eb, timing.channel_for(asn, choff, cfg), "eb")
            return

        if offset == cfg.contention_slot:
            kern.listen(self, timing.channel_for(asn, 0, cfg), "contention")
            return

        if offset == cfg.response_slot:
            if self.grant_queue:
                channel = timing.channel_for(asn, 0, cfg)
                kern.transmit(self, self.grant_queue.pop(0), channel, "response")
            return

        if offset in self._downlink_slots:
            frame = self._queued_downlink_for_slot(offset)
            if frame is not None:
                self.downlink_queue.remove(frame)
                choff = self.schedule.downlink[frame.l3_dst][1]
                kern.transmit(
                    self, frame, timing.channel_for(asn, choff, cfg), "downlink"
                )
            else:
                cells = sorted(
                    offs for node, (slot, offs) in self.schedule.downlink.items()
                    if slot == offset
                )
                choff = cells[0] if cells else 0
                kern.listen(self, timing.channel_for(asn, choff, cfg), "downlink")
            return

        cell = self._uplink_cells.get(offset)
        if cell is not None:
            kern.listen(
                self, timing.channel_for(asn, cell.channel_offset, cfg), "uplink"
            )

    def on_frame(self, frame: Frame, sender: Device, rssi: float, ctx: str) -> None:
        # Only frames heard in proper receive cells travel up the backbone;
        # anything caught elsewhere (stray timebases, other gateways' grants)
        # is dropped at the MAC.
        if ctx == "uplink" and frame.kind in (
            FrameKind.DATA, FrameKind.REPLY, FrameKind.KEEPALIVE
        ):
            self.kern.forward_to_ns(self, frame, rssi)
        elif ctx == "contention" and frame.kind is FrameKind.ADD_REQUEST:
            self.kern.forward_to_ns(self, frame, rssi)


class MobileNode(Device):
    """Roaming node: scans for a beacon, negotiates cells, then follows them."""

    def __init__(self, dev_id: str, traj, clock: ClockState):
        super().__init__(dev_id, clock, t_ref=0.0)
        self.traj = traj
        self.phase = NodePhase.SCANNING
        self.uplink_queue: deque[Frame] = deque()
        self.uplink_cell: Cell | None = None
        self.downlink_slot: int | None = None
        self.downlink_choffset: int | None = None
        self.last_rx_t = 0.0
        self.last_tx_t = 0.0
        self.request_sent_t: float | None = None
        self.backoff_until = 0.0
        self.backoff_stage = 0
        self.scan_channel: int | None = None
        self.serving_bbr: str | None = None

    def position(self, t: float) -> float:
        from .radio import position_at

        return position_at(self.traj, t)

    # -- phase helpers -------------------------------------------------------

    def set_phase(self, phase: NodePhase) -> None:
        if phase is self.phase:
            return
        old = self.phase
        self.phase = phase
        self.kern.metrics.record_phase(self.kern.now, self.id, old, phase)

    def enqueue_uplink(self, frame: Frame) -> None:
        """Queue a frame for the next owned uplink cell, dropping the oldest
        entry once the queue cap is reached."""
        self.uplink_queue.append(frame)
        while len(self.uplink_queue) > self.kern.scn.uplink_queue_cap:
            self.uplink_queue.popleft()

    def enter_scanning(self) -> None:
        self.set_phase(NodePhase.SCANNING)
        self.uplink_cell = None
        self.downlink_slot = None
        self.downlink_choffset = None
        self.uplink_queue.clear()
        self.request_sent_t = None
        self.backoff_stage = 0
        self.backoff_until = 0.0
        self.scan_channel = self.kern.cfg.hopping_sequence[
            self.kern.rng("scan").randrange(self.kern.cfg.num_channel_offsets)
        ]
        self.kern.start_scanning(self, self.scan_channel)
        self.kern.reschedule(self)

    def _desync_check(self, now: float) -> bool:
        scn = self.kern.scn
        silent_for = now - self.last_rx_t
        drifted = clocks.is_desynchronized(self.clock, now, scn.guard_time)
        if drifted or silent_for > scn.keepalive_timeout + scn.eb_listen_patience:
            self.set_phase(NodePhase.DESYNC)
            self.enter_scanning()
            return True
        return False

    # -- slot behaviour ------------------------------------------------------

    def wants_slot(self, asn: int) -> bool:
        cfg = self.kern.cfg
        offset = timing.slot_offset_of(asn, cfg)
        if self.phase is NodePhase.SYNCHRONIZING:
            return True
        if self.phase is NodePhase.NEGOTIATING:
            return offset in (cfg.contention_slot, cfg.response_slot)
        if self.phase is NodePhase.OPERATIONAL:
            if self.uplink_cell is not None and offset == self.uplink_cell.slot_offset:
                return True
            if offset == self.downlink_slot:
                return True
            if offset == cfg.eb_slot:
                # Fallback resync point once the link has gone quiet.
                silent = self.kern.now - self.last_rx_t
                return silent > self.kern.scn.keepalive_timeout
        return False

    def on_boundary(self, asn: int) -> None:
        kern = self.kern
        cfg = kern.cfg
        offset = timing.slot_offset_of(asn, cfg)

        if self.phase is NodePhase.SYNCHRONIZING:
            self.set_phase(NodePhase.NEGOTIATING)
            return

        if self.phase is NodePhase.NEGOTIATING:
            if offset == cfg.response_slot:
                kern.listen(self, timing.channel_for(asn, 0, cfg), "response")
                return
            if offset != cfg.contention_slot:
                return
            channel = timing.channel_for(asn, 0, cfg)
            if (
                self.request_sent_t is not None
                and kern.now - self.request_sent_t >= kern.scn.grant_timeout
            ):
                # No grant came back: contention loss.  Back off exponentially
                # so a crowd of joiners does not collapse the shared slot.
                self.request_sent_t = None
                self.backoff_stage = min(self.backoff_stage + 1, 4)
                frames = kern.rng("join").randint(1, 2 ** self.backoff_stage * 2)
                self.backoff_until = kern.now + frames * cfg.frame_duration
            awaiting = self.request_sent_t is not None
            backing_off = kern.now < self.backoff_until
            if (
                not awaiting
                and not backing_off
                and kern.rng("join").random() < kern.scn.p_persist
            ):
                request = Frame(
                    l2_kind=L2Kind.BROADCAST,
                    src=self.id,
                    dst=timing.ANY,
                    seq=self.next_seq(),
                    payload_len=16,
                    l3_dst=NS_ID,
                    created_at=kern.now,
                    kind=FrameKind.ADD_REQUEST,
                    payload={
                        "candidates": kern.uplink_candidates(self),
                        "channel_offset": kern.rng("join").randrange(
                            cfg.num_channel_offsets
                        ),
                    },
                )
                self.request_sent_t = kern.now
                kern.transmit(self, request, channel, "contention")
            else:
                kern.listen(self, channel, "contention")
            return

        if self.phase is not NodePhase.OPERATIONAL:
            return
        if self._desync_check(kern.now):
            return

        if self.uplink_cell is not None and offset == self.uplink_cell.slot_offset:
            scn = kern.scn
            if (
                not self.uplink_queue
                and kern.now - self.last_tx_t >= scn.keepalive_tx_interval
            ):
                self.uplink_queue.append(
                    Frame(
                        l2_kind=L2Kind.BROADCAST,
                        src=self.id,
                        dst=timing.ANY,
                        seq=self.next_seq(),
                        payload_len=MIN_PAYLOAD,
                        l3_dst=NS_ID,
                        created_at=kern.now,
                        kind=FrameKind.KEEPALIVE,
                    )
                )
            if self.uplink_queue:
                frame = self.uplink_queue.popleft()
                self.last_tx_t = kern.now
                channel = timing.channel_for(asn, self.uplink_cell.channel_offset, cfg)
                kern.transmit(self, frame, channel, "uplink")
            return

        if offset == self.downlink_slot:
            channel = timing.channel_for(asn, self.downlink_choffset, cfg)
            kern.listen(self, channel, "downlink")
            return

        if offset == cfg.eb_slot:
            choff = timing.eb_channel_offset(asn, 0, cfg)
            kern.listen(self, timing.channel_for(asn, choff, cfg), "eb")

    # -- reception -----------------------------------------------------------

    def on_frame(self, frame: Frame, sender: Device, rssi: float, ctx: str) -> None:
        kern = self.kern
        if sender.is_bbr:
            self.clock = clocks.node_frame_sync(
                self.clock,
                sender.clock,
                kern.now,
                kern.scn.sync_error_bound,
                kern.rng("sync"),
            )
            self.t_ref = sender.t_ref
            self.serving_bbr = sender.id
            self.last_rx_t = kern.now
            kern.reschedule(self)

        if self.phase is NodePhase.SCANNING:
            if frame.kind is FrameKind.EB and sender.is_bbr:
                kern.stop_scanning(self)
                self.set_phase(NodePhase.SYNCHRONIZING)
                kern.reschedule(self)
            return

        if frame.l2_kind is L2Kind.UNICAST and frame.dst != self.id:
            return

        if self.phase is NodePhase.NEGOTIATING and frame.kind is FrameKind.GRANT:
            grant = frame.payload
            self.uplink_cell = Cell(
                grant["uplink_slot"],
                grant["uplink_choffset"],
                CellRole.NEG_UPLINK,
                self.id,
            )
            self.downlink_slot = grant["downlink_slot"]
            self.downlink_choffset = grant["downlink_choffset"]
            self.request_sent_t = None
            self.backoff_stage = 0
            self.backoff_until = 0.0
            self.set_phase(NodePhase.OPERATIONAL)
            self.last_tx_t = kern.now
            kern.reschedule(self)
            kern.on_node_operational(self)
            return

        if self.phase is NodePhase.OPERATIONAL and frame.kind is FrameKind.DATA:
            if frame.l3_dst == self.id:
                kern.metrics.note_request_reached_node(frame.payload["app_seq"], kern.now)
                self.enqueue_uplink(
                    Frame(
                        l2_kind=L2Kind.BROADCAST,
                        src=self.id,
                        dst=timing.ANY,
                        seq=self.next_seq(),
                        payload_len=frame.payload_len,
                        l3_dst=NS_ID,
                        created_at=kern.now,
                        kind=FrameKind.REPLY,
                        payload={"req_seq": frame.payload["app_seq"]},
                    )
                )
