"""Deterministic discrete-event kernel and metrics recording.

There is a single true-time axis; every device clock is a drifting view of it.
Slot boundaries fire per device at that device's *local* boundary instant, so
two devices exchange a frame only when their boundaries land within the guard
time of each other on the same physical channel — desynchronization is an
emergent failure, not a flag.
"""

from __future__ import annotations

import heapq
import math
import random
from dataclasses import dataclass, field
from enum import Enum

from . import schedule as sched
from . import timing
from .clocks import ClockState, GrandMaster, apply_sync, clock_read, draw_drift_ppm, vgm_emit_sync
from .nodes import (
    NS_ID,
    Bbr,
    Frame,
    FrameKind,
    L2Kind,
    MobileNode,
    NetworkServer,
    UplinkReport,
    frame_hash,
)
from .radio import Outcome, resolve_listener, rssi_at
from .scenario import Scenario


class EventKind(Enum):
    SLOT_BOUNDARY = "slot_boundary"
    BACKBONE_MSG = "backbone_msg"
    APP_TRAFFIC = "app_traffic"
    SYNC_EMIT = "sync_emit"
    TIMER = "timer"


@dataclass(order=True)
class Event:
    due: float
    seq: int
    kind: EventKind = field(compare=False)
    fn: object = field(compare=False)


@dataclass
class AirAttempt:
    sender: object
    frame: Frame
    channel: int
    role: str
    t_tx: float


@dataclass
class PacketRecord:
    seq: int
    direction: str
    sent_at: float
    node: str = ""
    recv_at: float | None = None
    lost: bool = False
    bbr_set: set[str] = field(default_factory=set)
    dup_count: int = 0
    node_rx_at: float | None = None

    @property
    def rtt(self) -> float | None:
        if self.recv_at is None:
            return None
        return self.recv_at - self.sent_at


@dataclass(frozen=True)
class OutageInterval:
    start: float
    end: float

    @property
    def duration(self) -> float:
        return self.end - self.start


class MetricsLog:
    """Everything a run leaves behind: per-packet fate, phases, collisions."""

    def __init__(self, outage_gap_threshold: float = 3.0):
        self.outage_gap_threshold = outage_gap_threshold
        self.records: list[PacketRecord] = []
        self.by_seq: dict[int, PacketRecord] = {}
        self._hash_to_seq: dict[int, int] = {}
        self.phase_transitions: list[tuple[float, str, str, str]] = []
        self.collisions: list[tuple[float, str, str]] = []
        self.tx_events: list[tuple[float, str, str, str]] = []
        self.clock_samples: list[tuple[float, float]] = []
        self.outages: list[OutageInterval] = []
        self.join_events: list[tuple[float, str]] = []

    # -- packet lifecycle ----------------------------------------------------

    def open_packet(self, seq: int, direction: str, t: float, node: str = "") -> PacketRecord:
        record = PacketRecord(seq=seq, direction=direction, sent_at=t, node=node)
        self.records.append(record)
        self.by_seq[seq] = record
        return record

    def link_frame(self, h: int, seq: int) -> None:
        self._hash_to_seq[h] = seq

    def note_report(self, h: int, bbr: str) -> None:
        seq = self._hash_to_seq.get(h)
        if seq is None:
            return
        record = self.by_seq[seq]
        record.bbr_set.add(bbr)
        record.dup_count += 1

    def note_request_reached_node(self, seq: int, t: float) -> None:
        record = self.by_seq.get(seq)
        if record is not None and record.node_rx_at is None:
            record.node_rx_at = t

    def complete(self, seq: int, t: float) -> None:
        record = self.by_seq[seq]
        if record.recv_at is None:
            record.recv_at = t

    def mark_lost(self, seq: int) -> None:
        record = self.by_seq[seq]
        if record.recv_at is None:
            record.lost = True

    # -- side observations -----------------------------------------------------

    def record_phase(self, t: float, node: str, old, new) -> None:
        self.phase_transitions.append((t, node, old.value, new.value))

    def record_collision(self, t: float, receiver: str, ctx: str) -> None:
        self.collisions.append((t, receiver, ctx))

    def record_tx(self, t: float, sender: str, kind: str, role: str) -> None:
        self.tx_events.append((t, sender, kind, role))

    def sample_clocks(self, t: float, max_pairwise: float) -> None:
        self.clock_samples.append((t, max_pairwise))

    # -- finalization ----------------------------------------------------------

    def finalize(self, horizon: float) -> None:
        for record in self.records:
            if record.recv_at is None:
                record.lost = True
        delivered = sum(1 for r in self.records if r.recv_at is not None)
        lost = sum(1 for r in self.records if r.lost)
        if delivered + lost != len(self.records):
            raise AssertionError("packet conservation violated")
        self._compute_outages()

    def _compute_outages(self) -> None:
        arrivals = sorted(
            r.recv_at for r in self.records if r.recv_at is not None
        )
        self.outages = []
        for prev, nxt in zip(arrivals, arrivals[1:]):
            if nxt - prev > self.outage_gap_threshold:
                self.outages.append(OutageInterval(prev, nxt))

    # -- summary helpers ---------------------------------------------------------

    def delivered_records(self) -> list[PacketRecord]:
        return [r for r in self.records if r.recv_at is not None]

    def loss_rate(self) -> float:
        if not self.records:
            return 0.0
        return sum(1 for r in self.records if r.lost) / len(self.records)

    def rtts(self) -> list[float]:
        return [r.rtt for r in self.delivered_records()]

    def max_outage(self) -> float:
        if not self.outages:
            return 0.0
        return max(o.duration for o in self.outages)

    def dup_ratio(self) -> float:
        delivered = self.delivered_records()
        if not delivered:
            return 0.0
        return sum(1 for r in delivered if r.dup_count >= 2) / len(delivered)


def measure_rtt(log: MetricsLog, seq: int) -> float | None:
    """Request-to-reply latency for one app packet, or None when lost."""
    return log.by_seq[seq].rtt


def nearest_rank_percentile(values: list[float], pct: float) -> float:
    if not values:
        raise ValueError("no values")
    ordered = sorted(values)
    rank = max(1, math.ceil(pct / 100.0 * len(ordered)))
    return ordered[rank - 1]


class Simulation:
    """One scenario run: builds devices, dispatches events, returns metrics."""

    def __init__(self, scn: Scenario):
        scn.validate()
        self.scn = scn
        self.cfg = scn.slotframe
        self.params = scn.radio
        self.now = 0.0
        self._heap: list[Event] = []
        self._event_seq = 0
        self._rngs: dict[str, random.Random] = {}
        self._app_seq = 0
        self.metrics = MetricsLog(outage_gap_threshold=scn.outage_gap_threshold)
        self.ns = NetworkServer(
            dedup_ttl=scn.dedup_ttl,
            entry_ttl=scn.entry_ttl,
            rssi_window=scn.rssi_window,
            drop_timeout=scn.drop_timeout,
        )
        self.grand_master = GrandMaster(t_ref=0.0, sync_period=scn.sync_period)

        # Air interface bookkeeping.
        self._attempts: dict[int, list[AirAttempt]] = {}
        self._scanners: dict[str, tuple[MobileNode, int]] = {}
        self._uplink_chain_gen: dict[str, int] = {}

        self.bbrs: list[Bbr] = []
        self.nodes: list[MobileNode] = []
        self.devices: dict[str, object] = {}

        drift_rng = self.rng("drift")
        stagger_rng = self.rng("stagger")
        for i, pos in enumerate(scn.bbr_positions):
            if scn.sync_mode == "vgm" or i == 0:
                t_ref = 0.0
            else:
                t_ref = stagger_rng.uniform(0.25, 0.75)
            clock = ClockState(
                drift_ppm=draw_drift_ppm(drift_rng), offset=0.0, last_sync_t=t_ref
            )
            bbr = Bbr(f"bbr{i}", i, pos, clock, t_ref)
            bbr.kern = self
            self.bbrs.append(bbr)
            self.devices[bbr.id] = bbr
        for i, traj in enumerate(scn.trajectories):
            clock = ClockState(drift_ppm=draw_drift_ppm(drift_rng))
            node = MobileNode(f"n{i}", traj, clock)
            node.kern = self
            self.nodes.append(node)
            self.devices[node.id] = node

        # Master schedules: one shared under the grandmaster, one per gateway
        # in the desynchronized baseline.
        self.schedules: dict[str, sched.MasterSchedule] = {}
        self._last_propagated: dict[str, int] = {}
        if scn.sync_mode == "vgm":
            self.schedules["net"] = sched.MasterSchedule()
        else:
            for bbr in self.bbrs:
                self.schedules[bbr.id] = sched.MasterSchedule()
        for bbr in self.bbrs:
            key = self._schedule_key(bbr.id)
            bbr.install(self.schedules[key].snapshot())
            self._last_propagated[key] = self.schedules[key].version

        self._schedule_initial_events()

    # -- infrastructure --------------------------------------------------------

    def rng(self, name: str) -> random.Random:
        if name not in self._rngs:
            self._rngs[name] = random.Random(f"{self.scn.seed}:{name}")
        return self._rngs[name]

    def schedule_event(self, due: float, kind: EventKind, fn) -> None:
        self._event_seq += 1
        heapq.heappush(self._heap, Event(due, self._event_seq, kind, fn))

    def _schedule_key(self, bbr_id: str) -> str:
        return "net" if self.scn.sync_mode == "vgm" else bbr_id

    def _schedule_initial_events(self) -> None:
        scn = self.scn
        for bbr in self.bbrs:
            self.reschedule(bbr)
        for i, node in enumerate(self.nodes):
            start = i * scn.node_start_stagger
            self.schedule_event(
                start, EventKind.TIMER, lambda n=node: n.enter_scanning()
            )
        if scn.sync_mode == "vgm" and len(self.bbrs) > 0:
            self.schedule_event(0.0, EventKind.SYNC_EMIT, self._emit_sync)
        self.schedule_event(scn.sweep_interval, EventKind.TIMER, self._ns_sweep)
        self.schedule_event(
            self.cfg.frame_duration, EventKind.TIMER, self._sample_clocks
        )
        if scn.traffic is not None and scn.traffic.direction == "down":
            for node in self.nodes:
                self.schedule_event(
                    scn.traffic.start,
                    EventKind.APP_TRAFFIC,
                    lambda n=node: self._emit_request(n),
                )

    # -- clock-driven slot boundaries -------------------------------------------

    def boundary_time(self, dev, asn: int) -> float:
        """True instant at which ``dev`` believes slot ``asn`` starts."""
        target_local = dev.t_ref + asn * self.cfg.slot_duration
        d = dev.clock.drift_ppm * 1e-6
        return (target_local - dev.clock.offset + d * dev.clock.last_sync_t) / (1.0 + d)

    def current_asn_of(self, dev) -> int:
        elapsed = clock_read(dev.clock, self.now) - dev.t_ref
        if elapsed < 0:
            return -1
        return int(math.floor(elapsed / self.cfg.slot_duration))

    def reschedule(self, dev) -> None:
        """Drop any pending boundary for ``dev`` and schedule its next active slot."""
        dev.boundary_gen += 1
        gen = dev.boundary_gen
        asn = self.current_asn_of(dev)
        limit = self.cfg.length * self.cfg.eb_every + 2
        for candidate in range(asn + 1, asn + 1 + limit):
            if not dev.wants_slot(candidate):
                continue
            due = self.boundary_time(dev, candidate)
            if due <= self.now:
                continue
            self.schedule_event(
                due,
                EventKind.SLOT_BOUNDARY,
                lambda d=dev, a=candidate, g=gen: self._dispatch_boundary(d, a, g),
            )
            return

    def _dispatch_boundary(self, dev, asn: int, gen: int) -> None:
        if gen != dev.boundary_gen:
            return
        dev.on_boundary(asn)
        if gen == dev.boundary_gen:
            self.reschedule(dev)

    # -- air interface -----------------------------------------------------------

    def _rssi(self, sender, receiver) -> float:
        d = abs(sender.position(self.now) - receiver.position(self.now))
        base = rssi_at(self.params, max(d, 1e-3))
        # rssi_at budgets the port attenuation once; correct for links with
        # zero or two gateway endpoints.
        n_bbr = int(sender.is_bbr) + int(receiver.is_bbr)
        base += self.params.ext_attenuation_db * (1 - n_bbr)
        if self.scn.shadowing_sigma_db > 0:
            base += self.rng("shadow").gauss(0.0, self.scn.shadowing_sigma_db)
        return base

    def transmit(self, dev, frame: Frame, channel: int, role: str) -> None:
        attempt = AirAttempt(dev, frame, channel, role, self.now)
        lane = self._attempts.setdefault(channel, [])
        lane.append(attempt)
        horizon = self.now - 2 * (self.cfg.slot_duration + self.scn.guard_time)
        while lane and lane[0].t_tx < horizon:
            lane.pop(0)
        self.metrics.record_tx(self.now, dev.id, frame.kind.value, role)
        self.schedule_event(
            self.now + self.cfg.slot_duration,
            EventKind.TIMER,
            lambda a=attempt: self._resolve_scanners(a),
        )

    def listen(self, dev, channel: int, ctx: str) -> None:
        t_rx = self.now
        self.schedule_event(
            t_rx + self.cfg.slot_duration / 2,
            EventKind.TIMER,
            lambda: self._resolve_listen(dev, channel, t_rx, ctx),
        )

    def _audible(self, receiver, channel: int, t_center: float, window: float):
        out = []
        for attempt in self._attempts.get(channel, []):
            if abs(attempt.t_tx - t_center) > window:
                continue
            if attempt.sender is receiver:
                continue
            rssi = self._rssi(attempt.sender, receiver)
            if rssi >= self.params.sensitivity_dbm:
                out.append((attempt, rssi))
        return out

    def _resolve_listen(self, dev, channel: int, t_rx: float, ctx: str) -> None:
        audible = self._audible(dev, channel, t_rx, self.scn.guard_time)
        outcome = resolve_listener(audible)
        if outcome.outcome is Outcome.DELIVERED:
            attempt = outcome.attempt
            dev.on_frame(attempt.frame, attempt.sender, outcome.rssi, ctx)
        elif outcome.outcome is Outcome.COLLISION:
            self.metrics.record_collision(self.now, dev.id, ctx)

    def _resolve_scanners(self, attempt: AirAttempt) -> None:
        overlap = self.cfg.slot_duration * 0.999
        for dev, channel in list(self._scanners.values()):
            if channel != attempt.channel:
                continue
            audible = self._audible(dev, channel, attempt.t_tx, overlap)
            mine = [(a, r) for a, r in audible if a is attempt]
            if not mine:
                continue
            if len(audible) > 1:
                self.metrics.record_collision(self.now, dev.id, "scan")
                continue
            dev.on_frame(attempt.frame, attempt.sender, mine[0][1], "scan")

    def start_scanning(self, dev, channel: int) -> None:
        self._scanners[dev.id] = (dev, channel)

    def stop_scanning(self, dev) -> None:
        self._scanners.pop(dev.id, None)

    # -- backbone ------------------------------------------------------------------

    def forward_to_ns(self, bbr: Bbr, frame: Frame, rssi: float) -> None:
        report = UplinkReport(frame, rssi, bbr.id, self.now)
        self.schedule_event(
            self.now + self.scn.backbone_delay,
            EventKind.BACKBONE_MSG,
            lambda r=report: self._ns_receive(r),
        )

    def _ns_receive(self, report: UplinkReport) -> None:
        result = self.ns.ingest(report, self.now)
        frame = report.frame
        h = frame_hash(frame)
        if frame.kind in (FrameKind.REPLY, FrameKind.DATA):
            if result == "accepted":
                seq = (
                    frame.payload["req_seq"]
                    if frame.kind is FrameKind.REPLY
                    else frame.payload["app_seq"]
                )
                self.metrics.link_frame(h, seq)
                self.metrics.complete(seq, self.now)
            self.metrics.note_report(h, report.bbr)
        elif frame.kind is FrameKind.ADD_REQUEST and result == "accepted":
            self._process_join(report)
        self._dispatch_routes(self.ns.flush_pending(frame.src, self.now))

    def _dispatch_routes(self, routed: list[tuple[str, Frame]]) -> None:
        for bbr_id, frame in routed:
            bbr = self.devices[bbr_id]
            self.schedule_event(
                self.now + self.scn.backbone_delay,
                EventKind.BACKBONE_MSG,
                lambda b=bbr, f=frame: b.downlink_queue.append(f),
            )

    def uplink_candidates(self, node: MobileNode) -> list[int]:
        key = self._schedule_key(node.serving_bbr or self.bbrs[0].id)
        return sched.candidate_slots(self.schedules[key], self.cfg)

    def _process_join(self, report: UplinkReport) -> None:
        node_id = report.frame.src
        serving = self.devices[report.bbr]
        key = self._schedule_key(report.bbr)
        ms = self.schedules[key]
        if node_id not in ms.uplink:
            try:
                if node_id not in ms.downlink:
                    sched.allocate_downlink(ms, node_id, self.cfg)
                cell = sched.grant_uplink(
                    ms,
                    node_id,
                    report.frame.payload["candidates"],
                    report.frame.payload["channel_offset"],
                    self.cfg,
                )
            except sched.CapacityError:
                return
            if cell is None:
                # All proposed slots were taken in the meantime; the node
                # retries with fresh candidates after its grant timeout.
                return
        self._propagate(key)
        uplink = ms.uplink[node_id]
        down_slot, down_choff = ms.downlink[node_id]
        grant = Frame(
            l2_kind=L2Kind.UNICAST,
            src=serving.id,
            dst=node_id,
            seq=serving.next_seq(),
            payload_len=16,
            l3_dst=node_id,
            created_at=self.now,
            kind=FrameKind.GRANT,
            payload={
                "uplink_slot": uplink.slot_offset,
                "uplink_choffset": uplink.channel_offset,
                "downlink_slot": down_slot,
                "downlink_choffset": down_choff,
            },
        )
        self.schedule_event(
            self.now + self.scn.backbone_delay,
            EventKind.BACKBONE_MSG,
            lambda b=serving, g=grant: self._deliver_grant(b, g),
        )

    def _deliver_grant(self, bbr: Bbr, grant: Frame) -> None:
        bbr.grant_queue.append(grant)
        self.reschedule(bbr)

    def _propagate(self, key: str) -> None:
        snapshot = sched.propagate_schedule(
            self.schedules[key], self._last_propagated[key]
        )
        if snapshot is None:
            return
        self._last_propagated[key] = snapshot.version
        targets = self.bbrs if key == "net" else [self.devices[key]]
        for bbr in targets:
            self.schedule_event(
                self.now + self.scn.backbone_delay,
                EventKind.BACKBONE_MSG,
                lambda b=bbr, s=snapshot: b.install(s),
            )

    # -- timers and traffic -----------------------------------------------------------

    def _emit_sync(self) -> None:
        msg = vgm_emit_sync(self.grand_master, self.now, self.cfg.slot_duration)
        for bbr in self.bbrs:
            self.schedule_event(
                self.now + self.scn.backbone_delay,
                EventKind.BACKBONE_MSG,
                lambda b=bbr, m=msg: self._apply_bbr_sync(b, m),
            )
        self.schedule_event(
            self.now + self.scn.sync_period, EventKind.SYNC_EMIT, self._emit_sync
        )

    def _apply_bbr_sync(self, bbr: Bbr, msg) -> None:
        bbr.clock = apply_sync(
            bbr.clock,
            msg,
            self.scn.backbone_delay,
            self.now,
            self.scn.sync_error_bound,
            self.rng("sync"),
        )
        self.reschedule(bbr)

    def _ns_sweep(self) -> None:
        routed, dropped = self.ns.sweep(self.now)
        self._dispatch_routes(routed)
        for frame in dropped:
            self.metrics.mark_lost(frame.payload["app_seq"])
        self.schedule_event(
            self.now + self.scn.sweep_interval, EventKind.TIMER, self._ns_sweep
        )

    def _sample_clocks(self) -> None:
        if len(self.bbrs) >= 2:
            net_times = [
                clock_read(b.clock, self.now) - b.t_ref for b in self.bbrs
            ]
            self.metrics.sample_clocks(self.now, max(net_times) - min(net_times))
        self.schedule_event(
            self.now + self.cfg.frame_duration, EventKind.TIMER, self._sample_clocks
        )

    def _emit_request(self, node: MobileNode) -> None:
        traffic = self.scn.traffic
        self._app_seq += 1
        seq = self._app_seq
        frame = Frame(
            l2_kind=L2Kind.UNICAST,
            src=NS_ID,
            dst=node.id,
            seq=seq,
            payload_len=traffic.payload_bytes,
            l3_dst=node.id,
            created_at=self.now,
            kind=FrameKind.DATA,
            payload={"app_seq": seq},
        )
        self.metrics.open_packet(seq, "down", self.now, node.id)
        bbr_id = self.ns.route_downlink(frame, self.now)
        if bbr_id is not None:
            self._dispatch_routes([(bbr_id, frame)])
        nxt = self.now + traffic.period
        if nxt <= traffic.end:
            self.schedule_event(
                nxt, EventKind.APP_TRAFFIC, lambda n=node: self._emit_request(n)
            )

    def on_node_operational(self, node: MobileNode) -> None:
        self.metrics.join_events.append((self.now, node.id))
        traffic = self.scn.traffic
        if traffic is not None and traffic.direction == "up":
            gen = self._uplink_chain_gen.get(node.id, 0) + 1
            self._uplink_chain_gen[node.id] = gen
            self.schedule_event(
                self.now + traffic.period,
                EventKind.APP_TRAFFIC,
                lambda n=node, g=gen: self._emit_uplink(n, g),
            )

    def _emit_uplink(self, node: MobileNode, gen: int) -> None:
        if gen != self._uplink_chain_gen.get(node.id):
            return
        traffic = self.scn.traffic
        if node.phase.value == "operational" and self.now <= traffic.end:
            self._app_seq += 1
            seq = self._app_seq
            self.metrics.open_packet(seq, "up", self.now, node.id)
            node.enqueue_uplink(
                Frame(
                    l2_kind=L2Kind.BROADCAST,
                    src=node.id,
                    dst=timing.ANY,
                    seq=node.next_seq(),
                    payload_len=traffic.payload_bytes,
                    l3_dst=NS_ID,
                    created_at=self.now,
                    kind=FrameKind.DATA,
                    payload={"app_seq": seq},
                )
            )
        nxt = self.now + traffic.period
        if nxt <= traffic.end:
            self.schedule_event(
                nxt, EventKind.APP_TRAFFIC, lambda n=node, g=gen: self._emit_uplink(n, g)
            )

    # -- main loop ------------------------------------------------------------------

    def run(self) -> MetricsLog:
        horizon = self.scn.horizon
        while self._heap:
            if self._heap[0].due > horizon:
                break
            event = heapq.heappop(self._heap)
            if event.due < self.now - 1e-9:
                raise AssertionError(
                    f"event at {event.due} dispatched after {self.now}"
                )
            self.now = max(self.now, event.due)
            event.fn()
        self.now = horizon
        self.metrics.finalize(horizon)
        return self.metrics


def run(scn: Scenario) -> MetricsLog:
    """Build and execute one scenario; deterministic under a fixed seed."""
    return Simulation(scn).run()
