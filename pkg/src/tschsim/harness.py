"""Named experiments, CSV emission and summary statistics.

The built-in experiments carry their own pass/fail checks; running one through
the CLI therefore doubles as the acceptance gate for the corresponding result.
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass

from . import engine
from .engine import MetricsLog, Simulation, nearest_rank_percentile
from .radio import coverage_radius, position_at
from .scenario import Scenario, ScenarioError, parse_scenario, scenario_text
from .schedule import validate_schedule

PACKET_COLUMNS = [
    "seq", "direction", "sent_at_s", "recv_at_s", "rtt_s", "lost", "bbr_set", "dup_count",
]
SUMMARY_METRICS = ["loss_rate", "mean_rtt_s", "p99_rtt_s", "max_outage_s", "dup_ratio"]


def packets_csv_text(log: MetricsLog) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(PACKET_COLUMNS)
    for r in log.records:
        writer.writerow([
            r.seq,
            r.direction,
            repr(r.sent_at),
            "" if r.recv_at is None else repr(r.recv_at),
            "" if r.rtt is None else repr(r.rtt),
            int(r.lost),
            "|".join(sorted(r.bbr_set)),
            r.dup_count,
        ])
    return buf.getvalue()


def summary_rows(log: MetricsLog) -> list[tuple[str, float]]:
    rtts = log.rtts()
    if not log.records:
        return []
    return [
        ("loss_rate", log.loss_rate()),
        ("mean_rtt_s", sum(rtts) / len(rtts) if rtts else 0.0),
        ("p99_rtt_s", nearest_rank_percentile(rtts, 99) if rtts else 0.0),
        ("max_outage_s", log.max_outage()),
        ("dup_ratio", log.dup_ratio()),
    ]


def summary_csv_text(log: MetricsLog) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["metric", "value"])
    for metric, value in summary_rows(log):
        writer.writerow([metric, repr(value)])
    return buf.getvalue()


def emit_csv(log: MetricsLog, out_dir: str) -> dict[str, str]:
    """Write packets.csv and summary.csv under ``out_dir``; returns the paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "packets": os.path.join(out_dir, "packets.csv"),
        "summary": os.path.join(out_dir, "summary.csv"),
    }
    with open(paths["packets"], "w", newline="") as fh:
        fh.write(packets_csv_text(log))
    with open(paths["summary"], "w", newline="") as fh:
        fh.write(summary_csv_text(log))
    return paths


@dataclass
class CsvPacket:
    seq: int
    direction: str
    sent_at: float
    recv_at: float | None
    rtt: float | None
    lost: bool
    bbr_set: set[str]
    dup_count: int


def load_packets(path: str) -> list[CsvPacket]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(CsvPacket(
                seq=int(row["seq"]),
                direction=row["direction"],
                sent_at=float(row["sent_at_s"]),
                recv_at=float(row["recv_at_s"]) if row["recv_at_s"] else None,
                rtt=float(row["rtt_s"]) if row["rtt_s"] else None,
                lost=bool(int(row["lost"])),
                bbr_set=set(row["bbr_set"].split("|")) if row["bbr_set"] else set(),
                dup_count=int(row["dup_count"]),
            ))
    return out


# ---------------------------------------------------------------------------
# Built-in experiments
# ---------------------------------------------------------------------------

HANDOVER_SYNC = """
[general]
seed = 1
horizon_s = 240
sync_mode = vgm

[bbrs]
positions_m = 8.5, 43.5

[nodes]
count = 1
start_pos_m = 0
end_pos_m = 52
speed_mps = 1.0
move_start_s = 50

[traffic]
direction = down
payload_bytes = 80
period_s = 1.0
start_s = 40
end_s = 220
"""

HANDOVER_NOSYNC = HANDOVER_SYNC.replace("sync_mode = vgm", "sync_mode = baseline")

HANDOVER_300MS = (
    HANDOVER_SYNC
    + """
[slotframe]
length = 29
"""
).replace(
    "period_s = 1.0",
    "period_s = 0.3\nallow_fast = true",
)

SCALE_100 = """
[general]
seed = 1
horizon_s = 700
sync_mode = vgm
node_start_stagger_s = 5.0

[slotframe]
length = 128

[bbrs]
positions_m = 0

[nodes]
count = 100
start_pos_m = 2
end_pos_m = 22
speed_mps = 0

[traffic]
direction = up
payload_bytes = 16
period_s = 1.28
start_s = 0
end_s = 695
"""

MAX_RTT_S = 1.05
# Pairwise gateway clock bound: 2 * (sync residual + drift over one sync period).
BBR_CLOCK_BOUND_S = 2 * (0.0001 + 30e-6 * 10.0)


def check_handover_sync(log: MetricsLog, sim: Simulation) -> list[str]:
    failures = []
    if log.loss_rate() != 0.0:
        failures.append(f"loss_rate = {log.loss_rate():.4f}, expected 0")
    rtts = log.rtts()
    if not rtts:
        failures.append("no delivered packets")
    elif max(rtts) > MAX_RTT_S:
        failures.append(f"p100 RTT = {max(rtts):.3f}s, expected <= {MAX_RTT_S}s")
    if len(log.records) < 170:
        failures.append(f"only {len(log.records)} request samples, expected >= 170")
    failures += _check_overlap_duplication(log, sim)
    for t, gap in log.clock_samples:
        if gap > BBR_CLOCK_BOUND_S + 1e-9:
            failures.append(f"BBR clock gap {gap * 1e3:.3f}ms at t={t:.1f}s exceeds bound")
            break
    return failures


def _check_overlap_duplication(log: MetricsLog, sim: Simulation) -> list[str]:
    traj = sim.scn.trajectories[0]
    move_end = traj.start_time + (traj.end_pos - traj.start_pos) / traj.speed
    moving = [
        r for r in log.delivered_records()
        if traj.start_time <= r.recv_at <= move_end
    ]
    dup_pos = sorted(position_at(traj, r.recv_at) for r in moving if r.dup_count >= 2)
    if not dup_pos:
        return ["no duplicated uplink packets observed in the overlap zone"]
    lo, hi = dup_pos[0], dup_pos[-1]
    for r in moving:
        pos = position_at(traj, r.recv_at)
        if lo < pos < hi and r.dup_count < 2:
            return [f"duplication gap inside the overlap span at {pos:.1f} m"]
        if r.dup_count >= 2 and not lo <= pos <= hi:
            return [f"duplicated packet outside the overlap span at {pos:.1f} m"]
    sample_spacing = sim.scn.traffic.period * traj.speed
    span = hi - lo + sample_spacing
    if not 14.0 <= span <= 16.0:
        return [f"overlap duplication span {span:.2f} m outside 15 +/- 1 m"]
    return []


def check_handover_nosync(log: MetricsLog, sim: Simulation) -> list[str]:
    failures = []
    outages = log.outages
    if len(outages) != 1:
        failures.append(f"{len(outages)} outages, expected exactly 1")
    elif not 10.0 <= outages[0].duration <= 120.0:
        failures.append(
            f"outage of {outages[0].duration:.1f}s outside [10s, 120s]"
        )
    slot = sim.cfg.slot_duration
    if not any(gap > slot for _, gap in log.clock_samples):
        failures.append("gateway timebases never diverged beyond one slot")
    return failures


def check_handover_300ms(log: MetricsLog, sim: Simulation) -> list[str]:
    failures = []
    if log.loss_rate() != 0.0:
        failures.append(f"loss_rate = {log.loss_rate():.4f}, expected 0")
    rtts = log.rtts()
    if rtts and max(rtts) > MAX_RTT_S:
        failures.append(f"p100 RTT = {max(rtts):.3f}s, expected <= {MAX_RTT_S}s")
    return failures


def check_scale_100(log: MetricsLog, sim: Simulation) -> list[str]:
    failures = []
    ms = sim.schedules["net"]
    conflicts = validate_schedule(ms, sim.cfg)
    if conflicts:
        failures.append(f"schedule conflicts: {conflicts[:3]}")
    if len(ms.uplink) != 100:
        failures.append(f"{len(ms.uplink)} uplink cells allocated, expected 100")
    if len(ms.downlink_slots) != 7:
        failures.append(f"{len(ms.downlink_slots)} downlink slots, expected 7")
    joined = {node for _, node in log.join_events}
    if len(joined) != 100:
        failures.append(f"only {len(joined)} nodes reached operational")
        return failures
    uplink_collisions = [c for c in log.collisions if c[2] == "uplink"]
    if uplink_collisions:
        failures.append(f"{len(uplink_collisions)} collisions in negotiated uplink cells")
    window_frames = 101
    t0 = max(t for t, _ in log.join_events)
    t1 = t0 + window_frames * sim.cfg.frame_duration
    if t1 > sim.scn.horizon:
        failures.append("horizon too short for the throughput window")
        return failures
    per_node = {node.id: 0 for node in sim.nodes}
    for r in log.records:
        if r.direction == "up" and r.recv_at is not None and t0 < r.recv_at <= t1:
            per_node[r.node] += 1
    starved = {n: c for n, c in per_node.items() if c < window_frames - 1}
    if starved:
        worst = min(starved, key=starved.get)
        failures.append(
            f"{len(starved)} nodes below 1 packet/slotframe "
            f"(worst {worst}: {starved[worst]}/{window_frames - 1})"
        )
    return failures


EXPERIMENTS = {
    "handover-sync": (HANDOVER_SYNC, check_handover_sync),
    "handover-nosync": (HANDOVER_NOSYNC, check_handover_nosync),
    "handover-300ms": (HANDOVER_300MS, check_handover_300ms),
    "scale-100": (SCALE_100, check_scale_100),
}


def run_scenario(scn: Scenario) -> tuple[MetricsLog, Simulation]:
    sim = Simulation(scn)
    log = sim.run()
    return log, sim


def run_experiment(
    name: str,
    seed: int | None = None,
    out_dir: str | None = None,
    overrides: dict[str, str] | None = None,
) -> tuple[int, dict[str, str], list[str]]:
    """Run a named experiment or scenario file; returns (exit code, paths, failures)."""
    checks = None
    if name in EXPERIMENTS:
        text, checks = EXPERIMENTS[name]
    elif os.path.exists(name):
        with open(name) as fh:
            text = fh.read()
    else:
        raise ScenarioError(f"unknown experiment {name!r} and no such file")
    merged = dict(overrides or {})
    if seed is not None:
        merged["general.seed"] = str(seed)
    scn = parse_scenario(text, merged)
    log, sim = run_scenario(scn)
    out_dir = out_dir or os.path.join("runs", os.path.basename(name))
    paths = emit_csv(log, out_dir)
    paths["scenario"] = os.path.join(out_dir, "scenario.ini")
    with open(paths["scenario"], "w") as fh:
        fh.write(scenario_text(scn))
    failures = checks(log, sim) if checks is not None else []
    return (1 if failures else 0), paths, failures
