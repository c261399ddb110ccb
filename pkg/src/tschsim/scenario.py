"""Scenario definition, validation, and the sectioned key-value file format.

Scenario files are plain INI-style text: ``[section]`` headers, ``key = value``
lines, ``#`` comments.  Parsing reports the offending line for unknown keys,
bad values and missing sections, so scenario files stay hand-editable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .radio import RadioParams, Trajectory
from .timing import SlotframeConfig

MAX_NODE_SPEED = 3.0  # m/s, shuttle ceiling


class ScenarioError(ValueError):
    """A scenario file or override could not be parsed or validated."""


@dataclass
class TrafficSpec:
    direction: str = "down"
    payload_bytes: int = 80
    period: float = 1.0
    start: float = 40.0
    end: float = 220.0
    allow_fast: bool = False


@dataclass
class Scenario:
    seed: int = 1
    horizon: float = 230.0
    sync_mode: str = "vgm"
    backbone_delay: float = 0.001
    sync_period: float = 10.0
    sync_error_bound: float = 0.0001
    guard_time: float = 0.001
    node_start_stagger: float = 0.0
    outage_gap_threshold: float = 3.0
    slotframe: SlotframeConfig = field(default_factory=SlotframeConfig)
    radio: RadioParams = field(default_factory=RadioParams)
    shadowing_sigma_db: float = 0.0
    bbr_positions: tuple[float, ...] = (8.5, 43.5)
    trajectories: tuple[Trajectory, ...] = (Trajectory(0.0, 52.0, 1.0, 50.0),)
    traffic: TrafficSpec | None = field(default_factory=TrafficSpec)
    keepalive_timeout: float = 10.0
    eb_listen_patience: float = 5.0
    keepalive_tx_interval: float = 2.0
    grant_timeout: float | None = None
    p_persist: float = 0.5
    drop_timeout: float = 10.0
    dedup_ttl: float = 5.0
    entry_ttl: float = 3.0
    rssi_window: int = 4
    sweep_interval: float = 0.25
    uplink_queue_cap: int = 16

    def __post_init__(self):
        if self.grant_timeout is None:
            self.grant_timeout = 2.5 * self.slotframe.frame_duration

    def validate(self) -> None:
        if self.sync_mode not in ("vgm", "baseline"):
            raise ScenarioError(f"unknown sync_mode {self.sync_mode!r}")
        if self.horizon <= 0:
            raise ScenarioError("horizon must be positive")
        if not self.bbr_positions:
            raise ScenarioError("at least one BBR position required")
        if self.guard_time <= 0:
            raise ScenarioError("guard_time must be positive")
        if not 0 < self.p_persist <= 1:
            raise ScenarioError("p_persist must lie in (0, 1]")
        if self.backbone_delay < 0:
            raise ScenarioError("backbone_delay must be non-negative")
        for traj in self.trajectories:
            if abs(traj.speed) > MAX_NODE_SPEED:
                raise ScenarioError(
                    f"node speed {traj.speed} exceeds the {MAX_NODE_SPEED} m/s limit"
                )
        if self.traffic is not None:
            t = self.traffic
            if t.direction not in ("down", "up"):
                raise ScenarioError(f"unknown traffic direction {t.direction!r}")
            if not 8 <= t.payload_bytes <= 128:
                raise ScenarioError(
                    f"payload_bytes {t.payload_bytes} outside [8, 128]"
                )
            if t.period < 1.0 and not t.allow_fast:
                raise ScenarioError(
                    f"traffic period {t.period}s is faster than the 1 Hz ceiling; "
                    "set allow_fast = true to override"
                )
            if t.period <= 0:
                raise ScenarioError("traffic period must be positive")


# ---------------------------------------------------------------------------
# File format
# ---------------------------------------------------------------------------

def _parse_bool(s: str) -> bool:
    if s.lower() in ("true", "yes", "1"):
        return True
    if s.lower() in ("false", "no", "0"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _parse_floats(s: str) -> tuple[float, ...]:
    return tuple(float(part.strip()) for part in s.split(",") if part.strip())


def _parse_hopping(s: str) -> tuple[int, ...]:
    s = s.strip()
    if "-" in s and "," not in s:
        lo, hi = s.split("-", 1)
        return tuple(range(int(lo), int(hi) + 1))
    return tuple(int(part.strip()) for part in s.split(",") if part.strip())


_SCHEMA: dict[str, dict[str, object]] = {
    "general": {
        "seed": int,
        "horizon_s": float,
        "sync_mode": str,
        "backbone_delay_s": float,
        "sync_period_s": float,
        "sync_error_bound_s": float,
        "guard_time_s": float,
        "node_start_stagger_s": float,
        "outage_gap_threshold_s": float,
    },
    "slotframe": {
        "length": int,
        "slot_duration_s": float,
        "hopping": _parse_hopping,
        "eb_every": int,
    },
    "radio": {
        "tx_power_dbm": float,
        "ext_attenuation_db": float,
        "pl0_db": float,
        "exponent": float,
        "sensitivity_dbm": float,
        "shadowing_sigma_db": float,
    },
    "bbrs": {
        "positions_m": _parse_floats,
    },
    "nodes": {
        "count": int,
        "start_pos_m": float,
        "end_pos_m": float,
        "speed_mps": float,
        "move_start_s": float,
    },
    "traffic": {
        "direction": str,
        "payload_bytes": int,
        "period_s": float,
        "start_s": float,
        "end_s": float,
        "allow_fast": _parse_bool,
    },
}

_REQUIRED_SECTIONS = ("bbrs", "nodes")


def _read_pairs(text: str) -> dict[tuple[str, str], tuple[str, int]]:
    pairs: dict[tuple[str, str], tuple[str, int]] = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip().lower()
            if section not in _SCHEMA:
                raise ScenarioError(f"line {lineno}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ScenarioError(f"line {lineno}: expected 'key = value', got {raw!r}")
        if section is None:
            raise ScenarioError(f"line {lineno}: key outside any [section]")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.lower()
        if key not in _SCHEMA[section]:
            raise ScenarioError(f"line {lineno}: unknown key {key!r} in [{section}]")
        pairs[(section, key)] = (value, lineno)
    return pairs


def _get(pairs, section, key, default):
    if (section, key) not in pairs:
        return default
    value, lineno = pairs[(section, key)]
    caster = _SCHEMA[section][key]
    try:
        return caster(value)
    except (ValueError, TypeError) as exc:
        raise ScenarioError(f"line {lineno}: bad value for {section}.{key}: {exc}") from exc


def parse_scenario(text: str, overrides: dict[str, str] | None = None) -> Scenario:
    """Parse a scenario file into a fully validated Scenario with defaults.

    ``overrides`` maps dotted keys ("traffic.period_s") to raw value strings and
    is applied on top of the file before validation.
    """
    pairs = _read_pairs(text)
    for dotted, value in (overrides or {}).items():
        if "." not in dotted:
            raise ScenarioError(f"override {dotted!r} must look like section.key")
        section, key = dotted.lower().split(".", 1)
        if section not in _SCHEMA or key not in _SCHEMA[section]:
            raise ScenarioError(f"override {dotted!r} names no known scenario key")
        pairs[(section, key)] = (value, 0)
    sections_present = {section for section, _ in pairs}
    for required in _REQUIRED_SECTIONS:
        if required not in sections_present:
            raise ScenarioError(
                f"line {len(text.splitlines()) + 1}: missing required section [{required}]"
            )

    slotframe = SlotframeConfig(
        length=_get(pairs, "slotframe", "length", 97),
        slot_duration=_get(pairs, "slotframe", "slot_duration_s", 0.010),
        hopping_sequence=_get(pairs, "slotframe", "hopping", SlotframeConfig().hopping_sequence),
        eb_every=_get(pairs, "slotframe", "eb_every", 2),
    )
    radio = RadioParams(
        tx_power_dbm=_get(pairs, "radio", "tx_power_dbm", 3.0),
        ext_attenuation_db=_get(pairs, "radio", "ext_attenuation_db", 20.0),
        pl0_db=_get(pairs, "radio", "pl0_db", 40.0),
        exponent=_get(pairs, "radio", "exponent", 2.36),
        sensitivity_dbm=_get(pairs, "radio", "sensitivity_dbm", -90.0),
    )

    count = _get(pairs, "nodes", "count", 1)
    if count < 0:
        raise ScenarioError("nodes.count must be non-negative")
    start_pos = _get(pairs, "nodes", "start_pos_m", 0.0)
    end_pos = _get(pairs, "nodes", "end_pos_m", start_pos)
    speed = _get(pairs, "nodes", "speed_mps", 0.0)
    move_start = _get(pairs, "nodes", "move_start_s", 0.0)
    if count == 1:
        trajectories = (Trajectory(start_pos, end_pos, speed, move_start),)
    elif speed == 0.0:
        # Static fleet spread evenly over [start_pos, end_pos].
        step = (end_pos - start_pos) / (count - 1) if count > 1 else 0.0
        trajectories = tuple(
            Trajectory(start_pos + i * step, start_pos + i * step, 0.0, 0.0)
            for i in range(count)
        )
    else:
        trajectories = tuple(
            Trajectory(start_pos, end_pos, speed, move_start) for _ in range(count)
        )

    traffic = None
    if any(section == "traffic" for section, _ in pairs):
        traffic = TrafficSpec(
            direction=_get(pairs, "traffic", "direction", "down"),
            payload_bytes=_get(pairs, "traffic", "payload_bytes", 80),
            period=_get(pairs, "traffic", "period_s", 1.0),
            start=_get(pairs, "traffic", "start_s", 40.0),
            end=_get(pairs, "traffic", "end_s", 220.0),
            allow_fast=_get(pairs, "traffic", "allow_fast", False),
        )

    scn = Scenario(
        seed=_get(pairs, "general", "seed", 1),
        horizon=_get(pairs, "general", "horizon_s", 230.0),
        sync_mode=_get(pairs, "general", "sync_mode", "vgm").lower(),
        backbone_delay=_get(pairs, "general", "backbone_delay_s", 0.001),
        sync_period=_get(pairs, "general", "sync_period_s", 10.0),
        sync_error_bound=_get(pairs, "general", "sync_error_bound_s", 0.0001),
        guard_time=_get(pairs, "general", "guard_time_s", 0.001),
        node_start_stagger=_get(pairs, "general", "node_start_stagger_s", 0.0),
        outage_gap_threshold=_get(pairs, "general", "outage_gap_threshold_s", 3.0),
        slotframe=slotframe,
        radio=radio,
        shadowing_sigma_db=_get(pairs, "radio", "shadowing_sigma_db", 0.0),
        bbr_positions=_get(pairs, "bbrs", "positions_m", (8.5, 43.5)),
        trajectories=trajectories,
        traffic=traffic,
    )
    scn.validate()
    return scn


def scenario_text(scn: Scenario) -> str:
    """Canonical file-format echo of a scenario (round-trips via parse)."""
    lines = [
        "[general]",
        f"seed = {scn.seed}",
        f"horizon_s = {scn.horizon}",
        f"sync_mode = {scn.sync_mode}",
        f"backbone_delay_s = {scn.backbone_delay}",
        f"sync_period_s = {scn.sync_period}",
        f"sync_error_bound_s = {scn.sync_error_bound}",
        f"guard_time_s = {scn.guard_time}",
        f"node_start_stagger_s = {scn.node_start_stagger}",
        f"outage_gap_threshold_s = {scn.outage_gap_threshold}",
        "",
        "[slotframe]",
        f"length = {scn.slotframe.length}",
        f"slot_duration_s = {scn.slotframe.slot_duration}",
        f"hopping = {', '.join(str(c) for c in scn.slotframe.hopping_sequence)}",
        f"eb_every = {scn.slotframe.eb_every}",
        "",
        "[radio]",
        f"tx_power_dbm = {scn.radio.tx_power_dbm}",
        f"ext_attenuation_db = {scn.radio.ext_attenuation_db}",
        f"pl0_db = {scn.radio.pl0_db}",
        f"exponent = {scn.radio.exponent}",
        f"sensitivity_dbm = {scn.radio.sensitivity_dbm}",
        f"shadowing_sigma_db = {scn.shadowing_sigma_db}",
        "",
        "[bbrs]",
        f"positions_m = {', '.join(str(p) for p in scn.bbr_positions)}",
        "",
        "[nodes]",
        f"count = {len(scn.trajectories)}",
    ]
    if scn.trajectories:
        lines += [
            f"start_pos_m = {scn.trajectories[0].start_pos}",
            f"end_pos_m = {scn.trajectories[-1].end_pos}",
            f"speed_mps = {scn.trajectories[0].speed}",
            f"move_start_s = {scn.trajectories[0].start_time}",
        ]
    if scn.traffic is not None:
        lines += [
            "",
            "[traffic]",
            f"direction = {scn.traffic.direction}",
            f"payload_bytes = {scn.traffic.payload_bytes}",
            f"period_s = {scn.traffic.period}",
            f"start_s = {scn.traffic.start}",
            f"end_s = {scn.traffic.end}",
            f"allow_fast = {str(scn.traffic.allow_fast).lower()}",
        ]
    return "\n".join(lines) + "\n"
