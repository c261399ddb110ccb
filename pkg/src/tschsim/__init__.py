"""Discrete-event simulator for single-hop multi-gateway 802.15.4e TSCH
networks with roaming nodes.

The library is organized in layers: pure timing/radio/clock primitives at the
bottom, the master schedule and protocol state machines above them, and a
deterministic event kernel (`engine.Simulation`) that ties a `Scenario`
together into a `MetricsLog`.
"""

from .clocks import (
    ClockState,
    GrandMaster,
    SyncMessage,
    apply_sync,
    clock_read,
    is_desynchronized,
    node_frame_sync,
    vgm_emit_sync,
)
from .engine import MetricsLog, Simulation, measure_rtt, run
from .nodes import (
    Bbr,
    BbrTable,
    DedupTable,
    Frame,
    FrameKind,
    L2Kind,
    MobileNode,
    NetworkServer,
    NodePhase,
    NoRouteError,
    UplinkReport,
    frame_hash,
)
from .radio import (
    Outcome,
    RadioParams,
    Trajectory,
    TransmissionAttempt,
    coverage_radius,
    deliver_slot,
    position_at,
    rssi_at,
)
from .scenario import Scenario, ScenarioError, TrafficSpec, parse_scenario, scenario_text
from .schedule import (
    CapacityError,
    MasterSchedule,
    allocate_downlink,
    candidate_slots,
    grant_uplink,
    negotiate_uplink,
    propagate_schedule,
    release_node,
    validate_schedule,
)
from .timing import (
    ANY,
    Action,
    ActionKind,
    Cell,
    CellRole,
    SlotframeConfig,
    TimeReferenceError,
    asn_at,
    channel_for,
    eb_channel_offset,
    schedule_action,
    slot_offset_of,
)

__version__ = "0.1.0"
