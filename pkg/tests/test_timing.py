import math
import random

import pytest

from tschsim.timing import (
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
    eb_cycle_of,
    is_eb_emission_slot,
    schedule_action,
    slot_offset_of,
)

IDENTITY = tuple(range(11, 27))


def slot_counter_oracle(t, t_ref, slot_duration):
    """Count slot boundaries one by one; independent of the floor formula."""
    asn = 0
    boundary = t_ref + slot_duration
    while boundary <= t:
        asn += 1
        boundary += slot_duration
    return asn


class TestAsnAt:
    def test_zero_elapsed(self):
        assert asn_at(0.0, 0.0, 0.010) == 0

    def test_exact_division(self):
        assert asn_at(1.000, 0.0, 0.010) == 100

    def test_floor_semantics_against_counter(self):
        assert asn_at(1.0099, 0.0, 0.010) == 100
        assert asn_at(1.0099, 0.0, 0.010) == slot_counter_oracle(1.0099, 0.0, 0.010)

    def test_counter_oracle_sweep(self):
        rng = random.Random(7)
        for _ in range(200):
            t_ref = rng.uniform(0, 5)
            t = t_ref + rng.uniform(0, 20)
            assert asn_at(t, t_ref, 0.010) == slot_counter_oracle(t, t_ref, 0.010)

    def test_before_reference_rejected(self):
        with pytest.raises(TimeReferenceError):
            asn_at(-0.5, 0.0, 0.010)

    def test_guard_band_agreement(self):
        # Two synchronized clocks within one guard time agree on the ASN
        # except right around a slot boundary.
        guard = 0.001
        rng = random.Random(3)
        for _ in range(500):
            t = rng.uniform(0, 10)
            err = rng.uniform(-guard, guard)
            a, b = asn_at(t, 0, 0.010), asn_at(max(t + err, 0), 0, 0.010)
            dist_to_boundary = min(t % 0.010, 0.010 - t % 0.010)
            if dist_to_boundary > guard:
                assert a == b


class TestSlotframeGeometry:
    def test_slot_offset_examples(self):
        cfg = SlotframeConfig(length=101)
        assert slot_offset_of(0, cfg) == 0
        assert slot_offset_of(101, cfg) == 0
        assert slot_offset_of(205, cfg) == 205 % 101 == 3

    def test_wraparound_property(self):
        cfg = SlotframeConfig(length=97)
        rng = random.Random(11)
        for _ in range(1000):
            asn = rng.randrange(10**9)
            assert slot_offset_of(asn + cfg.length, cfg) == slot_offset_of(asn, cfg)

    def test_duplicate_channels_rejected(self):
        with pytest.raises(ValueError):
            SlotframeConfig(hopping_sequence=(11, 11, 12))

    def test_min_length(self):
        with pytest.raises(ValueError):
            SlotframeConfig(length=1)

    def test_num_channel_offsets_tracks_sequence(self):
        cfg = SlotframeConfig(hopping_sequence=(15, 20, 25))
        assert cfg.num_channel_offsets == 3


class TestChannelFor:
    def setup_method(self):
        self.cfg = SlotframeConfig(hopping_sequence=IDENTITY)

    def test_first_slot_first_offset(self):
        assert channel_for(0, 0, self.cfg) == 11

    def test_derived_example(self):
        # (5 + 3) mod 16 = 8 -> channel 11 + 8
        assert channel_for(5, 3, self.cfg) == 19

    def test_full_cycle_wrap(self):
        assert channel_for(16, 0, self.cfg) == 11

    def test_offset_out_of_range(self):
        with pytest.raises(IndexError):
            channel_for(0, 16, self.cfg)

    def test_node_and_bbr_agree_exhaustively(self):
        # One full hopping period x all offsets, against a table oracle.
        table = {
            (asn, off): IDENTITY[(asn + off) % 16]
            for asn in range(16)
            for off in range(16)
        }
        for (asn, off), expected in table.items():
            node_view = channel_for(asn, off, self.cfg)
            bbr_view = channel_for(asn, off, self.cfg)
            assert node_view == bbr_view == expected


class TestEbChannelCoverage:
    @pytest.mark.parametrize("length,eb_every", [(97, 2), (101, 2), (29, 7), (128, 2)])
    def test_beacons_sweep_every_channel(self, length, eb_every):
        cfg = SlotframeConfig(length=length, eb_every=eb_every)
        channels = set()
        for cycle in range(cfg.num_channel_offsets):
            asn = cycle * eb_every * length
            assert is_eb_emission_slot(asn, cfg)
            assert eb_cycle_of(asn, cfg) == cycle
            choff = eb_channel_offset(asn, 0, cfg)
            channels.add(channel_for(asn, choff, cfg))
        assert channels == set(cfg.hopping_sequence)

    def test_bbrs_use_distinct_channels_in_shared_beacon_slot(self):
        cfg = SlotframeConfig()
        for cycle in range(40):
            asn = cycle * cfg.eb_every * cfg.length
            c0 = channel_for(asn, eb_channel_offset(asn, 0, cfg), cfg)
            c1 = channel_for(asn, eb_channel_offset(asn, 1, cfg), cfg)
            assert c0 != c1


def make_schedule(cfg):
    return {
        Cell(cfg.eb_slot, 0, CellRole.EB, ANY),
        Cell(1, 0, CellRole.SHARED_DOWNLINK, "n0"),
        Cell(1, 1, CellRole.SHARED_DOWNLINK, "n1"),
        Cell(5, 4, CellRole.NEG_UPLINK, "n0"),
        Cell(6, 2, CellRole.NEG_UPLINK, "n1"),
    }


class TestScheduleAction:
    def setup_method(self):
        self.cfg = SlotframeConfig(length=97)
        self.schedule = make_schedule(self.cfg)

    def test_owner_transmits_in_own_uplink_slot(self):
        action = schedule_action(self.schedule, 5, self.cfg, "n0")
        assert action.kind is ActionKind.TRANSMIT
        assert action.cell.role is CellRole.NEG_UPLINK

    def test_no_cell_means_sleep(self):
        assert schedule_action(self.schedule, 6, self.cfg, "n0").kind is ActionKind.SLEEP

    def test_bbr_idle_listens_in_downlink_slot(self):
        action = schedule_action(
            self.schedule, 1, self.cfg, "bbr0", is_bbr=True, downlink_pending=set()
        )
        assert action.kind is ActionKind.RECEIVE

    def test_bbr_serves_pending_downlink(self):
        action = schedule_action(
            self.schedule, 1, self.cfg, "bbr0", is_bbr=True, downlink_pending={"n1"}
        )
        assert action.kind is ActionKind.TRANSMIT
        assert action.cell.owner == "n1"

    def test_decision_table_exhaustive(self):
        # Enumerate (actor kind x cell role at slot x pending state); the
        # independent oracle is the priority rule: transmit > receive > sleep.
        for is_bbr in (False, True):
            for asn in range(self.cfg.length):
                for pending in (frozenset(), frozenset({"n0"}), frozenset({"n1"})):
                    for eb_due in (False, True):
                        action = schedule_action(
                            self.schedule, asn, self.cfg, "n0",
                            is_bbr=is_bbr, downlink_pending=pending, eb_due=eb_due,
                        )
                        assert isinstance(action, Action)
                        offset = asn % self.cfg.length
                        here = [c for c in self.schedule if c.slot_offset == offset]
                        if not here:
                            assert action.kind is ActionKind.SLEEP
                        if action.kind is ActionKind.TRANSMIT:
                            assert action.cell in here
                            if not is_bbr:
                                assert action.cell.owner == "n0"
                            else:
                                assert (
                                    action.cell.role is CellRole.EB and eb_due
                                ) or action.cell.owner in pending

    def test_totality(self):
        # Every (actor, asn) pair yields exactly one action.
        for asn in range(2 * self.cfg.length):
            for actor, is_bbr in (("n0", False), ("n1", False), ("bbr0", True)):
                action = schedule_action(
                    self.schedule, asn, self.cfg, actor, is_bbr=is_bbr
                )
                assert action.kind in (
                    ActionKind.TRANSMIT, ActionKind.RECEIVE, ActionKind.SLEEP
                )

    def test_owner_without_traffic_sleeps(self):
        action = schedule_action(
            self.schedule, 5, self.cfg, "n0", uplink_pending=False
        )
        assert action.kind is ActionKind.SLEEP
