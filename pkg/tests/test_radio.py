import math

import pytest

from tschsim.radio import (
    Outcome,
    RadioParams,
    Trajectory,
    TransmissionAttempt,
    coverage_radius,
    deliver_slot,
    position_at,
    rssi_at,
)

# Parameters used by the worked reception examples (reference-distance loss of
# 40 dB and exponent 2.4); the calibrated defaults differ slightly.
EXAMPLE_PARAMS = RadioParams(
    tx_power_dbm=3.0, ext_attenuation_db=20.0, pl0_db=40.0, exponent=2.4,
    sensitivity_dbm=-90.0,
)


class TestPositionAt:
    def test_constant_speed(self):
        traj = Trajectory(0.0, 100.0, 1.0, 0.0)
        assert position_at(traj, 10.0) == 10.0

    def test_clamps_at_end(self):
        traj = Trajectory(0.0, 52.0, 1.0, 0.0)
        assert position_at(traj, 60.0) == 52.0

    def test_max_shuttle_speed(self):
        traj = Trajectory(0.0, 100.0, 3.0, 0.0)
        assert position_at(traj, 10.0) == 30.0

    def test_holds_before_start(self):
        traj = Trajectory(5.0, 52.0, 1.0, 20.0)
        assert position_at(traj, 10.0) == 5.0

    def test_static_node(self):
        traj = Trajectory(7.5)
        assert position_at(traj, 123.0) == 7.5


class TestRssiAt:
    def test_reference_distance(self):
        assert rssi_at(EXAMPLE_PARAMS, 1.0) == pytest.approx(-57.0)

    def test_ten_metres(self):
        # -57 - 24 * log10(10)
        assert rssi_at(EXAMPLE_PARAMS, 10.0) == pytest.approx(-81.0)

    def test_edge_of_coverage(self):
        val = rssi_at(EXAMPLE_PARAMS, 25.0)
        assert val == pytest.approx(-90.6, abs=0.05)
        assert val < EXAMPLE_PARAMS.sensitivity_dbm

    def test_sub_reference_clamps(self):
        assert rssi_at(EXAMPLE_PARAMS, 0.2) == rssi_at(EXAMPLE_PARAMS, 1.0)

    def test_zero_distance_rejected(self):
        with pytest.raises(ValueError):
            rssi_at(EXAMPLE_PARAMS, 0.0)

    def test_monotone_decreasing(self):
        last = rssi_at(EXAMPLE_PARAMS, 1.0)
        for d in (2, 5, 10, 20, 50, 100):
            cur = rssi_at(EXAMPLE_PARAMS, d)
            assert cur < last
            last = cur


class TestCoverageRadius:
    def test_default_calibration_lands_near_25m(self):
        radius = coverage_radius(RadioParams())
        assert 24.0 <= radius <= 26.0

    def test_root_solve_matches_closed_form(self):
        params = RadioParams()
        closed = 10 ** (
            (params.tx_power_dbm - params.ext_attenuation_db - params.pl0_db
             - params.sensitivity_dbm) / (10 * params.exponent)
        )
        assert coverage_radius(params) == pytest.approx(closed, rel=1e-9)

    def test_overlap_zone_width(self):
        # Two gateways 35 m apart with ~25 m radius leave a 2r - 35 m strip
        # where both are audible.
        params = RadioParams()
        bbrs = (8.5, 43.5)
        both = [
            pos / 100.0
            for pos in range(0, 5201)
            if all(
                rssi_at(params, max(abs(pos / 100.0 - b), 1e-3)) >= params.sensitivity_dbm
                for b in bbrs
            )
        ]
        span = max(both) - min(both)
        assert 14.0 <= span <= 16.0


def att(sender, receiver, channel, asn, rssi_map):
    return TransmissionAttempt(sender, object(), channel, asn, rssi_map)


class TestDeliverSlot:
    def test_broadcast_duplicated_to_both_gateways(self):
        a = att("n0", None, 15, 42, {"bbr0": -70.0, "bbr1": -80.0})
        out = deliver_slot([a], [("bbr0", 15), ("bbr1", 15)], -90.0)
        assert out["bbr0"].outcome is Outcome.DELIVERED
        assert out["bbr1"].outcome is Outcome.DELIVERED
        assert out["bbr0"].rssi == -70.0

    def test_two_senders_collide(self):
        a = att("n0", None, 15, 42, {"bbr0": -70.0})
        b = att("n1", None, 15, 42, {"bbr0": -72.0})
        out = deliver_slot([a, b], [("bbr0", 15)], -90.0)
        assert out["bbr0"].outcome is Outcome.COLLISION

    def test_threshold_applies_per_receiver(self):
        a = att("n0", None, 15, 42, {"near": -70.0, "far": -95.0})
        out = deliver_slot([a], [("near", 15), ("far", 15)], -90.0)
        assert out["near"].outcome is Outcome.DELIVERED
        assert out["far"].outcome is Outcome.NOTHING

    def test_wrong_channel_hears_nothing(self):
        a = att("n0", None, 15, 42, {"bbr0": -70.0})
        out = deliver_slot([a], [("bbr0", 16)], -90.0)
        assert out["bbr0"].outcome is Outcome.NOTHING

    def test_below_threshold_does_not_collide(self):
        # A sub-sensitivity second attempt must not destroy the strong one.
        a = att("n0", None, 15, 42, {"bbr0": -70.0})
        b = att("n1", None, 15, 42, {"bbr0": -95.0})
        out = deliver_slot([a, b], [("bbr0", 15)], -90.0)
        assert out["bbr0"].outcome is Outcome.DELIVERED

    def test_spatial_reuse_different_channels(self):
        # Two gateways transmitting at once on different channel offsets both
        # get through to their own nodes.
        a = att("bbr0", None, 15, 42, {"n0": -60.0, "n1": -60.0})
        b = att("bbr1", None, 20, 42, {"n0": -60.0, "n1": -60.0})
        out = deliver_slot([a, b], [("n0", 15), ("n1", 20)], -90.0)
        assert out["n0"].outcome is Outcome.DELIVERED
        assert out["n0"].attempt.sender == "bbr0"
        assert out["n1"].outcome is Outcome.DELIVERED
        assert out["n1"].attempt.sender == "bbr1"

    def test_mixed_asn_rejected(self):
        a = att("n0", None, 15, 42, {"bbr0": -70.0})
        b = att("n1", None, 15, 43, {"bbr0": -70.0})
        with pytest.raises(ValueError):
            deliver_slot([a, b], [("bbr0", 15)], -90.0)
