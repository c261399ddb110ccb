import os

import pytest

from tschsim.cli import main
from tschsim.engine import MetricsLog
from tschsim.harness import (
    EXPERIMENTS,
    emit_csv,
    load_packets,
    packets_csv_text,
    run_experiment,
    summary_csv_text,
)
from tschsim.radio import Trajectory
from tschsim.scenario import ScenarioError, parse_scenario, scenario_text

MINIMAL = """
[bbrs]
positions_m = 10

[nodes]
count = 1
start_pos_m = 0
"""

FIELD_TRIAL = """
[general]
seed = 7
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


class TestParseScenario:
    def test_minimal_file_fills_defaults(self):
        scn = parse_scenario(MINIMAL)
        assert scn.seed == 1
        assert scn.slotframe.length == 97
        assert scn.slotframe.slot_duration == 0.010
        assert scn.radio.tx_power_dbm == 3.0
        assert scn.bbr_positions == (10.0,)
        assert scn.trajectories == (Trajectory(0.0, 0.0, 0.0, 0.0),)
        assert scn.traffic is None

    def test_field_trial_layout(self):
        scn = parse_scenario(FIELD_TRIAL)
        assert scn.bbr_positions == (8.5, 43.5)
        traj = scn.trajectories[0]
        assert (traj.start_pos, traj.end_pos, traj.speed) == (0.0, 52.0, 1.0)
        assert scn.radio.ext_attenuation_db == 20.0
        assert scn.traffic.payload_bytes == 80
        assert scn.traffic.period == 1.0

    def test_payload_out_of_range(self):
        with pytest.raises(ScenarioError, match=r"\[8, 128\]"):
            parse_scenario(FIELD_TRIAL, {"traffic.payload_bytes": "200"})

    def test_fast_period_needs_flag(self):
        with pytest.raises(ScenarioError, match="1 Hz"):
            parse_scenario(FIELD_TRIAL, {"traffic.period_s": "0.3"})
        scn = parse_scenario(
            FIELD_TRIAL,
            {"traffic.period_s": "0.3", "traffic.allow_fast": "true"},
        )
        assert scn.traffic.period == 0.3

    def test_unknown_key_names_line(self):
        bad = MINIMAL + "\n[general]\nwarp_speed = 9\n"
        lineno = bad.splitlines().index("warp_speed = 9") + 1
        with pytest.raises(ScenarioError, match=f"line {lineno}"):
            parse_scenario(bad)

    def test_bad_value_names_line(self):
        bad = MINIMAL.replace("positions_m = 10", "positions_m = ten")
        with pytest.raises(ScenarioError, match="line 3"):
            parse_scenario(bad)

    def test_missing_required_section(self):
        with pytest.raises(ScenarioError, match=r"missing required section \[nodes\]"):
            parse_scenario("[bbrs]\npositions_m = 10\n")

    def test_bad_override_rejected(self):
        with pytest.raises(ScenarioError, match="override"):
            parse_scenario(MINIMAL, {"nonsense": "1"})
        with pytest.raises(ScenarioError, match="override"):
            parse_scenario(MINIMAL, {"general.warp": "1"})

    def test_echo_round_trips(self):
        scn = parse_scenario(FIELD_TRIAL)
        assert parse_scenario(scenario_text(scn)) == scn

    def test_hopping_range_and_list(self):
        scn = parse_scenario(MINIMAL + "\n[slotframe]\nhopping = 11-14\n")
        assert scn.slotframe.hopping_sequence == (11, 12, 13, 14)
        scn = parse_scenario(MINIMAL + "\n[slotframe]\nhopping = 11, 13, 15\n")
        assert scn.slotframe.hopping_sequence == (11, 13, 15)


class TestCsvEmission:
    def test_empty_log_header_only(self, tmp_path):
        paths = emit_csv(MetricsLog(), str(tmp_path))
        assert open(paths["packets"]).read() == (
            "seq,direction,sent_at_s,recv_at_s,rtt_s,lost,bbr_set,dup_count\n"
        )
        assert open(paths["summary"]).read() == "metric,value\n"

    def test_duplicate_delivered_once(self):
        log = MetricsLog()
        record = log.open_packet(1, "down", 10.0, "n0")
        log.link_frame(123, 1)
        log.complete(1, 10.5)
        log.note_report(123, "bbr0")
        log.note_report(123, "bbr1")
        log.finalize(20.0)
        assert record.dup_count == 2
        text = packets_csv_text(log)
        assert text.splitlines()[1] == "1,down,10.0,10.5,0.5,0,bbr0|bbr1,2"

    def test_lost_packet_row(self):
        log = MetricsLog()
        log.open_packet(1, "down", 10.0, "n0")
        log.finalize(20.0)
        row = packets_csv_text(log).splitlines()[1]
        assert row == "1,down,10.0,,,1,,0"

    def test_round_trip(self, tmp_path):
        log = MetricsLog()
        log.open_packet(1, "down", 10.125, "n0")
        log.link_frame(9, 1)
        log.complete(1, 10.62500001)
        log.note_report(9, "bbr1")
        log.open_packet(2, "down", 11.0, "n0")
        log.finalize(30.0)
        paths = emit_csv(log, str(tmp_path))
        loaded = load_packets(paths["packets"])
        for rec, got in zip(log.records, loaded):
            assert got.seq == rec.seq
            assert got.direction == rec.direction
            assert got.sent_at == rec.sent_at
            assert got.recv_at == rec.recv_at
            assert got.rtt == rec.rtt
            assert got.lost == rec.lost
            assert got.bbr_set == rec.bbr_set
            assert got.dup_count == rec.dup_count

    def test_summary_metrics_present(self):
        log = MetricsLog()
        log.open_packet(1, "down", 10.0, "n0")
        log.link_frame(9, 1)
        log.complete(1, 10.5)
        log.finalize(20.0)
        lines = summary_csv_text(log).splitlines()
        metrics = [line.split(",")[0] for line in lines[1:]]
        assert metrics == ["loss_rate", "mean_rtt_s", "p99_rtt_s", "max_outage_s", "dup_ratio"]


class TestRunExperiment:
    def test_unknown_name(self):
        with pytest.raises(ScenarioError, match="unknown experiment"):
            run_experiment("no-such-thing")

    def test_scenario_file_runs_without_checks(self, tmp_path):
        path = tmp_path / "mini.ini"
        path.write_text(MINIMAL)
        code, paths, failures = run_experiment(str(path), out_dir=str(tmp_path / "out"))
        assert code == 0 and failures == []
        assert os.path.exists(paths["packets"])
        assert os.path.exists(paths["summary"])
        assert os.path.exists(paths["scenario"])
        parse_scenario(open(paths["scenario"]).read())

    def test_override_reaches_scenario(self, tmp_path):
        path = tmp_path / "mini.ini"
        path.write_text(MINIMAL)
        _, paths, _ = run_experiment(
            str(path),
            seed=42,
            out_dir=str(tmp_path / "out"),
            overrides={"general.horizon_s": "15"},
        )
        scn = parse_scenario(open(paths["scenario"]).read())
        assert scn.seed == 42
        assert scn.horizon == 15.0


class TestCliMain:
    def test_list(self, capsys):
        assert main(["list"]) == 0
        out = capsys.readouterr().out.splitlines()
        assert set(out) == set(EXPERIMENTS)

    def test_run_scenario_file(self, tmp_path, capsys):
        path = tmp_path / "mini.ini"
        path.write_text(MINIMAL)
        assert main(["run", str(path), "--out", str(tmp_path / "o")]) == 0

    def test_config_error_exit_code(self, tmp_path):
        path = tmp_path / "bad.ini"
        path.write_text(MINIMAL + "\n[general]\nwarp = 1\n")
        assert main(["run", str(path), "--out", str(tmp_path / "o")]) == 2

    def test_unknown_experiment_exit_code(self, tmp_path):
        assert main(["run", "nope", "--out", str(tmp_path / "o")]) == 2

    def test_malformed_override_exit_code(self, tmp_path):
        path = tmp_path / "mini.ini"
        path.write_text(MINIMAL)
        assert main(["run", str(path), "--override", "junk"]) == 2

    def test_named_experiment_passes(self, tmp_path, capsys):
        code = main(["run", "handover-sync", "--out", str(tmp_path / "o")])
        out = capsys.readouterr().out
        assert code == 0
        assert "all checks passed" in out
