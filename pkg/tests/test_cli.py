"""End-to-end tests for the command-line runner."""

import math

import pytest

from sstsim.cli import main
from sstsim.metrics import TransferLog

BUNDLE_FILES = (
    "transfers.csv",
    "durations.csv",
    "nonfriend.csv",
    "files_per_user.csv",
    "correlations.csv",
    "profiles.csv",
    "manifest.txt",
)

TINY = """
node_count = 60
catalog_size = 12
categories = 6
item_size_bytes = 2097152
piece_size_bytes = 1048576
seeders = 3
sim_duration_s = 3600
wait_mean_s = 600
bucket_s = 900
seed = 21
"""


@pytest.fixture
def tiny_cfg(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY)
    return path


def test_run_writes_a_complete_bundle(tiny_cfg, tmp_path):
    out = tmp_path / "out"
    assert main(["run", "--config", str(tiny_cfg), "--out", str(out)]) == 0
    for name in BUNDLE_FILES:
        assert (out / name).exists(), name
    log = TransferLog.read_csv(out / "transfers.csv")
    assert len(log) > 0


def test_run_with_reps_writes_one_bundle_per_replication(tiny_cfg, tmp_path):
    out = tmp_path / "out"
    code = main(
        ["run", "--config", str(tiny_cfg), "--preset", "b", "--reps", "2",
         "--out", str(out)]
    )
    assert code == 0
    for rep in ("rep000", "rep001"):
        for name in BUNDLE_FILES:
            assert (out / rep / name).exists(), f"{rep}/{name}"
    # Different seeds: the replications must not be identical.
    a = (out / "rep000" / "transfers.csv").read_bytes()
    b = (out / "rep001" / "transfers.csv").read_bytes()
    assert a != b


def test_manifest_replay_reproduces_csvs_byte_for_byte(tiny_cfg, tmp_path):
    first = tmp_path / "first"
    again = tmp_path / "again"
    assert main(
        ["run", "--config", str(tiny_cfg), "--preset", "c", "--out", str(first)]
    ) == 0
    assert main(
        ["run", "--config", str(first / "manifest.txt"), "--out", str(again)]
    ) == 0
    for name in BUNDLE_FILES:
        if name == "manifest.txt":
            continue
        assert (first / name).read_bytes() == (again / name).read_bytes(), name


def test_zero_duration_run_still_writes_a_valid_bundle(tmp_path):
    cfg = tmp_path / "zero.cfg"
    cfg.write_text("node_count = 30\ncatalog_size = 6\ncategories = 3\n"
                   "seeders = 2\nsim_duration_s = 0\n")
    out = tmp_path / "out"
    assert main(["run", "--config", str(cfg), "--out", str(out)]) == 0
    log = TransferLog.read_csv(out / "transfers.csv")
    assert len(log) == 0
    durations = (out / "durations.csv").read_text().splitlines()
    assert durations[0] == "bucket_end_s,mean_duration_s,completed_count"


def test_missing_config_file_is_a_config_error(tmp_path):
    code = main(["run", "--config", str(tmp_path / "absent.cfg"),
                 "--out", str(tmp_path / "out")])
    assert code == 1


def test_invalid_config_value_is_a_config_error(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("node_count = -4\n")
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "out")]) == 1


def test_unwritable_output_is_a_runtime_failure(tiny_cfg, tmp_path):
    blocker = tmp_path / "blocker"
    blocker.write_text("")
    out = blocker / "out"  # parent is a file, mkdir must fail
    assert main(["run", "--config", str(tiny_cfg), "--out", str(out)]) == 2


def test_sat_ratio_sweep_needs_no_simulation_and_hits_endpoints(tmp_path):
    out = tmp_path / "sweep"
    code = main(
        ["sweep", "--dimension", "sat_ratio", "--values", "0,0.5,1",
         "--reps", "2", "--out", str(out)]
    )
    assert code == 0
    lines = (out / "pnsn.csv").read_text().splitlines()
    assert lines[0] == "model,ratio_or_nodes,p_nsn"
    rows = [line.split(",") for line in lines[1:]]
    assert [r[0] for r in rows] == ["ba"] * 3 + ["to"] * 3
    by_key = {(r[0], r[1]): float(r[2]) for r in rows}
    assert by_key[("ba", "0")] == 1.0
    assert by_key[("ba", "1")] == 0.0
    assert by_key[("to", "0")] == 1.0
    assert by_key[("to", "1")] == 0.0


def test_node_count_sweep_writes_one_row_per_model_and_size(tmp_path):
    out = tmp_path / "sweep"
    code = main(
        ["sweep", "--dimension", "node_count", "--values", "200,400",
         "--out", str(out)]
    )
    assert code == 0
    lines = (out / "pnsn.csv").read_text().splitlines()
    assert len(lines) == 1 + 4


def test_mi_model_sweep_aggregates_correlations(tiny_cfg, tmp_path):
    out = tmp_path / "sweep"
    code = main(
        ["sweep", "--dimension", "mi_model", "--values", "mi1,off",
         "--config", str(tiny_cfg), "--preset", "i", "--out", str(out)]
    )
    assert code == 0
    lines = (out / "correlations.csv").read_text().splitlines()
    assert lines[0] == "mi_model,corr_sat_flag,corr_sat_friend_count"
    assert [line.split(",")[0] for line in lines[1:]] == ["mi1", "off"]
    assert (out / "mi1" / "rep000" / "transfers.csv").exists()


def test_preset_sweep_pools_durations_across_reps(tiny_cfg, tmp_path):
    out = tmp_path / "sweep"
    code = main(
        ["sweep", "--dimension", "preset", "--values", "a,b", "--reps", "2",
         "--config", str(tiny_cfg), "--out", str(out)]
    )
    assert code == 0
    for preset_id in ("a", "b"):
        agg = (out / f"durations_{preset_id}.csv").read_text().splitlines()
        assert agg[0] == "bucket_end_s,mean_duration_s,completed_count"
        pooled = sum(int(line.split(",")[2]) for line in agg[1:])
        per_rep = 0
        for rep in ("rep000", "rep001"):
            rep_lines = (
                out / preset_id / rep / "durations.csv"
            ).read_text().splitlines()
            per_rep += sum(int(line.split(",")[2]) for line in rep_lines[1:])
        assert pooled == per_rep


def test_sweep_records_per_run_failures_and_continues(tiny_cfg, tmp_path):
    out = tmp_path / "sweep"
    code = main(
        ["sweep", "--dimension", "mi_model", "--values", "mi1,bogus",
         "--config", str(tiny_cfg), "--out", str(out)]
    )
    assert code == 2
    failures = (out / "failures.txt").read_text()
    assert "bogus" in failures
    # The healthy value still produced its bundle and aggregate row.
    assert (out / "mi1" / "rep000" / "transfers.csv").exists()
    lines = (out / "correlations.csv").read_text().splitlines()
    assert lines[1].startswith("mi1,")
    assert lines[2].split(",")[1] == "nan"


def test_bad_sweep_values_are_a_config_error(tmp_path):
    code = main(
        ["sweep", "--dimension", "sat_ratio", "--values", "0.1,potato",
         "--out", str(tmp_path / "out")]
    )
    assert code == 1


def test_graph_props_writes_table_rows(tmp_path):
    out = tmp_path / "props.csv"
    code = main(
        ["graph-props", "--model", "ba", "--nodes", "250", "--seed", "4",
         "--reps", "2", "--out", str(out)]
    )
    assert code == 0
    lines = out.read_text().splitlines()
    assert lines[0].startswith("model,nodes,edges")
    assert len(lines) == 3
    for line in lines[1:]:
        parts = line.split(",")
        assert parts[0] == "ba"
        assert parts[1] == "250"
        assert int(parts[2]) > 0
        assert not math.isnan(float(parts[3]))


def test_graph_props_defaults_to_stdout(capsys):
    assert main(["graph-props", "--model", "to", "--nodes", "120"]) == 0
    captured = capsys.readouterr()
    assert captured.out.startswith("model,nodes,edges")
