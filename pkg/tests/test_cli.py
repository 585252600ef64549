"""Command-line entry points: exit codes, output files, narrative output."""

from __future__ import annotations

import json

import pytest

from hybft.cli import main
from hybft.sim import TALLY_FIELDS

FAST = ["--set", "clients=1", "--set", "requests_per_client=1",
        "--set", "record_trace=false"]


def test_run_fault_free_exits_zero(capsys):
    rc = main(["run", "--set", "f=1"] + FAST)
    assert rc == 0
    out = capsys.readouterr().out
    assert "safety: ok" in out and "clients_done=True" in out


def test_run_json_summary_parses(capsys):
    rc = main(["run", "--set", "f=1", "--json"] + FAST)
    assert rc == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["verdict"]["safety_ok"] is True
    assert summary["msgs_total"] > 0


def test_run_writes_output_files(tmp_path, capsys):
    out = tmp_path / "res"
    rc = main(["run", "--set", "f=1", "--set", "clients=1",
               "--set", "requests_per_client=1", "--out", str(out)])
    assert rc == 0
    assert (out / "trace.jsonl").exists()
    assert (out / "summary.json").exists()
    header = (out / "tallies.csv").read_text().splitlines()[0]
    assert header.split(",") == TALLY_FIELDS


def test_run_stalled_workload_exits_nonzero(capsys):
    rc = main(["run", "--set", "adversary=silent_repliers",
               "--set", "decisions=false", "--set", "clients=2",
               "--set", "record_trace=false"])
    assert rc == 1


def test_config_file_and_override_precedence(tmp_path, capsys):
    cfgfile = tmp_path / "c.json"
    cfgfile.write_text(json.dumps({"f": 2, "clients": 1,
                                   "requests_per_client": 1,
                                   "record_trace": False}))
    rc = main(["run", "--config", str(cfgfile), "--set", "f=1", "--json"])
    assert rc == 0
    assert json.loads(capsys.readouterr().out)["f"] == 1


def test_bad_override_exits_two(capsys):
    assert main(["run", "--set", "nonsense"]) == 2
    assert main(["run", "--set", "f=-3"]) == 2
    assert main(["run", "--config", "/does/not/exist.json"]) == 2


def test_overhead_small_cell_exact(capsys):
    rc = main(["overhead", "-f", "1", "--batch", "1"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "exact=True" in out
    assert "14.2857%" in out  # 2/14 extra messages at n=3, B=1


def test_table1_prints_all_rows_and_ratios(capsys):
    rc = main(["table1", "-f", "1"])
    assert rc == 0
    out = capsys.readouterr().out
    for name in ("PBFT", "FlexiBFT", "MinBFT", "Zyzzyva", "FlexiZZ", "MinZZ"):
        assert name in out
    assert "+33.3333%" in out
    assert "ratio PBFT/MinBFT: 2" in out


def test_sweep_writes_model_rows(tmp_path, capsys):
    path = tmp_path / "sweep.csv"
    rc = main(["sweep", "--f-list", "1,2", "--batch-list", "1",
               "--simulate", "--out", str(path)])
    assert rc == 0
    lines = path.read_text().splitlines()
    assert lines[0].split(",") == TALLY_FIELDS
    assert len(lines) == 3
    assert capsys.readouterr().out.count("sim=exact") == 2


def test_attack_counter_identity_dichotomy(capsys):
    base = ["attack", "counter_identity", "--set", "record_trace=true",
            "--set", "requests_per_client=1"]
    rc = main(base + ["--set", "counter_policy=announced",
                      "--expect-violation"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "VIOLATED" in out and "conflicting_commit" in out
    # pinned admission (the default) starves the same script
    rc = main(base)
    assert rc == 0
    assert "safety: ok" in capsys.readouterr().out


def test_attack_expect_violation_fails_on_safe_run(capsys):
    rc = main(["attack", "equivocate_withhold", "--expect-violation",
               "--set", "record_trace=true"])
    assert rc == 1
    assert "safety: ok" in capsys.readouterr().out
