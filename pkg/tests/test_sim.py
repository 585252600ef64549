"""End-to-end simulator runs: determinism, verdicts, and the exact match
between simulated tallies and the closed-form cost model."""

from __future__ import annotations

import dataclasses
import json
from fractions import Fraction

import pytest

from hybft.config import SimConfig
from hybft.sim import TALLY_FIELDS, measure_overhead, run


def exact_cell(f: int, batch: int, **kw) -> SimConfig:
    """Constant delay, one round in flight, no early timers, no checkpoints
    inside the run: the regime where tallies equal the closed form."""
    kw.setdefault("duration_ns", 4_000_000_000)
    return SimConfig(
        f=f, batch_size=batch, clients=batch, requests_per_client=2,
        delay_min_ns=1_000_000, delay_max_ns=1_000_000, delta_ns=0,
        pipelining=False, checkpoint_interval=5_000, window=10_000,
        record_trace=False, **kw).validate()


# ------------------------------------------------------------- fault-free


def test_fault_free_run_reaches_unanimous_execution():
    v = run(SimConfig(f=1, clients=2, requests_per_client=2)).verdict
    assert v["safety_ok"] is True
    assert v["violations"] == []
    assert v["all_clients_done"] is True
    assert v["completed_requests"] == 4
    assert v["max_view"] == 0
    assert v["flagged"] == []


def test_larger_group_fault_free():
    v = run(SimConfig(f=3, clients=2, requests_per_client=2, seed=9)).verdict
    assert v["safety_ok"] and v["all_clients_done"]
    assert v["max_view"] == 0


# ------------------------------------------------------------- determinism


def test_identical_config_reruns_byte_identical():
    cfg = SimConfig(f=2, clients=2, requests_per_client=2, seed=11)
    a = run(cfg)
    b = run(cfg)
    ta = "\n".join(json.dumps(r, sort_keys=True) for r in a.trace)
    tb = "\n".join(json.dumps(r, sort_keys=True) for r in b.trace)
    assert ta == tb
    assert a.summary_dict() == b.summary_dict()


def test_seed_changes_the_schedule():
    base = SimConfig(f=1, clients=2, requests_per_client=2)
    a = run(dataclasses.replace(base, seed=1))
    b = run(dataclasses.replace(base, seed=2))
    assert [r["t"] for r in a.trace] != [r["t"] for r in b.trace]


def test_adversarial_run_is_equally_deterministic():
    cfg = SimConfig(f=1, clients=2, requests_per_client=3, seed=5,
                    adversary="equivocate_withhold")
    a, b = run(cfg), run(cfg)
    assert a.trace == b.trace


def test_takeover_stays_single_when_votes_beat_the_leaders_timer():
    # at this seed the defection quorum reaches the incoming leader before
    # its own suspicion fires; the joining vote must not double the takeover
    cfg = SimConfig(f=2, seed=127, clients=1, requests_per_client=2,
                    adversary="gap_forever", record_trace=True)
    r = run(cfg)
    assert r.verdict["safety_ok"] and r.verdict["all_clients_done"]
    assert r.verdict["max_view"] == 1
    assert sum(1 for e in r.trace if e.get("ev") == "newview") == 1


# --------------------------------------------------------- model vs tallies


@pytest.mark.parametrize("f", [1, 2, 3])
@pytest.mark.parametrize("batch", [1, 10])
def test_simulated_counts_equal_closed_form(f, batch):
    res = measure_overhead(exact_cell(f, batch))
    assert res["msgs_match"], res
    assert res["bytes_match"], res


def test_smallest_cell_counts_frozen():
    res = measure_overhead(exact_cell(1, 1))
    # two consensus rounds of the n=3 count table
    assert res["sim_msgs_on"] == 32
    assert res["sim_msgs_off"] == 28
    assert res["sim_msg_overhead"] == Fraction(1, 7)
    assert res["sim_byte_overhead"] == Fraction(23, 110)


def test_decision_traffic_absent_when_disabled():
    r = run(exact_cell(2, 1, decisions=False))
    assert r.msgs_by_type.get("decision", 0) == 0
    assert r.verdict["decisions_sent"] == 0


# ---------------------------------------------------------- delta deferral


def test_patient_timer_suppresses_every_decision():
    # evidence of peer progress arrives before a patient timer fires
    cfg = SimConfig(f=1, clients=2, requests_per_client=3,
                    delay_min_ns=1_000_000, delay_max_ns=1_000_000,
                    delta_ns=4_000_000, checkpoint_interval=1,
                    record_trace=False)
    r = run(cfg)
    assert r.verdict["all_clients_done"]
    assert r.msgs_by_type.get("decision", 0) == 0
    assert r.verdict["decisions_sent"] == 0
    assert r.verdict["decisions_suppressed"] > 0


def test_eager_timer_ships_decisions():
    cfg = SimConfig(f=1, clients=2, requests_per_client=3,
                    delay_min_ns=1_000_000, delay_max_ns=5_000_000,
                    delta_ns=0, record_trace=False)
    r = run(cfg)
    assert r.verdict["all_clients_done"]
    assert r.msgs_by_type.get("decision", 0) > 0


# ------------------------------------------------------------ mode costs


def test_signature_mode_spares_verifier_accesses():
    base = dict(f=1, clients=1, requests_per_client=2, record_trace=False)
    hm = run(SimConfig(tc_mode="hmac", **base))
    sg = run(SimConfig(tc_mode="sig", **base))
    assert hm.verdict["all_clients_done"] and sg.verdict["all_clients_done"]
    for rid in range(3):
        assert sg.tc_accesses[rid] < hm.tc_accesses[rid]


# -------------------------------------------------------------- scenarios


def test_silent_repliers_dichotomy_smallest():
    on = run(SimConfig(f=1, clients=2, requests_per_client=2, seed=3,
                       adversary="silent_repliers", decisions=True,
                       record_trace=False)).verdict
    off = run(SimConfig(f=1, clients=2, requests_per_client=2, seed=3,
                        adversary="silent_repliers", decisions=False,
                        record_trace=False)).verdict
    assert on["safety_ok"] and on["all_clients_done"]
    assert off["safety_ok"] and not off["all_clients_done"]


def test_crash_beyond_f_stalls_and_restore_recovers():
    base = SimConfig(f=1, clients=2, requests_per_client=2, seed=7,
                     record_trace=False)
    stall = run(dataclasses.replace(base, adversary="crash_tcs",
                adversary_params={"k": 2, "crash_at_ns": 8_000_000})).verdict
    assert stall["safety_ok"] and not stall["all_clients_done"]
    resumed = run(dataclasses.replace(base, adversary="crash_tcs",
                  adversary_params={"k": 2, "crash_at_ns": 8_000_000,
                                    "restore_at_ns": 700_000_000})).verdict
    assert resumed["safety_ok"] and resumed["all_clients_done"]


def test_restarted_component_cannot_rejoin_the_timeline():
    cfg = SimConfig(f=1, clients=2, requests_per_client=3, seed=7,
                    adversary="crash_tcs",
                    adversary_params={"k": 1, "crash_at_ns": 8_000_000,
                                      "restart_at_ns": 11_000_000},
                    record_trace=False)
    v = run(cfg).verdict
    assert v["safety_ok"] and v["all_clients_done"]
    assert v["stale_epoch_drops"] > 0


# ---------------------------------------------------------------- outputs


def test_write_outputs_round_trips(tmp_path):
    r = run(SimConfig(f=1, clients=1, requests_per_client=1, seed=2))
    r.write_outputs(str(tmp_path))
    lines = (tmp_path / "trace.jsonl").read_text().splitlines()
    assert lines and all(json.loads(ln) for ln in lines)
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["verdict"]["safety_ok"] is True
    header = (tmp_path / "tallies.csv").read_text().splitlines()[0]
    assert header.split(",") == TALLY_FIELDS
