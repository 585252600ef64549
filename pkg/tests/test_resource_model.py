"""Checks on the closed-form cost model.

The two headline message-overhead fractions and the four byte-overhead
points are frozen here; the simulator cross-check lives in test_sim.py and
test_acceptance.py, which demand exact agreement on counts.
"""

from __future__ import annotations

from fractions import Fraction

import pytest

from hybft.resource_model import (
    COST_TABLE,
    SizeModel,
    commit_size,
    decision_byte_overhead,
    decision_msg_overhead,
    decision_size,
    fault_free_byte_total,
    fault_free_message_counts,
    leader_bandwidth_ratio,
    overhead_row,
    prepare_size,
    reply_size,
    request_size,
    table1_costs,
    verification_ratio,
)


# ----------------------------------------------------------- six-row table


def _row(name):
    c = COST_TABLE[name]
    return (str(c.group_size), str(c.leader_msgs), str(c.signs),
            str(c.verifies), str(c.seq_tc_accesses))


def test_cost_table_rows_symbolically():
    assert _row("PBFT") == ("3f+1", "6f", "1", "2f", "0")
    assert _row("FlexiBFT") == ("3f+1", "3f", "1", "2f", "1")
    assert _row("MinBFT") == ("2f+1", "2f", "1", "f", "2")
    assert _row("Zyzzyva") == ("3f+1", "3f", "1", "1", "0")
    assert _row("FlexiZZ") == ("3f+1", "3f", "1", "1", "1")
    assert _row("MinZZ") == ("2f+1", "2f", "1", "1", "2")


def test_cost_table_instantiates_at_concrete_f():
    c = table1_costs("MinBFT", 5)
    assert c.group_size.at(5) == 11
    assert c.leader_msgs.at(5) == 10
    assert c.crypto_per_replica(5) == 1 + 5


def test_unknown_protocol_and_bad_f_raise():
    with pytest.raises(ValueError):
        table1_costs("Paxos", 1)
    with pytest.raises(ValueError):
        table1_costs("PBFT", 0)


def test_leader_bandwidth_ratio_limits():
    assert leader_bandwidth_ratio(1) == Fraction(1, 3)
    prev = Fraction(0)
    for f in range(1, 50):
        cur = leader_bandwidth_ratio(f)
        assert prev < cur < Fraction(1, 2)
        prev = cur
    assert abs(float(leader_bandwidth_ratio(10**6)) - 0.5) < 1e-6


def test_verification_ratio_between_quorum_families():
    assert verification_ratio("FlexiBFT", "MinBFT") == 2
    assert verification_ratio("PBFT", "MinBFT") == 2
    assert verification_ratio("PBFT", "PBFT") == 1


# ------------------------------------------------------------ message counts


def test_fault_free_counts_small_instance():
    # n=3: every count enumerable by hand
    c = fault_free_message_counts(f=1, batch=1)
    assert c["request"] == 3      # one op broadcast to all replicas
    assert c["prepare"] == 2      # leader to its two followers
    assert c["commit"] == 6       # each of 3 replicas tells the other 2
    assert c["decision"] == 2     # the 2 non-leaders inform each non-sender
    assert c["reply"] == 3
    assert c["total"] == 16


def test_decisions_toggle_only_removes_decisions():
    on = fault_free_message_counts(f=2, batch=10)
    off = fault_free_message_counts(f=2, batch=10, decisions=False)
    assert on["total"] - off["total"] == on["decision"]
    assert off["decision"] == 0


def test_counts_scale_linearly_in_rounds():
    one = fault_free_message_counts(f=3, batch=7, consensus_rounds=1)
    five = fault_free_message_counts(f=3, batch=7, consensus_rounds=5)
    assert {k: 5 * v for k, v in one.items()} == five


# -------------------------------------------------------- headline fractions


def test_message_overhead_headline_points_frozen():
    assert decision_msg_overhead(10, 500) == Fraction(19, 1072)
    assert decision_msg_overhead(30, 500) == Fraction(177, 3236)
    assert abs(float(decision_msg_overhead(10, 500)) - 0.02) < 0.005
    assert abs(float(decision_msg_overhead(30, 500)) - 0.05) < 0.007


def test_message_overhead_is_count_ratio():
    # the fraction must equal extra/base computed from the count table
    for f, batch in ((1, 1), (2, 10), (10, 500), (30, 500)):
        on = fault_free_message_counts(f, batch)
        off = fault_free_message_counts(f, batch, decisions=False)
        assert decision_msg_overhead(f, batch) == Fraction(
            on["decision"], off["total"])


def test_message_overhead_monotonicity():
    # grows with group size, shrinks with batching
    assert decision_msg_overhead(2, 10) > decision_msg_overhead(1, 10)
    assert decision_msg_overhead(30, 500) > decision_msg_overhead(10, 500)
    assert decision_msg_overhead(10, 500) < decision_msg_overhead(10, 100)


# ------------------------------------------------------------ byte overheads


def test_byte_overhead_four_calibrated_points():
    for f, tx, target in ((10, 256, 0.10), (30, 256, 0.89),
                          (10, 1024, 0.03), (30, 1024, 0.23)):
        got = float(decision_byte_overhead(f, 500, SizeModel(tx_bytes=tx)))
        assert abs(got - target) <= 0.10, (f, tx, got)


def test_byte_overhead_threshold_variant_is_smaller():
    sizes = SizeModel()
    for f in (1, 2, 10, 30):
        assert (decision_byte_overhead(f, 500, sizes, threshold=True)
                < decision_byte_overhead(f, 500, sizes))


def test_byte_total_is_sum_of_parts():
    sizes = SizeModel()
    f, batch = 2, 10
    c = fault_free_message_counts(f, batch)
    expect = (c["request"] * request_size(sizes)
              + c["prepare"] * prepare_size(sizes, batch)
              + c["commit"] * commit_size(sizes)
              + c["decision"] * decision_size(sizes, f)
              + c["reply"] * reply_size(sizes))
    assert fault_free_byte_total(f, batch, sizes) == expect


def test_overhead_row_schema():
    row = overhead_row(2, 10, SizeModel())
    assert row["f"] == 2 and row["n"] == 5 and row["B"] == 10
    assert row["decisions"] == "on"
    assert row["msgs_decision"] == 4 * 3  # (n-1)(n-2) for one consensus
    assert 0 < row["overhead_msgs"] < 1
    assert 0 < row["overhead_bytes"] < 1


def test_bad_arguments_raise():
    with pytest.raises(ValueError):
        decision_msg_overhead(0, 1)
    with pytest.raises(ValueError):
        decision_msg_overhead(1, 0)
