"""Closed-loop client behavior: quorum policies, retransmits, completion."""

from __future__ import annotations

import hashlib

from hybft import messages as m
from hybft.clients import Client

KEY = hashlib.sha256(b"ck").digest()


def make_client(**kw):
    kw.setdefault("policy", "f+1")
    kw.setdefault("total_requests", 2)
    return Client(0, KEY, n=3, f=1, **kw)


def replies_from(req: m.Request, replicas, result=b"r", seq=1):
    return [m.Reply(req.client_id, req.client_seq, seq, rid, result)
            for rid in replicas]


def test_start_broadcasts_to_all_and_arms_retransmit():
    c = make_client()
    effects = c.start(0)
    sends = [e for e in effects if e[0] == "send"]
    assert [dst for _, dst, _ in sends] == [("replica", i) for i in range(3)]
    assert effects[-1][0] == "timer"
    assert not c.done()


def test_requests_carry_verifiable_auth():
    c = make_client()
    c.start(0)
    req = c.inflight
    import hmac as hmaclib
    want = hmaclib.new(KEY, req.digest(), "sha256").digest()
    assert req.auth == want


def test_weak_quorum_of_matching_results_completes():
    c = make_client(total_requests=1)
    c.start(0)
    req = c.inflight
    r1, r2 = replies_from(req, [0, 1])
    assert c.on_reply(r1, 10) == []
    assert c.inflight is not None
    c.on_reply(r2, 20)
    assert c.done()
    assert c.records[0].completed_ns == 20


def test_mismatched_results_do_not_complete():
    c = make_client(total_requests=1)
    c.start(0)
    req = c.inflight
    c.on_reply(replies_from(req, [0], result=b"a")[0], 10)
    c.on_reply(replies_from(req, [1], result=b"b")[0], 20)
    assert not c.done()
    c.on_reply(replies_from(req, [2], result=b"a")[0], 30)
    assert c.done()


def test_one_replica_cannot_complete_alone():
    c = make_client(total_requests=1)
    c.start(0)
    req = c.inflight
    c.on_reply(replies_from(req, [2])[0], 10)
    # the same replica repeating itself is still one voice
    c.on_reply(replies_from(req, [2])[0], 20)
    assert not c.done()


def test_strict_policy_needs_matching_seq_too():
    c = make_client(policy="n-f", total_requests=1)
    c.start(0)
    req = c.inflight
    c.on_reply(replies_from(req, [0], seq=1)[0], 10)
    c.on_reply(replies_from(req, [1], seq=2)[0], 20)
    assert not c.done()  # same result, disagreeing seq assignment
    c.on_reply(replies_from(req, [2], seq=1)[0], 30)
    assert c.done()


def test_next_request_submits_after_completion():
    c = make_client(total_requests=2)
    c.start(0)
    first = c.inflight
    for rep in replies_from(first, [0, 1]):
        effects = c.on_reply(rep, 5)
    sends = [e for e in effects if e[0] == "send"]
    assert len(sends) == 3
    assert c.inflight.client_seq == 2
    assert not c.done()


def test_stale_replies_ignored():
    c = make_client(total_requests=2)
    c.start(0)
    first = c.inflight
    for rep in replies_from(first, [0, 1]):
        c.on_reply(rep, 5)
    # replies for the finished request must not advance the new one
    assert c.on_reply(replies_from(first, [2])[0], 9) == []
    assert c.inflight.client_seq == 2


def test_retransmit_rebroadcasts_only_while_pending():
    c = make_client(total_requests=1)
    c.start(0)
    req = c.inflight
    effects = c.on_timer("retransmit", (0, req.client_seq), 400)
    assert len([e for e in effects if e[0] == "send"]) == 3
    assert c.retransmits == 1
    for rep in replies_from(req, [0, 1]):
        c.on_reply(rep, 500)
    assert c.on_timer("retransmit", (0, req.client_seq), 700) == []
    assert c.retransmits == 1


def test_payloads_differ_per_request_and_completion_is_counted():
    c = make_client(total_requests=2, payload_size=16)
    c.start(0)
    p1 = c.inflight.payload
    for rep in replies_from(c.inflight, [0, 1]):
        c.on_reply(rep, 5)
    p2 = c.inflight.payload
    assert p1 != p2 and len(p1) == len(p2) == 16
    for rep in replies_from(c.inflight, [1, 2]):
        c.on_reply(rep, 9)
    assert c.done() and c.completed_count() == 2
