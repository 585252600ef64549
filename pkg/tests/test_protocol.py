"""Replica behavior driven by hand, one message at a time.

A tiny pump routes effects between replicas synchronously; timers are fired
explicitly so each test controls exactly which asynchrony happens. End-to-end
timing behavior lives in test_sim.py.
"""

from __future__ import annotations

import hashlib
import hmac as hmaclib

import pytest

from hybft import messages as m
from hybft.protocol import ProtocolConfig, Replica, proposal_counter
from hybft.tc import Directory, TcMode, TrustedComponent, VerifyStatus

SYSKEY = b"s" * 32
CLIENT_KEY = hashlib.sha256(b"client0").digest()


class Cluster:
    """n replicas, synchronous FIFO delivery, manual timers."""

    def __init__(self, n=3, f=1, **cfg_kw):
        strict = cfg_kw.pop("strict", True)
        cfg_kw.setdefault("checkpoint_interval", 1000)
        cfg_kw.setdefault("window", 2000)
        self.cfg = ProtocolConfig(n=n, f=f, **cfg_kw)
        self.directory = Directory(TcMode.HMAC)
        self.tcs = []
        for rid in range(n):
            tc = TrustedComponent(rid, mode=TcMode.HMAC, system_key=SYSKEY,
                                  strict=strict)
            self.directory.register(rid, tc.epoch)
            self.tcs.append(tc)
        self.replicas = [Replica(rid, self.cfg, self.tcs[rid],
                                 self.directory, {0: CLIENT_KEY})
                         for rid in range(n)]
        self.client_box = []
        self.timers = []   # (replica_id, kind, key)
        self.notes = []
        self.queue = []    # (dst_rid, msg)
        self.now = 0

    def _absorb(self, rid, effects):
        for eff in effects:
            if eff[0] == "send":
                _, (kind, ident), msg = eff
                if kind == "replica":
                    self.queue.append((ident, msg))
                else:
                    self.client_box.append((ident, msg))
            elif eff[0] == "timer":
                self.timers.append((rid, eff[1], eff[2]))
            elif eff[0] == "note":
                self.notes.append((rid, eff[1]))

    def inject(self, rid, msg):
        self._absorb(rid, self.replicas[rid].handle(msg, self.now))
        return self

    def request(self, rid, req):
        self._absorb(rid, self.replicas[rid].on_client_request(req, self.now))
        return self

    def fire(self, rid, kind, key):
        self._absorb(rid, self.replicas[rid].on_timer(kind, key, self.now))
        return self

    def pump(self, drop_to=()):
        while self.queue:
            dst, msg = self.queue.pop(0)
            if dst in drop_to:
                continue
            self._absorb(dst, self.replicas[dst].handle(msg, self.now))
        return self

    def note_events(self):
        return [(rid, d["ev"]) for rid, d in self.notes]


def authed(seq: int, payload: bytes = b"op") -> m.Request:
    req = m.Request(0, seq, payload)
    mac = hmaclib.new(CLIENT_KEY, req.digest(), "sha256").digest()
    return m.Request(0, seq, payload, mac)


def broadcast_request(c: Cluster, seq: int) -> m.Request:
    req = authed(seq)
    for rid in range(c.cfg.n):
        c.request(rid, req)
    return req


# ------------------------------------------------------------ normal case


def test_leader_proposes_on_first_authed_request():
    c = Cluster()
    c.request(0, authed(1))
    prepares = [(d, msg) for d, msg in c.queue if isinstance(msg, m.Prepare)]
    echoes = [(d, msg) for d, msg in c.queue
              if isinstance(msg, m.Commit) and msg.echo]
    assert sorted(d for d, _ in prepares) == [1, 2]
    assert sorted(d for d, _ in echoes) == [1, 2]
    prep = prepares[0][1]
    assert prep.seq == 1 and prep.cert.value == 1
    assert prep.cert.counter == "r0:" + proposal_counter(0)


def test_unauthenticated_request_refused():
    c = Cluster()
    c.request(0, m.Request(0, 1, b"op", b"junk"))
    assert c.queue == []
    assert ("bad_auth" in ev for _, ev in c.note_events())
    assert c.replicas[0].pending == {}


def test_full_round_executes_everywhere_and_replies():
    c = Cluster()
    broadcast_request(c, 1)
    c.pump()
    for r in c.replicas:
        assert r.exec_cursor == 1
        assert r.trackers[1].committed is not None
    digests = {r.exec_digest for r in c.replicas}
    assert len(digests) == 1
    replies = [msg for _, msg in c.client_box if isinstance(msg, m.Reply)]
    assert {rep.replica_id for rep in replies} == {0, 1, 2}
    assert {rep.client_seq for rep in replies} == {1}


def test_commit_quorum_counts_own_attestation():
    # at f=1 a follower holds the leader's prepare credit plus its own
    # commit, which is already a weak quorum: no third voice needed
    c = Cluster()
    c.request(0, authed(1))
    prep = next(msg for dst, msg in c.queue
                if dst == 1 and isinstance(msg, m.Prepare))
    c.queue.clear()
    c.inject(1, prep)
    t = c.replicas[1].trackers[1]
    assert t.committed == prep.bdigest
    assert t.via == "quorum"


def test_out_of_order_prepare_buffers_until_gap_fills():
    c = Cluster(pipelining=True, max_inflight=4)
    r1, r2 = authed(1), authed(2)
    c.request(0, r1)
    c.request(0, r2)
    preps = [msg for dst, msg in c.queue
             if dst == 1 and isinstance(msg, m.Prepare)]
    assert [p.seq for p in preps] == [1, 2]
    c.queue.clear()
    c.inject(1, preps[1])
    assert c.replicas[1].prepared_log == {}
    assert (1, "buffer") in c.note_events()
    c.inject(1, preps[0])
    assert sorted(c.replicas[1].prepared_log) == [1, 2]


def test_duplicate_delivery_is_idempotent():
    c = Cluster()
    broadcast_request(c, 1)
    sends = list(c.queue)
    c.pump()
    done = {r.id: r.exec_digest for r in c.replicas}
    for dst, msg in sends:
        c.inject(dst, msg)
    c.pump()
    assert {r.id: r.exec_digest for r in c.replicas} == done


# ----------------------------------------------------- equivocation evidence


def test_request_bound_at_two_seqs_flags_the_leader():
    c = Cluster()
    req = authed(1)
    tc0 = c.tcs[0]
    b1 = m.batch_digest((req,))
    u1 = tc0.create_ui(m.prepare_digest(0, 1, b1), counter=proposal_counter(0))
    px = m.Prepare(0, 1, (req,), b1, u1)
    u2 = tc0.create_ui(m.prepare_digest(0, 2, b1), counter=proposal_counter(0))
    py = m.Prepare(0, 2, (req,), b1, u2)
    c.inject(1, px)
    c.queue.clear()
    c.inject(1, py)
    assert (1, "flag_leader") in c.note_events()
    assert 0 in c.replicas[1].flagged_views
    # r1 is the view-1 leader, so its own vote is absorbed locally
    assert c.replicas[1].voted_view == 1
    assert 1 in c.replicas[1].vc_votes.get(1, {})
    # a different flagging replica routes its vote to r1 over the wire
    c.inject(2, px)
    c.queue.clear()
    c.inject(2, py)
    vcs = [(dst, msg) for dst, msg in c.queue if isinstance(msg, m.ViewChange)]
    assert [(dst, msg.new_view) for dst, msg in vcs] == [(1, 1)]


def test_flagged_view_stops_admitting():
    c = Cluster()
    req = authed(1)
    tc0 = c.tcs[0]
    b1 = m.batch_digest((req,))
    u1 = tc0.create_ui(m.prepare_digest(0, 1, b1), counter=proposal_counter(0))
    u2 = tc0.create_ui(m.prepare_digest(0, 2, b1), counter=proposal_counter(0))
    c.inject(1, m.Prepare(0, 1, (req,), b1, u1))
    c.inject(1, m.Prepare(0, 2, (req,), b1, u2))
    c.queue.clear()
    other = authed(9)
    b3 = m.batch_digest((other,))
    u3 = tc0.create_ui(m.prepare_digest(0, 3, b3), counter=proposal_counter(0))
    c.inject(1, m.Prepare(0, 3, (other,), b3, u3))
    assert 3 not in c.replicas[1].prepared_log


# -------------------------------------------------------------- decisions


def test_decision_lets_excluded_replica_commit():
    c = Cluster()
    broadcast_request(c, 1)
    c.pump(drop_to={2})  # r2 hears nothing about seq 1
    assert c.replicas[2].trackers.get(1) is None
    c.fire(1, "decision", 1)
    decisions = [(dst, msg) for dst, msg in c.queue
                 if isinstance(msg, m.Decision)]
    assert {dst for dst, _ in decisions} == {2}
    c.pump()
    t = c.replicas[2].trackers[1]
    assert t.via == "decision"
    assert c.replicas[2].exec_cursor == 1  # batch fetched, then executed


def test_decision_suppressed_when_peer_known_committed():
    c = Cluster()
    broadcast_request(c, 1)
    c.pump()
    broadcast_request(c, 2)
    c.pump()
    # peers' commits for seq 2 prove (pipelining off) that seq 1 committed
    c.fire(1, "decision", 1)
    assert not any(isinstance(msg, m.Decision) for _, msg in c.queue)
    assert c.replicas[1].decisions_suppressed == 1
    # no such proof exists yet for the newest seq, so that one still ships
    c.fire(1, "decision", 2)
    assert any(isinstance(msg, m.Decision) for _, msg in c.queue)
    assert c.replicas[1].decisions_sent == 1


def test_decision_proof_needs_weak_quorum():
    c = Cluster()
    broadcast_request(c, 1)
    c.pump(drop_to={2})
    c.fire(1, "decision", 1)
    dec = next(msg for _, msg in c.queue if isinstance(msg, m.Decision))
    short = m.Decision(dec.view, dec.seq, dec.sender, dec.bdigest,
                       dec.proof[:1])
    c.queue.clear()
    c.inject(2, short)
    assert c.replicas[2].trackers.get(1) is None
    assert c.replicas[2].stats["invalid_drops"] == 1


def test_decisions_disabled_never_arms_timer():
    c = Cluster(decisions=False)
    broadcast_request(c, 1)
    c.pump()
    assert not any(kind == "decision" for _, kind, _ in c.timers)
    assert all(r.decisions_sent == 0 for r in c.replicas)


# ---------------------------------------------------------- counter policy


def test_pinned_policy_drops_minted_counter_proposals():
    c = Cluster(strict=False)
    req = authed(1)
    q = c.tcs[0].flexi_create_counter()
    b1 = m.batch_digest((req,))
    ui = c.tcs[0].create_ui(m.prepare_digest(0, 1, b1), counter=q)
    c.inject(1, m.Prepare(0, 1, (req,), b1, ui))
    assert c.replicas[1].prepared_log == {}
    assert c.replicas[1].stats["invalid_drops"] == 1


def test_announced_policy_admits_minted_counter():
    c = Cluster(strict=False, counter_policy="announced")
    req = authed(1)
    q = c.tcs[0].flexi_create_counter()
    b1 = m.batch_digest((req,))
    ui = c.tcs[0].create_ui(m.prepare_digest(0, 1, b1), counter=q)
    c.inject(1, m.Prepare(0, 1, (req,), b1, ui))
    assert 1 in c.replicas[1].prepared_log


# ------------------------------------------------------------ stale epochs


def test_stale_epoch_prepare_dropped_and_counted():
    c = Cluster()
    restarted = TrustedComponent(0, mode=TcMode.HMAC, system_key=SYSKEY,
                                 epoch=2)
    req = authed(1)
    b1 = m.batch_digest((req,))
    ui = restarted.create_ui(m.prepare_digest(0, 1, b1),
                             counter=proposal_counter(0))
    c.inject(1, m.Prepare(0, 1, (req,), b1, ui))
    assert c.replicas[1].stats["stale_epoch_drops"] == 1
    assert c.replicas[1].prepared_log == {}


# ------------------------------------------------------------- prevention


def test_prevention_round_trip_uses_context_certificates():
    c = Cluster(mode="prevention")
    broadcast_request(c, 1)
    prep = next(msg for _, msg in c.queue if isinstance(msg, m.Prepare))
    assert (prep.cert.phase, prep.cert.view, prep.cert.seq) == ("prepare", 0, 1)
    c.pump()
    for r in c.replicas:
        assert r.exec_cursor == 1
    assert len({r.exec_digest for r in c.replicas}) == 1


# -------------------------------------------------------------- suspicion


def test_follower_suspects_stalled_leader():
    c = Cluster()
    c.request(2, authed(1))  # one follower only: nothing will progress
    assert (2, "suspect", 0) in c.timers
    c.fire(2, "suspect", 0)
    # the defection vote travels to the view-1 leader, r1
    vcs = [(dst, msg) for dst, msg in c.queue if isinstance(msg, m.ViewChange)]
    assert [(dst, msg.new_view) for dst, msg in vcs] == [(1, 1)]
    assert c.replicas[2].voted_view == 1


def test_suspicion_cleared_once_backlog_empties():
    c = Cluster()
    broadcast_request(c, 1)
    assert (1, "suspect", 0) in c.timers
    c.pump()
    c.fire(1, "suspect", 0)
    assert not any(isinstance(msg, m.ViewChange) for _, msg in c.queue)
    assert c.replicas[1].voted_view == 0


def test_suspicion_rearms_while_progress_continues():
    c = Cluster()
    broadcast_request(c, 1)  # arms r1's timer with a mark of zero progress
    c.pump()
    c.request(1, authed(2))  # only r1 hears this one: backlog stays non-empty
    c.queue.clear()
    n_timers = len(c.timers)
    c.fire(1, "suspect", 0)
    # seq 1 landed since arming, so the period renews instead of defecting
    assert not any(isinstance(msg, m.ViewChange) for _, msg in c.queue)
    assert c.timers[n_timers:] == [(1, "suspect", 0)]
    # a full quiet period with the same backlog does defect
    c.fire(1, "suspect", 0)
    assert c.replicas[1].voted_view == 1


def test_leader_joining_a_ready_quorum_installs_the_view_once():
    # f+1 defection votes can reach the incoming leader before its own timer
    # fires; casting its joining vote completes the quorum on the spot, and
    # the handler must not then treat the original quorum as a second one
    c = Cluster(n=5, f=2)
    req = authed(1)
    for rid in (1, 2, 3, 4):
        c.request(rid, req)
    for rid in (2, 3, 4):
        c.fire(rid, "suspect", 0)
        c.pump()
    emitted = [(rid, ev) for rid, ev in c.note_events() if ev == "newview"]
    assert emitted == [(1, "newview")]
    assert all(r.view == 1 for r in c.replicas)
    assert all(r.exec_cursor == 1 for r in c.replicas)
    # sequencing stays in step with the proposal counter afterwards
    req2 = authed(2)
    for rid in range(5):
        c.request(rid, req2)
    c.pump()
    assert all(r.exec_cursor == 2 for r in c.replicas)
    assert c.replicas[1].next_seq == 3


# -------------------------------------------------------------- checkpoints


def test_checkpoints_advance_the_stable_floor():
    c = Cluster(checkpoint_interval=2)
    broadcast_request(c, 1)
    c.pump()
    broadcast_request(c, 2)
    c.pump()
    for r in c.replicas:
        assert r.stable_seq == 2
