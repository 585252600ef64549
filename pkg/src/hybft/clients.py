"""Closed-loop clients: broadcast a request, wait for matching replies.

A client keeps exactly one request in flight. Under the "f+1" policy it
accepts a result once f+1 replicas report the same result digest; under
"n-f" it additionally demands an identical assigned sequence number from
n-f replicas before moving on. Unanswered requests are rebroadcast on a
timer. Completion times are recorded so a run can report latency and
responsiveness per client.
"""

from __future__ import annotations

import hashlib
import hmac as hmaclib
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

from . import messages as m


@dataclass
class LatencyRecord:
    client_id: int
    client_seq: int
    submitted_ns: int
    completed_ns: int


class Client:
    def __init__(self, client_id: int, key: bytes, n: int, f: int, *,
                 policy: str = "f+1", total_requests: int = 1,
                 payload_size: int = 32, retransmit_ns: int = 300_000_000):
        self.id = client_id
        self.key = key
        self.n = n
        self.f = f
        self.policy = policy
        self.total = total_requests
        self.payload_size = payload_size
        self.retransmit_ns = retransmit_ns

        self.next_seq = 1
        self.inflight: Optional[m.Request] = None
        self.submitted_at = 0
        self.replies: Dict[int, m.Reply] = {}   # replica id -> reply
        self.records: List[LatencyRecord] = []
        self.retransmits = 0

    def _make_request(self, seq: int) -> m.Request:
        payload = hashlib.shake_256(
            f"client{self.id}:{seq}".encode()).digest(self.payload_size)
        req = m.Request(self.id, seq, payload)
        auth = hmaclib.new(self.key, req.digest(), "sha256").digest()
        return m.Request(self.id, seq, payload, auth)

    def start(self, now: int) -> List[tuple]:
        if self.total < 1:
            return []
        return self._submit(now)

    def _submit(self, now: int) -> List[tuple]:
        req = self._make_request(self.next_seq)
        self.inflight = req
        self.submitted_at = now
        self.replies = {}
        out = [("send", ("replica", i), req) for i in range(self.n)]
        out.append(("timer", "retransmit", (self.id, req.client_seq),
                    self.retransmit_ns))
        return out

    def on_reply(self, rep: m.Reply, now: int) -> List[tuple]:
        req = self.inflight
        if req is None or rep.client_seq != req.client_seq:
            return []
        self.replies[rep.replica_id] = rep
        if not self._complete():
            return []
        self.records.append(LatencyRecord(self.id, req.client_seq,
                                          self.submitted_at, now))
        self.inflight = None
        self.next_seq += 1
        if self.next_seq > self.total:
            return []
        return self._submit(now)

    def _complete(self) -> bool:
        by_result: Dict[bytes, int] = {}
        by_result_seq: Dict[Tuple[bytes, int], int] = {}
        for rep in self.replies.values():
            by_result[rep.result] = by_result.get(rep.result, 0) + 1
            k = (rep.result, rep.seq)
            by_result_seq[k] = by_result_seq.get(k, 0) + 1
        if self.policy == "n-f":
            need = self.n - self.f
            return any(c >= need for c in by_result_seq.values())
        return any(c >= self.f + 1 for c in by_result.values())

    def on_timer(self, kind: str, key, now: int) -> List[tuple]:
        if kind != "retransmit":
            return []
        req = self.inflight
        if req is None or key != (self.id, req.client_seq):
            return []
        self.retransmits += 1
        out = [("send", ("replica", i), req) for i in range(self.n)]
        out.append(("timer", "retransmit", key, self.retransmit_ns))
        return out

    def done(self) -> bool:
        return self.inflight is None and self.next_seq > self.total

    def completed_count(self) -> int:
        return len(self.records)
