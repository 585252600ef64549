"""Protocol message types, canonical digests, and wire-size accounting.

Digests are computed over canonical length-prefixed encodings so every replica
derives identical values; certificate verification recomputes them from fields
that travel with the message (a commit proof never needs the batch payload).
Wire sizes come from the shared SizeModel so simulator byte tallies and the
analytic model cannot drift apart.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Optional, Tuple

from .tc import _enc
from . import resource_model as rm


def _h(payload: bytes) -> bytes:
    return hashlib.sha256(payload).digest()


@dataclass(frozen=True)
class Request:
    client_id: int
    client_seq: int
    payload: bytes
    auth: bytes = b""

    def digest(self) -> bytes:
        return _h(_enc("req", self.client_id, self.client_seq, self.payload))

    def key(self) -> Tuple[int, int]:
        return (self.client_id, self.client_seq)


def batch_digest(requests: Tuple[Request, ...]) -> bytes:
    return _h(_enc("batch", *[r.digest() for r in requests]))


def prepare_digest(view: int, seq: int, bdigest: bytes) -> bytes:
    return _h(_enc("prepare", view, seq, bdigest))


def commit_digest(view: int, seq: int, sender: int, bdigest: bytes) -> bytes:
    return _h(_enc("commit", view, seq, sender, bdigest))


def checkpoint_digest(seq: int, state_digest: bytes) -> bytes:
    return _h(_enc("checkpoint", seq, state_digest))


@dataclass(frozen=True)
class Prepare:
    view: int
    seq: int
    requests: Tuple[Request, ...]
    bdigest: bytes
    cert: object  # UniqueIdentifier or ContextCertificate from the leader's TC

    def pdigest(self) -> bytes:
        return prepare_digest(self.view, self.seq, self.bdigest)


@dataclass(frozen=True)
class Commit:
    view: int
    seq: int
    sender: int
    bdigest: bytes
    cert: object
    echo: bool = False  # leader re-presenting its Prepare certificate

    def cdigest(self) -> bytes:
        return commit_digest(self.view, self.seq, self.sender, self.bdigest)


@dataclass(frozen=True)
class Decision:
    """Commit proof forwarded so lagging replicas can commit directly.

    proof holds f+1 (sender, kind, certificate) triples where kind says which
    canonical digest the certificate covers; with threshold stubs enabled the
    content is unchanged but the wire size is constant.
    """

    view: int
    seq: int
    sender: int
    bdigest: bytes
    proof: Tuple[Tuple[int, str, object], ...]
    threshold: bool = False


@dataclass(frozen=True)
class Reply:
    client_id: int
    client_seq: int
    seq: int
    replica_id: int
    result: bytes


@dataclass(frozen=True)
class Checkpoint:
    seq: int
    state_digest: bytes
    sender: int
    cert: object


@dataclass(frozen=True)
class TimelineEntry:
    """One certified statement a replica has issued, with its certificate.

    View-change validation demands these form a gapless cover of the sender's
    counters up to its attested positions, which is what stops a faulty
    replica from hiding the tail of its history.
    """

    kind: str        # prepare | commit | checkpoint | viewchange | newview | skip
    seq: int
    digest: bytes
    cert: object


@dataclass(frozen=True)
class ViewChange:
    new_view: int
    sender: int
    stable_seq: int
    stable_cert: Tuple[Checkpoint, ...]
    prepares: Tuple[Prepare, ...]       # admitted statements above stable_seq
    timeline: Tuple[TimelineEntry, ...]  # every certified statement issued
    attestation: object                  # StateAttestation over all counters
    cert: object

    def core_digest(self) -> bytes:
        items = [_enc("vc", self.new_view, self.sender, self.stable_seq)]
        items += [p.pdigest() for p in self.prepares]
        items += [_enc(e.kind, e.seq, e.digest) for e in self.timeline]
        return _h(b"".join(items))

    def vdigest(self) -> bytes:
        return _h(self.core_digest() + _enc("att", self.attestation.proof))


@dataclass(frozen=True)
class NewView:
    view: int
    sender: int
    viewchanges: Tuple[ViewChange, ...]
    base: int                      # highest stable seq across the viewchanges
    stable_cert: Tuple[Checkpoint, ...]
    skip_cert: Optional[object]    # voids proposal values 1..base in this view
    prepares: Tuple[Prepare, ...]  # re-proposals for base+1..top, new certs
    cert: object

    def ndigest(self) -> bytes:
        items = [_enc("nv", self.view, self.sender, self.base)]
        items += [vc.vdigest() for vc in self.viewchanges]
        items += [p.pdigest() for p in self.prepares]
        return _h(b"".join(items))


@dataclass(frozen=True)
class FetchBatch:
    seq: int
    sender: int


@dataclass(frozen=True)
class BatchResponse:
    prepare: Prepare
    sender: int


@dataclass(frozen=True)
class FetchState:
    seq: int
    sender: int


@dataclass(frozen=True)
class StateResponse:
    seq: int
    exec_digest: bytes
    last_replies: Tuple[Reply, ...]
    stable_cert: Tuple[Checkpoint, ...]
    sender: int


def wire_size(msg, sizes: rm.SizeModel, f: int) -> int:
    """Byte weight of a message under the shared size model."""
    if isinstance(msg, Request):
        return rm.request_size(sizes)
    if isinstance(msg, Prepare):
        return rm.prepare_size(sizes, len(msg.requests))
    if isinstance(msg, Commit):
        return rm.commit_size(sizes)
    if isinstance(msg, Decision):
        return rm.decision_size(sizes, f, msg.threshold)
    if isinstance(msg, Reply):
        return rm.reply_size(sizes)
    if isinstance(msg, Checkpoint):
        return rm.checkpoint_size(sizes)
    if isinstance(msg, ViewChange):
        return (sizes.header_bytes + sizes.ui_bytes
                + len(msg.stable_cert) * rm.checkpoint_size(sizes)
                + sum(rm.prepare_size(sizes, len(p.requests)) for p in msg.prepares)
                + len(msg.timeline) * (sizes.hash_bytes + sizes.ui_bytes)
                + sizes.ui_bytes)
    if isinstance(msg, NewView):
        return (sizes.header_bytes + 2 * sizes.ui_bytes
                + sum(wire_size(vc, sizes, f) for vc in msg.viewchanges)
                + len(msg.stable_cert) * rm.checkpoint_size(sizes)
                + sum(rm.prepare_size(sizes, len(p.requests)) for p in msg.prepares))
    if isinstance(msg, (FetchBatch, FetchState)):
        return sizes.header_bytes
    if isinstance(msg, BatchResponse):
        return sizes.header_bytes + rm.prepare_size(sizes, len(msg.prepare.requests))
    if isinstance(msg, StateResponse):
        return (sizes.header_bytes + sizes.hash_bytes
                + len(msg.last_replies) * rm.reply_size(sizes)
                + len(msg.stable_cert) * rm.checkpoint_size(sizes))
    raise TypeError(f"unsized message {type(msg).__name__}")


def msg_type(msg) -> str:
    return type(msg).__name__.lower()
