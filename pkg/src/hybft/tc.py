"""Simulated trusted components: attested counters, context certification, attested logs.

Each replica owns one TrustedComponent instance. The untrusted replica code may
only call the public operations below; key material and counter state live in
underscore-prefixed attributes behind this module boundary. Components are
crash-only: a crashed instance answers every call with TcUnavailable, and a
restarted instance gets a fresh instance epoch unless an admin snapshot is
restored into it.
"""

from __future__ import annotations

import hashlib
import hmac as hmac_mod
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Tuple

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)


class TcMode(Enum):
    """How certificates are authenticated and therefore who can verify them."""

    HMAC = "hmac"  # shared key held only inside TCs; verification needs a TC
    SIG = "sig"    # per-TC asymmetric keypair; verification is public


class VerifyStatus(Enum):
    OK = "ok"
    INVALID = "invalid"
    STALE_EPOCH = "stale_epoch"


class TcUnavailable(Exception):
    """The component has crashed; no operation is possible."""


class ModeViolation(Exception):
    """Operation not permitted in the component's configured mode."""


class EquivocationRefused(Exception):
    """A context id was already certified; a second certificate is refused."""


class SequenceRefused(Exception):
    """Context ids must advance in order; use an explicit skip first."""


class WindowExceeded(Exception):
    """Counter value or log position would leave the watermark window."""


class RestoreRefused(Exception):
    """Snapshot blob already consumed, or target component is not fresh."""


def _enc(*fields) -> bytes:
    """Canonical length-prefixed encoding used for every certificate payload."""
    out = []
    for f in fields:
        if isinstance(f, int):
            b = f.to_bytes(8, "big", signed=False)
        elif isinstance(f, str):
            b = f.encode("utf-8")
        elif isinstance(f, bytes):
            b = f
        else:
            raise TypeError(f"unencodable field {f!r}")
        out.append(len(b).to_bytes(4, "big"))
        out.append(b)
    return b"".join(out)


def derive_counter_id(replica_id: int, purpose: str) -> str:
    """Strict-mode counter identity: deterministic in (replica, purpose)."""
    return f"r{replica_id}:{purpose}"


@dataclass(frozen=True)
class UniqueIdentifier:
    """Certificate binding one counter value to one message hash, once."""

    replica_id: int
    epoch: int
    counter: str
    value: int
    msg_hash: bytes
    proof: bytes

    def payload(self) -> bytes:
        return _enc("ui", self.replica_id, self.epoch, self.counter,
                    self.value, self.msg_hash)


@dataclass(frozen=True)
class SkipCertificate:
    """Attests that counter values first..last were voided, never assigned."""

    replica_id: int
    epoch: int
    counter: str
    first: int
    last: int
    proof: bytes

    def payload(self) -> bytes:
        return _enc("skip", self.replica_id, self.epoch, self.counter,
                    self.first, self.last)


@dataclass(frozen=True)
class ContextCertificate:
    """Prevention-mode certificate: one (phase, view, seq) id, certified once."""

    replica_id: int
    epoch: int
    phase: str
    view: int
    seq: int
    msg_hash: bytes
    proof: bytes

    def payload(self) -> bytes:
        return _enc("ctx", self.replica_id, self.epoch, self.phase,
                    self.view, self.seq, self.msg_hash)


@dataclass(frozen=True)
class PhaseSkipCertificate:
    """Attests every context id between two positions of one phase was voided."""

    replica_id: int
    epoch: int
    phase: str
    from_view: int
    from_seq: int
    to_view: int
    to_seq: int
    proof: bytes

    def payload(self) -> bytes:
        return _enc("pskip", self.replica_id, self.epoch, self.phase,
                    self.from_view, self.from_seq, self.to_view, self.to_seq)


@dataclass(frozen=True)
class StateAttestation:
    """Attested read of every counter and phase position, bound to a nonce.

    Lets a verifier demand a log that is gapless up to the attested positions,
    so a replica cannot present a truncated timeline during a view change.
    """

    replica_id: int
    epoch: int
    counters: Tuple[Tuple[str, int], ...]
    phases: Tuple[Tuple[str, int, int], ...]
    nonce: bytes
    proof: bytes

    def payload(self) -> bytes:
        flat: List = ["att", self.replica_id, self.epoch, self.nonce,
                      len(self.counters)]
        for name, value in self.counters:
            flat += [name, value]
        flat.append(len(self.phases))
        for phase, view, seq in self.phases:
            flat += [phase, view, seq]
        return _enc(*flat)


@dataclass(frozen=True)
class LogAttestation:
    """Attests the digest stored at one position of an attested log."""

    replica_id: int
    epoch: int
    log_id: str
    position: int
    digest: bytes
    proof: bytes

    def payload(self) -> bytes:
        return _enc("log", self.replica_id, self.epoch, self.log_id,
                    self.position, self.digest)


Certificate = (UniqueIdentifier, SkipCertificate, ContextCertificate,
               PhaseSkipCertificate, StateAttestation, LogAttestation)


@dataclass
class SnapshotBlob:
    """Sealed counter state for admin-driven restore. Single use."""

    epoch: int
    replica_id: int
    _counters: Dict[str, int]
    _counter_low: Dict[str, int]
    _phases: Dict[str, Tuple[int, int]]
    _ctx_issued: Dict[str, set]
    _flexi_serial: int
    _flexi_names: set
    used: bool = False


class Directory:
    """Public verification material: expected epochs and (in SIG mode) keys.

    In HMAC mode the directory holds no key; verification must go through a
    component that does (see TrustedComponent.verify).
    """

    def __init__(self, mode: TcMode):
        self.mode = mode
        self._epochs: Dict[int, int] = {}
        self._public_keys: Dict[int, Ed25519PublicKey] = {}

    def register(self, replica_id: int, epoch: int,
                 public_key: Optional[Ed25519PublicKey] = None) -> None:
        self._epochs[replica_id] = epoch
        if public_key is not None:
            self._public_keys[replica_id] = public_key

    def expected_epoch(self, replica_id: int) -> int:
        return self._epochs[replica_id]

    def verify(self, cert) -> VerifyStatus:
        """SIG-mode verification. No trusted component is involved."""
        if self.mode is not TcMode.SIG:
            raise ModeViolation("directory verification requires SIG mode")
        if self._epochs.get(cert.replica_id) != cert.epoch:
            return VerifyStatus.STALE_EPOCH
        key = self._public_keys.get(cert.replica_id)
        if key is None:
            return VerifyStatus.INVALID
        try:
            key.verify(cert.proof, cert.payload())
        except InvalidSignature:
            return VerifyStatus.INVALID
        return VerifyStatus.OK


class TrustedComponent:
    """One replica's trusted subsystem: counters, contexts, snapshot, crash."""

    PUBLIC_OPS = (
        "create_ui", "verify", "skip_values", "advance_watermark",
        "certify_context", "skip_contexts", "flexi_create_counter",
        "attest_state", "snapshot", "restore", "crash",
        "make_log", "replica_id", "epoch", "mode", "strict", "accesses",
        "issued_certificates", "is_crashed", "public_key", "state_key",
    )

    def __init__(self, replica_id: int, *, mode: TcMode = TcMode.HMAC,
                 strict: bool = True, epoch: int = 1,
                 system_key: Optional[bytes] = None,
                 sig_seed: Optional[bytes] = None,
                 window: Optional[int] = None):
        self.replica_id = replica_id
        self.epoch = epoch
        self.mode = mode
        self.strict = strict
        self.accesses = 0
        self._crashed = False
        self._window = window
        self._counters: Dict[str, int] = {}
        self._counter_low: Dict[str, int] = {}
        self._phases: Dict[str, Tuple[int, int]] = {}
        self._ctx_issued: Dict[str, set] = {}
        self._flexi_serial = 0
        self._flexi_names: set = set()
        self._issued: List = []
        if mode is TcMode.HMAC:
            if system_key is None:
                raise ValueError("HMAC mode requires a system key")
            self._key = system_key
            self._signer = None
        else:
            seed = sig_seed or hashlib.sha256(
                _enc("tc-seed", replica_id, epoch)).digest()
            self._signer = Ed25519PrivateKey.from_private_bytes(seed[:32])
            self._key = None

    # -- plumbing -------------------------------------------------------

    def public_key(self) -> Optional[Ed25519PublicKey]:
        if self._signer is None:
            return None
        return self._signer.public_key()

    def is_crashed(self) -> bool:
        return self._crashed

    def crash(self) -> None:
        self._crashed = True

    def issued_certificates(self) -> tuple:
        """Audit view of every certificate this instance has issued."""
        return tuple(self._issued)

    def state_key(self) -> tuple:
        """Canonical hashable snapshot of counter state, for model checking."""
        return (self.epoch, self._crashed, self._flexi_serial,
                tuple(sorted(self._flexi_names)),
                tuple(sorted(self._counters.items())),
                tuple(sorted(self._counter_low.items())),
                tuple(sorted(self._phases.items())),
                tuple(sorted((p, tuple(sorted(s)))
                             for p, s in self._ctx_issued.items())))

    def _touch(self) -> None:
        if self._crashed:
            raise TcUnavailable(f"tc of replica {self.replica_id} is down")
        self.accesses += 1

    def _prove(self, payload: bytes) -> bytes:
        if self.mode is TcMode.HMAC:
            return hmac_mod.new(self._key, payload, hashlib.sha256).digest()
        return self._signer.sign(payload)

    def _counter_id(self, counter: str) -> str:
        """Canonical identity a certificate carries for `counter`.

        Fixed-purpose counters are namespaced by owner, so verifiers can
        recompute the identity a given replica must use for a given purpose.
        Minted (flexi) counters already carry their full identity.
        """
        if counter in self._flexi_names:
            return counter
        return derive_counter_id(self.replica_id, counter)

    def _check_window(self, counter: str, candidate_last: int) -> None:
        if self._window is None:
            return
        low = self._counter_low.get(counter, 1)
        if candidate_last > low + self._window - 1:
            raise WindowExceeded(
                f"counter {counter}: value {candidate_last} past window "
                f"[{low}, {low + self._window - 1}]")

    # -- monotonic counters (detection mode) -----------------------------

    def create_ui(self, msg_hash: bytes, counter: str = "msg") -> UniqueIdentifier:
        """Bind the next value of `counter` to msg_hash. Values never repeat."""
        self._touch()
        cid = self._counter_id(counter)
        value = self._counters.get(cid, 0) + 1
        self._check_window(cid, value)
        self._counters[cid] = value
        ui = UniqueIdentifier(self.replica_id, self.epoch, cid, value,
                              msg_hash, b"")
        ui = UniqueIdentifier(self.replica_id, self.epoch, cid, value,
                              msg_hash, self._prove(ui.payload()))
        self._issued.append(ui)
        return ui

    def skip_values(self, counter: str, count: int) -> SkipCertificate:
        """Void the next `count` values, attested so verifiers can trust the gap."""
        self._touch()
        if count < 1:
            raise ValueError("skip count must be >= 1")
        cid = self._counter_id(counter)
        last = self._counters.get(cid, 0)
        self._check_window(cid, last + count)
        cert = SkipCertificate(self.replica_id, self.epoch, cid,
                               last + 1, last + count, b"")
        cert = SkipCertificate(self.replica_id, self.epoch, cid,
                               last + 1, last + count,
                               self._prove(cert.payload()))
        self._counters[cid] = last + count
        self._issued.append(cert)
        return cert

    def advance_watermark(self, counter: str, new_low: int) -> None:
        """Slide the window floor. Only forward, never past the next value."""
        self._touch()
        cid = self._counter_id(counter)
        low = self._counter_low.get(cid, 1)
        last = self._counters.get(cid, 0)
        if new_low < low or new_low > last + 1:
            raise ValueError(f"bad watermark {new_low} (low={low}, last={last})")
        self._counter_low[cid] = new_low

    # -- context certification (prevention mode) -------------------------

    def certify_context(self, phase: str, view: int, seq: int,
                        msg_hash: bytes) -> ContextCertificate:
        """Certify (phase, view, seq) exactly once, in order.

        Order rule: within a view, seq must advance by one; entering a higher
        view is allowed at seq 1, anything else needs skip_contexts first.
        """
        self._touch()
        issued = self._ctx_issued.setdefault(phase, set())
        if (view, seq) in issued:
            raise EquivocationRefused(f"context ({phase},{view},{seq}) already certified")
        pv, ps = self._phases.get(phase, (0, 0))
        if not ((view == pv and seq == ps + 1) or (view > pv and seq == 1)):
            raise SequenceRefused(
                f"context ({phase},{view},{seq}) out of order after ({pv},{ps})")
        cert = ContextCertificate(self.replica_id, self.epoch, phase, view,
                                  seq, msg_hash, b"")
        cert = ContextCertificate(self.replica_id, self.epoch, phase, view,
                                  seq, msg_hash, self._prove(cert.payload()))
        self._phases[phase] = (view, seq)
        issued.add((view, seq))
        self._issued.append(cert)
        return cert

    def skip_contexts(self, phase: str, view: int, seq: int) -> PhaseSkipCertificate:
        """Void every context id of `phase` up to and including (view, seq)."""
        self._touch()
        pv, ps = self._phases.get(phase, (0, 0))
        if (view, seq) <= (pv, ps):
            raise SequenceRefused(
                f"skip target ({view},{seq}) not past position ({pv},{ps})")
        cert = PhaseSkipCertificate(self.replica_id, self.epoch, phase,
                                    pv, ps, view, seq, b"")
        cert = PhaseSkipCertificate(self.replica_id, self.epoch, phase,
                                    pv, ps, view, seq,
                                    self._prove(cert.payload()))
        self._phases[phase] = (view, seq)
        self._issued.append(cert)
        return cert

    # -- counter creation policy -----------------------------------------

    def flexi_create_counter(self) -> str:
        """Mint a fresh counter identity on demand.

        Only legal when the component was configured non-strict. Unbounded
        creation is exactly what lets a faulty caller run parallel timelines,
        which is why strict mode refuses it.
        """
        self._touch()
        if self.strict:
            raise ModeViolation("strict component: counters are fixed per purpose")
        self._flexi_serial += 1
        name = f"anon{self._flexi_serial}@r{self.replica_id}"
        self._flexi_names.add(name)
        self._counters.setdefault(name, 0)
        return name

    # -- attested state read ----------------------------------------------

    def attest_state(self, nonce: bytes) -> StateAttestation:
        """Attested snapshot of all counter and phase positions."""
        self._touch()
        counters = tuple(sorted(self._counters.items()))
        phases = tuple(sorted((p, v, s) for p, (v, s) in self._phases.items()))
        att = StateAttestation(self.replica_id, self.epoch, counters, phases,
                               nonce, b"")
        att = StateAttestation(self.replica_id, self.epoch, counters, phases,
                               nonce, self._prove(att.payload()))
        self._issued.append(att)
        return att

    # -- verification ------------------------------------------------------

    def verify(self, cert, directory: Directory) -> VerifyStatus:
        """HMAC-mode verification: needs this component's shared key.

        Counts as one access against this (the verifier's) component; that is
        the cost asymmetry between the two certificate modes.
        """
        self._touch()
        if self.mode is not TcMode.HMAC:
            raise ModeViolation("SIG-mode certificates verify via the directory")
        if directory.expected_epoch(cert.replica_id) != cert.epoch:
            return VerifyStatus.STALE_EPOCH
        want = hmac_mod.new(self._key, cert.payload(), hashlib.sha256).digest()
        if not hmac_mod.compare_digest(want, cert.proof):
            return VerifyStatus.INVALID
        return VerifyStatus.OK

    # -- snapshot / restore -------------------------------------------------

    def snapshot(self) -> SnapshotBlob:
        """Sealed copy of the counter state for admin-driven migration.

        The caller is responsible for quiescing first; within the simulator a
        snapshot always falls between events, so no certify is in flight.
        """
        self._touch()
        return SnapshotBlob(
            epoch=self.epoch,
            replica_id=self.replica_id,
            _counters=dict(self._counters),
            _counter_low=dict(self._counter_low),
            _phases=dict(self._phases),
            _ctx_issued={p: set(s) for p, s in self._ctx_issued.items()},
            _flexi_serial=self._flexi_serial,
            _flexi_names=set(self._flexi_names),
        )

    def restore(self, blob: SnapshotBlob) -> None:
        """Adopt a sealed snapshot into a fresh component, continuing its timeline."""
        self._touch()
        if blob.used:
            raise RestoreRefused("snapshot blob already consumed")
        if blob.replica_id != self.replica_id:
            raise RestoreRefused("snapshot belongs to a different replica")
        if self._issued or self._counters or self._phases:
            raise RestoreRefused("restore target must be fresh")
        blob.used = True
        self.epoch = blob.epoch
        self._counters = dict(blob._counters)
        self._counter_low = dict(blob._counter_low)
        self._phases = dict(blob._phases)
        self._ctx_issued = {p: set(s) for p, s in blob._ctx_issued.items()}
        self._flexi_serial = blob._flexi_serial
        self._flexi_names = set(blob._flexi_names)

    # -- attested log -------------------------------------------------------

    def make_log(self, log_id: str, window: Optional[int] = None) -> "AttestedLog":
        return AttestedLog(self, log_id, window)


class AttestedLog:
    """Append-only log of digests with attested positional lookups.

    Positions are assigned once and never reused; truncation only raises the
    floor. The backing component signs every attestation, so lookups cost one
    access like any other trusted operation.
    """

    def __init__(self, tc: TrustedComponent, log_id: str,
                 window: Optional[int] = None):
        self._tc = tc
        self.log_id = log_id
        self._window = window
        self._entries: Dict[int, bytes] = {}
        self._next = 1
        self._low = 1

    @property
    def low_watermark(self) -> int:
        return self._low

    def append(self, digest: bytes) -> LogAttestation:
        self._tc._touch()
        if self._window is not None and self._next > self._low + self._window - 1:
            raise WindowExceeded(
                f"log {self.log_id}: position {self._next} past window")
        pos = self._next
        self._next += 1
        self._entries[pos] = digest
        att = LogAttestation(self._tc.replica_id, self._tc.epoch, self.log_id,
                             pos, digest, b"")
        att = LogAttestation(self._tc.replica_id, self._tc.epoch, self.log_id,
                             pos, digest, self._tc._prove(att.payload()))
        self._tc._issued.append(att)
        return att

    def lookup(self, pos: int):
        """Returns ("ok", attestation), ("truncated", None) or ("unassigned", None)."""
        self._tc._touch()
        if pos < self._low:
            return ("truncated", None)
        if pos not in self._entries:
            return ("unassigned", None)
        digest = self._entries[pos]
        att = LogAttestation(self._tc.replica_id, self._tc.epoch, self.log_id,
                             pos, digest, b"")
        att = LogAttestation(self._tc.replica_id, self._tc.epoch, self.log_id,
                             pos, digest, self._tc._prove(att.payload()))
        return ("ok", att)

    def truncate(self, new_low: int) -> None:
        self._tc._touch()
        if new_low < self._low:
            raise ValueError("truncation floor only moves forward")
        self._low = new_low
        for pos in [p for p in self._entries if p < new_low]:
            del self._entries[pos]


def verify_certificate(cert, *, directory: Directory,
                       via_tc: Optional[TrustedComponent] = None) -> VerifyStatus:
    """Mode-dispatching verification helper.

    SIG mode verifies against the public directory (no trusted access);
    HMAC mode requires the verifier's own component and charges it one access.
    """
    if directory.mode is TcMode.SIG:
        return directory.verify(cert)
    if via_tc is None:
        raise ModeViolation("HMAC-mode verification needs the verifier's component")
    return via_tc.verify(cert, directory)
