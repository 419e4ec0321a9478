"""Common History Extraction protocol and history-element generation.

Two nodes meet, open an IBE-keyed secure channel, swap the identities found
in their histories, and prove each shared acquaintance ``X`` by showing the
signature ``X`` gave them.  A proof only counts when its signed message names
the presenting node, so proofs lifted from someone else's history are
useless.  Sessions run in-process over a pair of message queues; every frame
goes through the real channel encryption and is written to a transcript.
"""

from __future__ import annotations

import enum
import random
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

from .history import BlacklistedPeer, History, HistoryElement, InvalidSignature, SemanticFlags
from .identity import (
    SIGNATURE_SIZE,
    Ciphertext,
    ChannelError,
    MacMismatch,
    PublicIdentity,
    SecureChannel,
    Signature,
    SignatureDecodeError,
    TrustGerm,
    channel_accept,
    channel_offer,
    ibs_sign,
)
from .pairing import DecodeError
from .policy import Decision, Mode, PolicyConfig, Role, Verdict, decide, provider_decisions, required_common
from .reputation import InteractionOutcome, OutcomeKind, ReputationTable, UnknownSubject
from .wire import Reader, WireError, Writer

__all__ = [
    "Node",
    "Phase",
    "Reason",
    "Session",
    "CommonProof",
    "ParsedMessage",
    "ProtocolError",
    "ProofInvalid",
    "PairingRefused",
    "trust_message",
    "service_message",
    "parse_message",
    "proof_flags",
    "verify_common_proof",
    "open_session",
    "exchange_and_prove",
    "mutual_trust_exchange",
    "force_pairing",
    "run_service_interaction",
    "negotiate",
    "MAX_CLOCK_SKEW",
]

MAX_CLOCK_SKEW = 24 * 3600


class ProtocolError(RuntimeError):
    """An operation was called in a phase that does not allow it."""


class ProofInvalid(ValueError):
    pass


class PairingRefused(PermissionError):
    pass


# -- canonical messages -------------------------------------------------------

def _check_field(value: str, what: str) -> None:
    if not value or "|" in value:
        raise ValueError(f"{what} must be non-empty and must not contain '|': {value!r}")


def trust_message(id_a: str, id_b: str, timestamp: int) -> bytes:
    """``TRUST|<low>|<high>|<ts>`` with the identities sorted."""
    _check_field(id_a, "identity")
    _check_field(id_b, "identity")
    if id_a == id_b:
        raise ValueError("a trust message needs two distinct parties")
    low, high = sorted((id_a, id_b))
    return f"TRUST|{low}|{high}|{timestamp}".encode("utf-8")


def service_message(provider_id: str, receiver_id: str, service_tag: str, timestamp: int) -> bytes:
    _check_field(provider_id, "identity")
    _check_field(receiver_id, "identity")
    _check_field(service_tag, "service tag")
    if provider_id == receiver_id:
        raise ValueError("provider and receiver must differ")
    return f"SERVICE|{provider_id}|{receiver_id}|{service_tag}|{timestamp}".encode("utf-8")


@dataclass(frozen=True)
class ParsedMessage:
    kind: str
    parties: frozenset
    timestamp: int
    provider_id: str | None = None
    receiver_id: str | None = None
    service_tag: str | None = None


def parse_message(message: bytes) -> ParsedMessage:
    try:
        fields = message.decode("utf-8").split("|")
        if fields[0] == "TRUST" and len(fields) == 4:
            _, low, high, ts = fields
            if not low < high:
                raise ValueError("identities out of canonical order")
            return ParsedMessage("TRUST", frozenset((low, high)), int(ts))
        if fields[0] == "SERVICE" and len(fields) == 5:
            _, provider, receiver, tag, ts = fields
            if provider == receiver or not tag:
                raise ValueError("malformed service message")
            return ParsedMessage("SERVICE", frozenset((provider, receiver)), int(ts),
                                 provider, receiver, tag)
    except (UnicodeDecodeError, ValueError) as exc:
        raise ValueError(f"malformed interaction message: {exc}") from None
    raise ValueError("unknown interaction message")


def proof_flags(parsed: ParsedMessage, holder_id: str) -> SemanticFlags:
    """Semantics of the proof ``holder_id`` keeps for this message."""
    if parsed.kind == "TRUST":
        return SemanticFlags(sp=False, tp=True, rp=True)
    if holder_id == parsed.provider_id:
        return SemanticFlags(sp=True, tp=True)
    return SemanticFlags(sp=True, tp=True, rp=True)


@dataclass(frozen=True)
class CommonProof:
    """A voucher's signature over a message naming the voucher and the presenter."""

    message: bytes
    voucher: PublicIdentity
    signature: Signature

    @classmethod
    def from_element(cls, element: HistoryElement) -> CommonProof:
        return cls(element.message, element.peer, element.signature)

    def as_element(self, holder_id: str) -> HistoryElement:
        parsed = parse_message(self.message)
        return HistoryElement(self.message, self.voucher, self.signature,
                              proof_flags(parsed, holder_id), parsed.timestamp)

    def write(self, w: Writer) -> None:
        w.blob(self.message).raw(self.voucher.to_bytes()).raw(self.signature.to_bytes())

    @classmethod
    def read(cls, r: Reader, params) -> CommonProof:
        message = r.blob()
        voucher = PublicIdentity.read(r, params)
        return cls(message, voucher, Signature.from_bytes(r.raw(SIGNATURE_SIZE), params))


def verify_common_proof(proof: CommonProof, presenter_id: str, voucher_id: str,
                        known_voucher: PublicIdentity | None = None) -> ParsedMessage:
    """Raise ProofInvalid unless ``proof`` shows ``voucher_id`` vouching for ``presenter_id``."""
    if proof.voucher.id != voucher_id:
        raise ProofInvalid(f"proof is signed for {proof.voucher.id!r}, expected {voucher_id!r}")
    if known_voucher is not None and proof.voucher != known_voucher:
        raise ProofInvalid(f"public data for {voucher_id!r} differs from the known one")
    try:
        parsed = parse_message(proof.message)
    except ValueError as exc:
        raise ProofInvalid(str(exc)) from None
    if parsed.parties != {presenter_id, voucher_id}:
        raise ProofInvalid(f"proof message does not bind {presenter_id!r} and {voucher_id!r}")
    if not proof.voucher.verify(proof.message, proof.signature):
        raise ProofInvalid(f"signature of {voucher_id!r} does not verify")
    return parsed


# -- nodes and sessions -------------------------------------------------------

def _wall_clock() -> int:
    return int(time.time())


@dataclass
class Node:
    """Everything a device carries: germ, history, reputation, policy."""

    germ: TrustGerm
    history: History
    reputation: ReputationTable = field(default_factory=ReputationTable)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    rng: random.Random = field(default_factory=random.Random, repr=False, compare=False)
    clock: Callable[[], int] = field(default=_wall_clock, repr=False, compare=False)
    pairing_confirmed: bool = False

    @classmethod
    def create(cls, germ: TrustGerm, policy: PolicyConfig | None = None, seed=None,
               clock: Callable[[], int] | None = None) -> Node:
        policy = policy or PolicyConfig()
        history = History(germ.id, policy.history_size, policy.blacklist_threshold)
        return cls(germ, history, ReputationTable(), policy, random.Random(seed),
                   clock or _wall_clock)

    @property
    def id(self) -> str:
        return self.germ.id

    @property
    def public(self) -> PublicIdentity:
        return self.germ.public

    def not_before(self, now: int) -> int | None:
        age = self.policy.element_max_age
        return None if age is None else now - age

    def strike(self, peer_id: str, now: int) -> None:
        count = self.history.strike(peer_id, now)
        if count >= self.policy.blacklist_threshold:
            self.reputation.record_blacklist(peer_id, now)


class Phase(enum.Enum):
    IDLE = "Idle"
    CHANNEL_UP = "ChannelUp"
    HISTORIES_EXCHANGED = "HistoriesExchanged"
    PROVEN = "Proven"
    TRUSTED = "Trusted"
    REJECTED = "Rejected"


class Reason(enum.Enum):
    HANDSHAKE = "handshake"
    PARAMS = "parameter-mismatch"
    THRESHOLD_NOT_MET = "ThresholdNotMet"
    PROOF_INVALID = "ProofInvalid"
    DECLINED = "declined"
    CLOCK_SKEW = "clock-skew"
    POLICY = "policy"
    BLACKLISTED = "blacklisted"


_TRANSITIONS = {
    Phase.IDLE: {Phase.CHANNEL_UP, Phase.REJECTED},
    Phase.CHANNEL_UP: {Phase.HISTORIES_EXCHANGED, Phase.REJECTED},
    Phase.HISTORIES_EXCHANGED: {Phase.PROVEN, Phase.REJECTED},
    Phase.PROVEN: {Phase.TRUSTED, Phase.REJECTED},
    Phase.TRUSTED: {Phase.TRUSTED, Phase.REJECTED},
    Phase.REJECTED: set(),
}


class Frame(enum.IntEnum):
    HELLO = 1
    HANDSHAKE = 2
    IDS = 3
    IDS_AND_PROOFS = 4
    PROOFS = 5
    VERIFIED = 6
    ABORT = 7
    TRUST_OFFER = 8
    TRUST_REPLY = 9
    SIGNATURE = 10
    SERVICE_REQUEST = 11
    SERVICE_REPLY = 12
    NO_PROOF = 13


class Link:
    """Two in-process queues carrying length-prefixed frames, plus a transcript."""

    def __init__(self, session_id: bytes):
        self.session_id = session_id
        self.queues: dict[str, deque] = {}
        self.transcript: list[str] = []

    def log(self, line: str) -> None:
        self.transcript.append(line)


@dataclass(eq=False)
class Session:
    node: Node
    link: Link
    peer: PublicIdentity | None = None
    peer_id: str = ""
    channel: SecureChannel | None = None
    phase: Phase = Phase.IDLE
    reason: Reason | None = None
    claimed_common: set = field(default_factory=set)
    proven_by_peer: set = field(default_factory=set)
    common_set: set = field(default_factory=set)
    forced: bool = False

    @property
    def verified_count(self) -> int:
        return len(self.common_set)

    @property
    def transcript(self) -> list[str]:
        return self.link.transcript

    def advance(self, phase: Phase, reason: Reason | None = None, forced: bool = False) -> None:
        allowed = _TRANSITIONS[self.phase]
        if forced and self.phase is Phase.CHANNEL_UP and phase is Phase.TRUSTED:
            self.forced = True
        elif phase not in allowed:
            raise ProtocolError(f"{self.node.id}: cannot go from {self.phase.value} to {phase.value}")
        self.phase = phase
        if phase is Phase.REJECTED:
            self.reason = reason
            self.link.log(f"{self.node.id}: Rejected({reason.value if reason else '?'})")
        else:
            self.link.log(f"{self.node.id}: {phase.value}")

    def send(self, kind: Frame, payload: bytes, note: str = "") -> None:
        frame = bytes([kind]) + self.link.session_id + payload
        if self.channel is not None:
            frame = self.channel.send(frame)
        self.link.queues.setdefault(self.peer_id, deque()).append(
            len(frame).to_bytes(4, "big") + frame)
        self.link.log(f"{self.node.id} -> {self.peer_id}: {kind.name}{' ' + note if note else ''}")

    def receive(self, *expected: Frame) -> tuple[Frame, bytes]:
        queue = self.link.queues.get(self.node.id)
        if not queue:
            raise ProtocolError(f"{self.node.id}: no pending frame")
        raw = queue.popleft()
        size = int.from_bytes(raw[:4], "big")
        frame = raw[4:]
        if len(frame) != size:
            raise ChannelError("frame length mismatch")
        if self.channel is not None:
            frame = self.channel.receive(frame)
        kind = Frame(frame[0])
        if frame[1:9] != self.link.session_id:
            raise ChannelError("frame belongs to another session")
        if expected and kind not in expected:
            raise ProtocolError(f"{self.node.id}: expected {[e.name for e in expected]}, got {kind.name}")
        return kind, frame[9:]

    def reject(self, reason: Reason) -> None:
        if self.phase is not Phase.REJECTED:
            self.advance(Phase.REJECTED, reason)


def _reject_both(a: Session, b: Session, reason: Reason) -> None:
    a.reject(reason)
    b.reject(reason)


def _ids_payload(ids) -> bytes:
    w = Writer().u16(len(ids))
    for ident in sorted(ids):
        w.text(ident)
    return w.getvalue()


def _read_ids(r: Reader) -> set[str]:
    return {r.text() for _ in range(r.u16())}


def _proofs_payload(history: History, ids) -> bytes:
    w = Writer()
    proofs = [history.latest_from(i) for i in sorted(ids)]
    proofs = [p for p in proofs if p is not None]
    w.u16(len(proofs))
    for element in proofs:
        CommonProof.from_element(element).write(w)
    return w.getvalue()


def _read_proofs(r: Reader, params) -> list[CommonProof]:
    return [CommonProof.read(r, params) for _ in range(r.u16())]


def open_session(local: Node, remote: Node, seed=None) -> tuple[Session, Session]:
    """Run the IBE handshake; both sessions end in ChannelUp or Rejected."""
    rng = local.rng if seed is None else random.Random(seed)
    link = Link(rng.getrandbits(64).to_bytes(8, "big"))
    a = Session(local, link, peer_id=remote.id)
    b = Session(remote, link, peer_id=local.id)
    if local.id == remote.id:
        raise ValueError("a node cannot open a session with itself")
    if local.germ.params != remote.germ.params:
        link.log("parameter mismatch")
        _reject_both(a, b, Reason.PARAMS)
        return a, b
    try:
        b.send(Frame.HELLO, remote.public.to_bytes(), "(public identity)")
        _, payload = a.receive(Frame.HELLO)
        a.peer = PublicIdentity.from_bytes(payload, local.germ.params)
        if a.peer.id != remote.id:
            raise ChannelError("peer announced an unexpected identity")
        channel, ct = channel_offer(local.germ, a.peer, rng)
        a.send(Frame.HANDSHAKE, Writer().raw(local.public.to_bytes()).raw(ct.to_bytes()).getvalue(),
               "(IBE-encrypted session key)")
        _, payload = b.receive(Frame.HANDSHAKE)
        r = Reader(payload)
        b.peer = PublicIdentity.read(r, remote.germ.params)
        ct = Ciphertext.from_bytes(r.rest(), remote.germ.params)
        b.channel = channel_accept(remote.germ, b.peer.id, ct)
        a.channel = channel
    except (ChannelError, MacMismatch, WireError, DecodeError) as exc:
        link.log(f"handshake failed: {exc}")
        _reject_both(a, b, Reason.HANDSHAKE)
        return a, b
    a.advance(Phase.CHANNEL_UP)
    b.advance(Phase.CHANNEL_UP)
    return a, b


def _now(session: Session, now: int | None) -> int:
    return session.node.clock() if now is None else now


def _verify_batch(verifier: Session, proofs: list[CommonProof], wanted: set[str], now: int) -> set[str]:
    """Verify a peer's proofs for ``wanted``; raise ProofInvalid on any bad one."""
    node = verifier.node
    not_before = node.not_before(now)
    verified = set()
    for proof in proofs:
        voucher_id = proof.voucher.id
        if voucher_id not in wanted:
            continue
        known = node.history.peer_public(voucher_id)
        parsed = verify_common_proof(proof, verifier.peer_id, voucher_id, known)
        if not_before is not None and parsed.timestamp < not_before:
            continue
        verified.add(voucher_id)
        flags = proof_flags(parsed, verifier.peer_id)
        try:
            node.reputation.record_indirect(voucher_id, verifier.peer_id, flags,
                                            proof.as_element(verifier.peer_id))
        except UnknownSubject:
            pass
    verifier.link.log(f"{node.id}: verified {sorted(verified) or '[]'}")
    return verified


def _abort_on_invalid(verifier: Session, other: Session, exc: ProofInvalid, now: int) -> None:
    verifier.link.log(f"{verifier.node.id}: ProofInvalid: {exc}")
    verifier.node.strike(verifier.peer_id, now)
    verifier.send(Frame.ABORT, str(exc).encode("utf-8"), "(ProofInvalid)")
    other.receive(Frame.ABORT)
    _reject_both(verifier, other, Reason.PROOF_INVALID)


def default_threshold(a: Session, b: Session) -> int:
    same = a.peer.p_pub == a.node.public.p_pub
    return max(required_common(a.node.policy, Role.RECEIVER, same),
               required_common(b.node.policy, Role.PROVIDER, same))


def exchange_and_prove(a: Session, b: Session, policy_p: int | None = None,
                       now: int | None = None) -> tuple[Session, Session]:
    """History exchange and mutual common-node proofs in four frames.

    1. a -> b  identities of a's history
    2. b -> a  identities of b's history + b's proofs for the common ones
    3. a -> b  a's proofs for the common ones + what a verified
    4. b -> a  what b verified
    Only acquaintances proven in both directions count.
    """
    if a.phase is not Phase.CHANNEL_UP or b.phase is not Phase.CHANNEL_UP:
        raise ProtocolError("both sessions must be in ChannelUp")
    p = default_threshold(a, b) if policy_p is None else policy_p
    now_a, now_b = _now(a, now), _now(b, now)

    ids_a = a.node.history.identities(a.node.not_before(now_a))
    a.send(Frame.IDS, _ids_payload(ids_a), str(sorted(ids_a)))

    _, payload = b.receive(Frame.IDS)
    claimed_by_a = _read_ids(Reader(payload))
    b.claimed_common = b.node.history.common(claimed_by_a, b.node.not_before(now_b))
    ids_b = b.node.history.identities(b.node.not_before(now_b))
    b.send(Frame.IDS_AND_PROOFS,
           _ids_payload(ids_b) + _proofs_payload(b.node.history, b.claimed_common),
           f"{sorted(ids_b)} + proofs for {sorted(b.claimed_common)}")

    _, payload = a.receive(Frame.IDS_AND_PROOFS)
    r = Reader(payload)
    claimed_by_b = _read_ids(r)
    proofs_from_b = _read_proofs(r, a.node.germ.params)
    a.claimed_common = a.node.history.common(claimed_by_b, a.node.not_before(now_a))
    a.advance(Phase.HISTORIES_EXCHANGED)
    try:
        a.proven_by_peer = _verify_batch(a, proofs_from_b, a.claimed_common, now_a)
    except ProofInvalid as exc:
        b.advance(Phase.HISTORIES_EXCHANGED)
        _abort_on_invalid(a, b, exc, now_a)
        return a, b

    a.send(Frame.PROOFS,
           _proofs_payload(a.node.history, a.claimed_common) + _ids_payload(a.proven_by_peer),
           f"proofs for {sorted(a.claimed_common)}")
    _, payload = b.receive(Frame.PROOFS)
    r = Reader(payload)
    proofs_from_a = _read_proofs(r, b.node.germ.params)
    proven_for_a = _read_ids(r)
    b.advance(Phase.HISTORIES_EXCHANGED)
    try:
        b.proven_by_peer = _verify_batch(b, proofs_from_a, b.claimed_common, now_b)
    except ProofInvalid as exc:
        _abort_on_invalid(b, a, exc, now_b)
        return a, b

    b.common_set = b.proven_by_peer & proven_for_a
    b.send(Frame.VERIFIED, _ids_payload(b.proven_by_peer), str(sorted(b.proven_by_peer)))
    _, payload = a.receive(Frame.VERIFIED)
    a.common_set = a.proven_by_peer & _read_ids(Reader(payload))

    for s in (a, b):
        if s.verified_count >= p:
            s.link.log(f"{s.node.id}: {s.verified_count} verified common node(s) >= p={p}")
            s.advance(Phase.PROVEN)
        else:
            s.link.log(f"{s.node.id}: {s.verified_count} verified common node(s) < p={p}")
            s.advance(Phase.REJECTED, Reason.THRESHOLD_NOT_MET)
    return a, b


def _exchange_signatures(first: Session, second: Session, message: bytes,
                         first_flags: SemanticFlags, second_flags: SemanticFlags,
                         timestamp: int) -> tuple[HistoryElement, HistoryElement]:
    """``first`` signs, then ``second`` signs; each stores the other's signature."""
    sig_first = ibs_sign(first.node.germ, message, first.node.rng)
    first.send(Frame.SIGNATURE, sig_first.to_bytes(), f"sign_{first.node.id}(m)")
    element_for_second = _receive_signature(second, message, second_flags, timestamp)
    sig_second = ibs_sign(second.node.germ, message, second.node.rng)
    second.send(Frame.SIGNATURE, sig_second.to_bytes(), f"sign_{second.node.id}(m)")
    element_for_first = _receive_signature(first, message, first_flags, timestamp)
    return element_for_first, element_for_second


def _receive_signature(session: Session, message: bytes, flags: SemanticFlags,
                       timestamp: int) -> HistoryElement:
    _, payload = session.receive(Frame.SIGNATURE)
    try:
        sig = Signature.from_bytes(payload, session.node.germ.params)
    except SignatureDecodeError as exc:
        raise ProofInvalid(str(exc)) from None
    element = HistoryElement(message, session.peer, sig, flags, timestamp)
    if not element.verify():
        raise ProofInvalid(f"signature of {session.peer_id!r} does not verify")
    session.link.log(f"{session.node.id}: verified sign_{session.peer_id}(m)")
    return element


def _store(session: Session, element: HistoryElement) -> None:
    session.node.history.append(element)
    session.link.log(f"{session.node.id}: history += ({element.message.decode()}, "
                     f"Q_{element.peer_id}, Q^S_{element.peer_id}, sign_{element.peer_id}(m))")


def _fail_signature(signer: Session, verifier: Session, exc: ProofInvalid, now: int) -> None:
    verifier.link.log(f"{verifier.node.id}: ProofInvalid: {exc}")
    verifier.node.strike(signer.node.id, now)
    _reject_both(signer, verifier, Reason.PROOF_INVALID)


def mutual_trust_exchange(a: Session, b: Session, now: int | None = None,
                          a_accepts: bool = True, b_accepts: bool = True,
                          forced: bool = False) -> tuple[HistoryElement | None, HistoryElement | None]:
    """Both parties sign ``TRUST|a|b|ts``; returns (element for a, element for b).

    ``a`` is the initiator and its clock fixes the timestamp.  If either
    side declines nobody gets an element.
    """
    ready = Phase.CHANNEL_UP if forced else Phase.PROVEN
    if a.phase is not ready or b.phase is not ready:
        raise ProtocolError(f"mutual trust exchange requires {ready.value}")
    ts = _now(a, now)
    if not a_accepts:
        a.send(Frame.TRUST_OFFER, b"\x00", "(declined)")
        b.receive(Frame.TRUST_OFFER)
        _reject_both(a, b, Reason.DECLINED)
        return None, None
    a.send(Frame.TRUST_OFFER, b"\x01" + Writer().i64(ts).getvalue(), f"ts={ts}")
    _, payload = b.receive(Frame.TRUST_OFFER)
    offered = Reader(payload[1:]).i64()
    skew_ok = abs(offered - _now(b, now)) <= MAX_CLOCK_SKEW
    if a.node.history.is_blacklisted(b.node.id) or b.node.history.is_blacklisted(a.node.id):
        b_accepts = False
    b.send(Frame.TRUST_REPLY, b"\x01" if (b_accepts and skew_ok) else b"\x00")
    a.receive(Frame.TRUST_REPLY)
    if not skew_ok:
        _reject_both(a, b, Reason.CLOCK_SKEW)
        return None, None
    if not b_accepts:
        _reject_both(a, b, Reason.DECLINED)
        return None, None

    message = trust_message(a.node.id, b.node.id, offered)
    a.link.log(f"m = {message.decode()}")
    both = SemanticFlags(sp=False, tp=True, rp=True)
    try:
        for_a, for_b = _exchange_signatures(a, b, message, both, both, offered)
    except ProofInvalid as exc:
        _fail_signature(a, b, exc, offered)
        return None, None
    try:
        _store(a, for_a)
        _store(b, for_b)
    except (BlacklistedPeer, InvalidSignature):
        _reject_both(a, b, Reason.BLACKLISTED)
        return None, None
    a.advance(Phase.TRUSTED, forced=forced)
    b.advance(Phase.TRUSTED, forced=forced)
    outcome = InteractionOutcome(OutcomeKind.MUTUAL, a.node.id, b.node.id, message,
                                 trustor_proof=for_b, reciprocal_proof=for_a,
                                 common_size=a.verified_count)
    a.node.reputation.record_interaction(b.node.id, outcome)
    b.node.reputation.record_interaction(a.node.id, outcome)
    return for_a, for_b


def force_pairing(a: Session, b: Session, now: int | None = None) -> tuple[HistoryElement, HistoryElement]:
    """Bootstrap a trust bond by hand; both operators must have confirmed."""
    if not (a.node.pairing_confirmed and b.node.pairing_confirmed):
        missing = [s.node.id for s in (a, b) if not s.node.pairing_confirmed]
        raise PairingRefused(f"pairing not confirmed by {', '.join(missing)}")
    a.link.log(f"forced pairing {a.node.id} <-> {b.node.id}")
    result = mutual_trust_exchange(a, b, now, forced=True)
    a.node.pairing_confirmed = b.node.pairing_confirmed = False
    if result[0] is None:
        raise PairingRefused(f"forced pairing failed: {a.reason.value if a.reason else '?'}")
    return result


def run_service_interaction(receiver: Session, provider: Session, service_tag: str,
                            provide: bool | None = None, trustor: bool = True,
                            reciprocal: bool | None = None,
                            now: int | None = None) -> InteractionOutcome:
    """The four-step generation of history elements after a service.

    (1) receiver asks, (2) provider serves or the run stops, (3) receiver may
    sign ``SERVICE|provider|receiver|tag|ts`` for the provider, (4) only after
    that may the provider sign it back.
    """
    if receiver.phase not in (Phase.PROVEN, Phase.TRUSTED) or provider.phase is not receiver.phase:
        raise ProtocolError("service interaction requires a Proven or Trusted session")
    _check_field(service_tag, "service tag")
    same_domain = provider.peer.p_pub == provider.node.public.p_pub
    default_provide, default_reciprocal = provider_decisions(provider.node.policy, same_domain)
    provide = default_provide if provide is None else provide
    reciprocal = default_reciprocal if reciprocal is None else reciprocal
    r_id, p_id = receiver.node.id, provider.node.id

    receiver.send(Frame.SERVICE_REQUEST, service_tag.encode("utf-8"), f"asks for {service_tag!r}")
    provider.receive(Frame.SERVICE_REQUEST)
    ts = _now(provider, now)
    if not provide:
        provider.send(Frame.SERVICE_REPLY, b"\x00", "(service refused)")
        receiver.receive(Frame.SERVICE_REPLY)
        outcome = InteractionOutcome(OutcomeKind.NON_SERVICE, r_id, p_id,
                                     common_size=receiver.verified_count)
        receiver.node.strike(p_id, ts)
        receiver.node.reputation.record_interaction(p_id, outcome)
        provider.node.reputation.record_interaction(r_id, outcome)
        receiver.link.log("outcome: NonService")
        return outcome
    provider.send(Frame.SERVICE_REPLY, b"\x01" + Writer().i64(ts).getvalue(), f"service provided, ts={ts}")
    _, payload = receiver.receive(Frame.SERVICE_REPLY)
    ts = Reader(payload[1:]).i64()
    for s in (receiver, provider):
        if s.phase is Phase.PROVEN:
            s.advance(Phase.TRUSTED)
    message = service_message(p_id, r_id, service_tag, ts)
    receiver.link.log(f"m = {message.decode()}")

    if not trustor:
        receiver.send(Frame.NO_PROOF, b"", "(non trustor)")
        provider.receive(Frame.NO_PROOF)
        outcome = InteractionOutcome(OutcomeKind.NON_TRUSTOR, r_id, p_id, message,
                                     common_size=receiver.verified_count)
        provider.node.strike(r_id, ts)
        receiver.node.reputation.record_interaction(p_id, outcome)
        provider.node.reputation.record_interaction(r_id, outcome)
        receiver.link.log("outcome: NonTrustor")
        return outcome

    sig_r = ibs_sign(receiver.node.germ, message, receiver.node.rng)
    receiver.send(Frame.SIGNATURE, sig_r.to_bytes(), f"sign_{r_id}(m)")
    try:
        trustor_proof = _receive_signature(provider, message, SemanticFlags(sp=True, tp=True), ts)
    except ProofInvalid as exc:
        _fail_signature(receiver, provider, exc, ts)
        raise
    _store(provider, trustor_proof)

    reciprocal_proof = None
    if reciprocal:
        sig_p = ibs_sign(provider.node.germ, message, provider.node.rng)
        provider.send(Frame.SIGNATURE, sig_p.to_bytes(), f"sign_{p_id}(m)")
        try:
            reciprocal_proof = _receive_signature(receiver, message,
                                                  SemanticFlags(sp=True, tp=True, rp=True), ts)
        except ProofInvalid as exc:
            _fail_signature(provider, receiver, exc, ts)
            raise
        _store(receiver, reciprocal_proof)
        kind = OutcomeKind.FULL
    else:
        provider.send(Frame.NO_PROOF, b"", "(non reciprocal)")
        receiver.receive(Frame.NO_PROOF)
        kind = OutcomeKind.TRUSTOR_ONLY

    outcome = InteractionOutcome(kind, r_id, p_id, message, trustor_proof, reciprocal_proof,
                                 common_size=receiver.verified_count)
    receiver.node.reputation.record_interaction(p_id, outcome)
    provider.node.reputation.record_interaction(r_id, outcome)
    receiver.link.log(f"outcome: {kind.value}")
    return outcome


def negotiate(receiver: Session, provider: Session, now: int | None = None,
              rank_gap: int = 0) -> tuple[Decision, Decision]:
    """Run the common-history proof under both policies and decide.

    Returns (receiver decision, provider decision).  Sessions end Proven when
    both allow, otherwise Rejected.
    """
    same = receiver.peer.p_pub == receiver.node.public.p_pub
    needs = []
    for s, role in ((receiver, Role.RECEIVER), (provider, Role.PROVIDER)):
        cfg = s.node.policy
        needs.append(0 if cfg.mode is Mode.CLOSED else required_common(cfg, role, same, rank_gap))
    exchange_and_prove(receiver, provider, max(needs), now)
    if receiver.reason is Reason.PROOF_INVALID:
        return (Decision(Verdict.DENY, "proof-invalid"),) * 2

    decisions = []
    for s, role in ((receiver, Role.RECEIVER), (provider, Role.PROVIDER)):
        node = s.node
        t = _now(s, now)
        decisions.append(decide(
            node.policy, role, s.verified_count, same,
            node.reputation.score(s.peer_id, max_age=node.policy.element_max_age, now=t),
            node.history.is_blacklisted(s.peer_id, node.policy.blacklist_threshold),
            history_size=len(node.history), rank_gap=rank_gap))
    if not all(d.allowed for d in decisions):
        for s in (receiver, provider):
            if s.phase is not Phase.REJECTED:
                s.advance(Phase.REJECTED, Reason.POLICY)
    return decisions[0], decisions[1]

