"""Local reputation built only from verified interaction proofs.

Direct counters come from a node's own interactions with a peer.  Indirect
counters come from third parties (vouchers) who proved, during a common
history exchange, that they hold a proof signed by the peer; each voucher
counts once per subject, and only the kind of proof is learned, never how
many interactions the voucher had.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

from .history import HistoryElement, SemanticFlags
from .wire import Reader, WireError, Writer

__all__ = [
    "OutcomeKind",
    "InteractionOutcome",
    "DirectCounters",
    "IndirectCounters",
    "ReputationRecord",
    "ReputationTable",
    "ScoreWeights",
    "UnknownSubject",
    "UnverifiedEvent",
    "classify_voucher",
    "update_direct",
    "update_indirect",
    "score",
]

REPUTATION_VERSION = 1


class UnknownSubject(KeyError):
    pass


class UnverifiedEvent(ValueError):
    """A counter update was attempted without a verifying proof."""


class OutcomeKind(enum.Enum):
    NON_SERVICE = "non-service"
    NON_TRUSTOR = "non-trustor"
    TRUSTOR_ONLY = "trustor-only"
    FULL = "full"
    MUTUAL = "mutual"


@dataclass(frozen=True)
class InteractionOutcome:
    """Result of one interaction between a receiver and a provider.

    ``trustor_proof`` is the receiver's signature (kept by the provider),
    ``reciprocal_proof`` the provider's signature (kept by the receiver).
    For a mutual trust exchange the roles are initiator and responder.
    """

    kind: OutcomeKind
    receiver_id: str
    provider_id: str
    message: bytes = b""
    trustor_proof: HistoryElement | None = None
    reciprocal_proof: HistoryElement | None = None
    common_size: int = 0

    @property
    def parties(self) -> tuple[str, str]:
        return self.receiver_id, self.provider_id


@dataclass
class DirectCounters:
    meetings: int = 0
    trustor_proofs: int = 0
    reciprocal_proofs: int = 0
    services_refused: int = 0
    last_common_size: int = 0
    last_blacklist_ts: int | None = None


@dataclass
class IndirectCounters:
    vouchers_tp: int = 0
    vouchers_rp: int = 0
    vouchers_both: int = 0


@dataclass
class ReputationRecord:
    subject_id: str
    direct: DirectCounters = field(default_factory=DirectCounters)
    indirect: IndirectCounters = field(default_factory=IndirectCounters)
    indirect_seen: set[str] = field(default_factory=set)


def _check_proof(proof: HistoryElement | None, signer: str) -> bool:
    if proof is None:
        return False
    if proof.peer_id != signer or not proof.verify():
        raise UnverifiedEvent(f"proof attributed to {signer!r} does not verify")
    return True


def update_direct(rec: ReputationRecord, outcome: InteractionOutcome) -> ReputationRecord:
    if rec.subject_id not in outcome.parties:
        raise ValueError(f"outcome does not concern {rec.subject_id!r}")
    d = rec.direct
    has_tp = _check_proof(outcome.trustor_proof, outcome.receiver_id)
    has_rp = _check_proof(outcome.reciprocal_proof, outcome.provider_id)
    d.meetings += 1
    if has_tp:
        d.trustor_proofs += 1
    if has_rp:
        d.reciprocal_proofs += 1
    # only the provider can refuse a service
    if outcome.kind is OutcomeKind.NON_SERVICE and rec.subject_id == outcome.provider_id:
        d.services_refused += 1
    d.last_common_size = outcome.common_size
    return rec


def classify_voucher(flags: SemanticFlags) -> str:
    """Map observed proof semantics onto one indirect counter.

    A mutual trust exchange (both signed, no service) counts as "both"; a
    reciprocal proof after a service as "rp"; a bare trustor proof as "tp".
    """
    if flags.tp and flags.rp and not flags.sp:
        return "both"
    if flags.rp:
        return "rp"
    if flags.tp:
        return "tp"
    raise ValueError("flags carry no proof semantics")


def update_indirect(rec: ReputationRecord, voucher_id: str, observed_flags: SemanticFlags) -> ReputationRecord:
    if voucher_id == rec.subject_id:
        raise ValueError("a node cannot vouch for itself")
    if voucher_id in rec.indirect_seen:
        return rec
    kind = classify_voucher(observed_flags)
    ind = rec.indirect
    if kind == "tp":
        ind.vouchers_tp += 1
    elif kind == "rp":
        ind.vouchers_rp += 1
    else:
        ind.vouchers_both += 1
    rec.indirect_seen.add(voucher_id)
    return rec


@dataclass(frozen=True)
class ScoreWeights:
    meetings: float = 1.0
    trustor: float = 2.0
    reciprocal: float = 3.0
    voucher_tp: float = 0.5
    voucher_rp: float = 1.0
    voucher_both: float = 1.5
    common: float = 0.0
    # penalties, subtracted
    refused: float = 2.0
    blacklisted: float = 10.0

    def __post_init__(self):
        for name, value in vars(self).items():
            if value < 0:
                raise ValueError(f"weight {name} must be non-negative")


DEFAULT_WEIGHTS = ScoreWeights()


def score(rec: ReputationRecord, weights: ScoreWeights = DEFAULT_WEIGHTS,
          max_age: int | None = None, now: int = 0) -> float:
    d, ind = rec.direct, rec.indirect
    value = (weights.meetings * d.meetings
             + weights.trustor * d.trustor_proofs
             + weights.reciprocal * d.reciprocal_proofs
             + weights.voucher_tp * ind.vouchers_tp
             + weights.voucher_rp * ind.vouchers_rp
             + weights.voucher_both * ind.vouchers_both
             + weights.common * d.last_common_size)
    value -= weights.refused * d.services_refused
    ts = d.last_blacklist_ts
    if ts is not None and (max_age is None or now - ts <= max_age):
        value -= weights.blacklisted
    return value


class ReputationTable:
    """A node's reputation entries, keyed by subject identity.

    Entries are only created by a direct interaction; counters only move
    through verified proofs.
    """

    def __init__(self):
        self.records: dict[str, ReputationRecord] = {}

    def __contains__(self, subject_id):
        return subject_id in self.records

    def __getitem__(self, subject_id) -> ReputationRecord:
        try:
            return self.records[subject_id]
        except KeyError:
            raise UnknownSubject(subject_id) from None

    def __eq__(self, other):
        if not isinstance(other, ReputationTable):
            return NotImplemented
        return self.to_bytes() == other.to_bytes()

    def record_interaction(self, subject_id: str, outcome: InteractionOutcome) -> ReputationRecord:
        rec = self.records.get(subject_id) or ReputationRecord(subject_id)
        update_direct(rec, outcome)
        self.records[subject_id] = rec
        return rec

    def record_indirect(self, subject_id: str, voucher_id: str, flags: SemanticFlags,
                        proof: HistoryElement) -> ReputationRecord:
        """Credit ``voucher_id`` for holding ``proof`` signed by the subject."""
        rec = self[subject_id]
        _check_proof(proof, subject_id)
        return update_indirect(rec, voucher_id, flags)

    def record_blacklist(self, subject_id: str, now: int) -> None:
        if subject_id in self.records:
            self.records[subject_id].direct.last_blacklist_ts = now

    def score(self, subject_id: str, weights: ScoreWeights = DEFAULT_WEIGHTS,
              max_age: int | None = None, now: int = 0) -> float:
        rec = self.records.get(subject_id)
        return score(rec, weights, max_age, now) if rec else 0.0

    def to_bytes(self) -> bytes:
        w = Writer().u8(REPUTATION_VERSION).u32(len(self.records))
        for subject in sorted(self.records):
            rec = self.records[subject]
            d, ind = rec.direct, rec.indirect
            w.text(subject)
            w.u32(d.meetings).u32(d.trustor_proofs).u32(d.reciprocal_proofs)
            w.u32(d.services_refused).u32(d.last_common_size)
            if d.last_blacklist_ts is None:
                w.u8(0)
            else:
                w.u8(1).i64(d.last_blacklist_ts)
            w.u32(ind.vouchers_tp).u32(ind.vouchers_rp).u32(ind.vouchers_both)
            w.u32(len(rec.indirect_seen))
            for voucher in sorted(rec.indirect_seen):
                w.text(voucher)
        return w.getvalue()

    @classmethod
    def read(cls, r: Reader) -> ReputationTable:
        if r.u8() != REPUTATION_VERSION:
            raise WireError("unsupported reputation version")
        table = cls()
        for _ in range(r.u32()):
            subject = r.text()
            d = DirectCounters(r.u32(), r.u32(), r.u32(), r.u32(), r.u32())
            if r.u8():
                d.last_blacklist_ts = r.i64()
            ind = IndirectCounters(r.u32(), r.u32(), r.u32())
            seen = {r.text() for _ in range(r.u32())}
            if len(seen) != ind.vouchers_tp + ind.vouchers_rp + ind.vouchers_both:
                raise WireError(f"inconsistent voucher counters for {subject!r}")
            table.records[subject] = ReputationRecord(subject, d, ind, seen)
        return table

    @classmethod
    def from_bytes(cls, data: bytes) -> ReputationTable:
        r = Reader(data)
        table = cls.read(r)
        r.expect_end()
        return table
