"""Bounded history of signed interaction proofs.

A history holds at most ``capacity`` elements and behaves as a crush FIFO:
appending to a full history silently drops the oldest element.  Each element
keeps the peer's signature over the interaction message, so it can be shown
to a third party who knows the same peer.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Iterable

from .identity import SIGNATURE_SIZE, PublicIdentity, Signature
from .pairing import DEFAULT_PARAMS, PairingParams
from .wire import Reader, WireError, Writer

__all__ = [
    "SemanticFlags",
    "HistoryElement",
    "History",
    "InvalidSignature",
    "BlacklistedPeer",
    "DEFAULT_BLACKLIST_THRESHOLD",
]

HISTORY_VERSION = 1
DEFAULT_BLACKLIST_THRESHOLD = 3


class InvalidSignature(ValueError):
    pass


class BlacklistedPeer(ValueError):
    pass


@dataclass(frozen=True)
class SemanticFlags:
    """sp: service provided, tp: trustor proof held, rp: reciprocal proof held."""

    sp: bool = False
    tp: bool = False
    rp: bool = False

    def __post_init__(self):
        if self.rp and not self.tp:
            raise ValueError("a reciprocal proof only follows a trustor proof")

    def to_byte(self) -> int:
        return int(self.sp) | int(self.tp) << 1 | int(self.rp) << 2

    @classmethod
    def from_byte(cls, value: int) -> SemanticFlags:
        if value & ~0b111:
            raise WireError(f"unknown flag bits 0x{value:02x}")
        return cls(bool(value & 1), bool(value & 2), bool(value & 4))


@dataclass(frozen=True)
class HistoryElement:
    message: bytes
    peer: PublicIdentity
    signature: Signature
    flags: SemanticFlags
    timestamp: int

    @property
    def peer_id(self) -> str:
        return self.peer.id

    def verify(self) -> bool:
        return self.peer.verify(self.message, self.signature)

    def write(self, w: Writer) -> None:
        w.blob(self.message).raw(self.peer.to_bytes()).raw(self.signature.to_bytes())
        w.u8(self.flags.to_byte()).i64(self.timestamp)

    @classmethod
    def read(cls, r: Reader, params: PairingParams = DEFAULT_PARAMS) -> HistoryElement:
        message = r.blob()
        peer = PublicIdentity.read(r, params)
        signature = Signature.from_bytes(r.raw(SIGNATURE_SIZE), params)
        flags = SemanticFlags.from_byte(r.u8())
        return cls(message, peer, signature, flags, r.i64())


class History:
    def __init__(self, owner_id: str, capacity: int,
                 blacklist_threshold: int = DEFAULT_BLACKLIST_THRESHOLD):
        if capacity < 1:
            raise ValueError("history capacity must be positive")
        self.owner_id = owner_id
        self.capacity = capacity
        self.blacklist_threshold = blacklist_threshold
        self.elements: deque[HistoryElement] = deque(maxlen=capacity)
        # identity -> (strike count, timestamp of last strike)
        self.blacklist: dict[str, tuple[int, int]] = {}

    def __len__(self):
        return len(self.elements)

    def __iter__(self):
        return iter(self.elements)

    def __eq__(self, other):
        if not isinstance(other, History):
            return NotImplemented
        return self.to_bytes() == other.to_bytes()

    def append(self, element: HistoryElement) -> History:
        if element.peer_id == self.owner_id:
            raise ValueError("a node cannot store a proof signed by itself")
        if self.is_blacklisted(element.peer_id):
            raise BlacklistedPeer(element.peer_id)
        if not element.verify():
            raise InvalidSignature(f"element from {element.peer_id!r} does not verify")
        self.elements.append(element)
        return self

    def identities(self, not_before: int | None = None) -> set[str]:
        """Distinct peers in the history, optionally ignoring stale elements."""
        return {e.peer_id for e in self.elements
                if not_before is None or e.timestamp >= not_before}

    def common(self, claimed: Iterable[str], not_before: int | None = None) -> set[str]:
        return self.identities(not_before) & set(claimed)

    def latest_from(self, peer_id: str) -> HistoryElement | None:
        for element in reversed(self.elements):
            if element.peer_id == peer_id:
                return element
        return None

    def peer_public(self, peer_id: str) -> PublicIdentity | None:
        element = self.latest_from(peer_id)
        return element.peer if element else None

    def strike(self, peer_id: str, now: int) -> int:
        count = self.blacklist.get(peer_id, (0, 0))[0] + 1
        self.blacklist[peer_id] = (count, now)
        return count

    def is_blacklisted(self, peer_id: str, threshold: int | None = None) -> bool:
        if threshold is None:
            threshold = self.blacklist_threshold
        return self.blacklist.get(peer_id, (0, 0))[0] >= threshold

    def verify_all(self) -> list[bool]:
        return [e.verify() for e in self.elements]

    def to_bytes(self) -> bytes:
        w = Writer().u8(HISTORY_VERSION).text(self.owner_id).u32(self.capacity)
        w.u32(len(self.elements))
        for element in self.elements:
            element.write(w)
        w.u32(len(self.blacklist))
        for peer_id in sorted(self.blacklist):
            count, last = self.blacklist[peer_id]
            w.text(peer_id).u32(count).i64(last)
        return w.getvalue()

    @classmethod
    def read(cls, r: Reader, params: PairingParams = DEFAULT_PARAMS,
             blacklist_threshold: int = DEFAULT_BLACKLIST_THRESHOLD) -> History:
        if r.u8() != HISTORY_VERSION:
            raise WireError("unsupported history version")
        history = cls(r.text(), r.u32(), blacklist_threshold)
        count = r.u32()
        if count > history.capacity:
            raise WireError("history holds more elements than its capacity")
        for _ in range(count):
            element = HistoryElement.read(r, params)
            if not element.verify():
                raise InvalidSignature(f"stored element from {element.peer_id!r} does not verify")
            history.elements.append(element)
        for _ in range(r.u32()):
            peer_id = r.text()
            history.blacklist[peer_id] = (r.u32(), r.i64())
        return history

    @classmethod
    def from_bytes(cls, data: bytes, params: PairingParams = DEFAULT_PARAMS) -> History:
        r = Reader(data)
        history = cls.read(r, params)
        r.expect_end()
        return history
