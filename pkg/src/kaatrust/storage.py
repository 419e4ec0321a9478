"""On-disk node state and keystore files.

A node file holds the public germ, a reference to a separate keystore file,
the history, the reputation table and the policy.  Secrets never enter the
node file; the keystore is written with owner-only permissions.
"""

from __future__ import annotations

import contextlib
import fcntl
import os
from dataclasses import dataclass
from pathlib import Path

from .che import Node
from .history import History
from .identity import ImprintingStation, PublicIdentity, TrustGerm
from .pairing import DEFAULT_PARAMS
from .policy import PolicyConfig
from .reputation import ReputationTable
from .wire import Reader, WireError, Writer

__all__ = [
    "NodeStateFile",
    "StateLocked",
    "file_lock",
    "read_keystore",
    "write_keystore",
    "read_station",
    "write_station",
    "atomic_write",
]

NODE_MAGIC = b"KAAN"
KEYSTORE_MAGIC = b"KAAK"
STATION_MAGIC = b"KAAS"
NODE_VERSION = 1

FLAG_EXPORTABLE = 0x01


class StateLocked(RuntimeError):
    pass


@contextlib.contextmanager
def file_lock(path: Path):
    """Advisory exclusive lock on ``path``; fails at once if already held."""
    lock_path = Path(str(path) + ".lock")
    fd = os.open(lock_path, os.O_RDWR | os.O_CREAT, 0o600)
    try:
        try:
            fcntl.flock(fd, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError:
            raise StateLocked(f"{path} is locked by another process") from None
        yield
    finally:
        os.close(fd)


def atomic_write(path: Path, data: bytes, mode: int = 0o644) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    fd = os.open(tmp, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, mode)
    with os.fdopen(fd, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def _strip_magic(data: bytes, magic: bytes, what: str) -> bytes:
    if data[:len(magic)] != magic:
        raise WireError(f"not a {what} file")
    return data[len(magic):]


def write_station(path: Path, station: ImprintingStation) -> None:
    atomic_write(path, STATION_MAGIC + station.to_bytes(), 0o600)


def read_station(path: Path) -> ImprintingStation:
    return ImprintingStation.from_bytes(_strip_magic(Path(path).read_bytes(), STATION_MAGIC, "station"))


def write_keystore(path: Path, germ: TrustGerm) -> None:
    atomic_write(path, KEYSTORE_MAGIC + germ.export_secrets(), 0o600)


def read_keystore(path: Path, public: PublicIdentity) -> TrustGerm:
    data = _strip_magic(Path(path).read_bytes(), KEYSTORE_MAGIC, "keystore")
    return TrustGerm.from_parts(public, data)


@dataclass
class NodeStateFile:
    public: PublicIdentity
    keystore_ref: str  # path of the keystore, relative to the node file
    history: History
    reputation: ReputationTable
    policy: PolicyConfig
    exportable: bool = False

    def __eq__(self, other):
        if not isinstance(other, NodeStateFile):
            return NotImplemented
        return self.to_bytes() == other.to_bytes()

    @classmethod
    def from_node(cls, node: Node, keystore_ref: str, exportable: bool = False) -> NodeStateFile:
        return cls(node.public, keystore_ref, node.history, node.reputation, node.policy, exportable)

    def to_node(self, germ: TrustGerm, seed=None, clock=None) -> Node:
        if germ.public != self.public:
            raise WireError("germ does not belong to this node file")
        node = Node.create(germ, self.policy, seed=seed, clock=clock)
        node.history = self.history
        node.reputation = self.reputation
        return node

    def keystore_path(self, node_path: Path) -> Path:
        return Path(node_path).parent / self.keystore_ref

    def to_bytes(self) -> bytes:
        w = Writer().raw(NODE_MAGIC).u8(NODE_VERSION)
        w.blob(self.public.to_bytes())
        w.text(self.keystore_ref)
        w.u8(FLAG_EXPORTABLE if self.exportable else 0)
        w.blob(self.history.to_bytes())
        w.blob(self.reputation.to_bytes())
        w.blob(self.policy.to_text().encode("utf-8"))
        return w.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes, params=DEFAULT_PARAMS) -> NodeStateFile:
        r = Reader(_strip_magic(data, NODE_MAGIC, "node state"))
        if r.u8() != NODE_VERSION:
            raise WireError("unsupported node state version")
        public = PublicIdentity.from_bytes(r.blob(), params)
        keystore_ref = r.text()
        flags = r.u8()
        if flags & ~FLAG_EXPORTABLE:
            raise WireError("unknown node state flags")
        history_raw, reputation_raw = r.blob(), r.blob()
        try:
            policy = PolicyConfig.from_text(r.blob().decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise WireError(f"policy section is not UTF-8: {exc}") from None
        r.expect_end()
        hr = Reader(history_raw)
        history = History.read(hr, params, policy.blacklist_threshold)
        hr.expect_end()
        if history.owner_id != public.id:
            raise WireError("history owner does not match the node identity")
        reputation = ReputationTable.from_bytes(reputation_raw)
        return cls(public, keystore_ref, history, reputation, policy, bool(flags & FLAG_EXPORTABLE))

    def save(self, path: Path) -> None:
        atomic_write(path, self.to_bytes())

    @classmethod
    def load(cls, path: Path) -> NodeStateFile:
        return cls.from_bytes(Path(path).read_bytes())
