from dataclasses import dataclass
from typing import Dict, List, Optional

from overlay.ident import TL, UID, NodeId

MAX_LOCATORS = 2


@dataclass
class LocatorRecord:
    uid: UID
    key: NodeId
    tls: List[TL]
    owner_addr: TL
    published_at: int
    expires_at: int

    def __post_init__(self):
        if not 1 <= len(self.tls) <= MAX_LOCATORS:
            raise ValueError(f"a record holds 1..{MAX_LOCATORS} locators, got {len(self.tls)}")
        if self.expires_at <= self.published_at:
            raise ValueError("record expires before it was published")

    @property
    def primary(self) -> TL:
        return self.tls[0]


@dataclass
class SuccessorPointer:
    key: NodeId
    base_node: NodeId
    expires_at: int


@dataclass
class RedirectEntry:
    uid: UID
    key: NodeId
    new_base: NodeId
    expires_at: int


class LocationTable:
    """Soft state held by one ring node: records it is base node for, pointers and redirects."""

    def __init__(self):
        self.records: Dict[UID, LocatorRecord] = {}
        self.pointers: Dict[NodeId, SuccessorPointer] = {}
        self.redirects: Dict[UID, RedirectEntry] = {}

    def store_record(self, record: LocatorRecord):
        self.records[record.uid] = record
        # a fresh record here supersedes any older redirect away from this node
        self.redirects.pop(record.uid, None)

    def record(self, uid: UID, now: int) -> Optional[LocatorRecord]:
        record = self.records.get(uid)
        return record if record is not None and record.expires_at > now else None

    def install_pointer(self, key: NodeId, base_node: NodeId, expires_at: int):
        self.pointers[key] = SuccessorPointer(key, base_node, expires_at)

    def pointer(self, key: NodeId, now: int) -> Optional[SuccessorPointer]:
        pointer = self.pointers.get(key)
        return pointer if pointer is not None and pointer.expires_at > now else None

    def install_redirect(self, entry: RedirectEntry):
        self.redirects[entry.uid] = entry

    def redirect(self, uid: UID, now: int) -> Optional[RedirectEntry]:
        entry = self.redirects.get(uid)
        return entry if entry is not None and entry.expires_at > now else None

    def expire(self, now: int) -> int:
        """Drop everything with expires_at <= now; returns how many entries went."""
        purged = 0
        for table in (self.records, self.pointers, self.redirects):
            stale = [k for k, entry in table.items() if entry.expires_at <= now]
            for k in stale:
                del table[k]
            purged += len(stale)
        return purged

    def __len__(self):
        return len(self.records) + len(self.pointers) + len(self.redirects)
