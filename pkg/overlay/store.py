from typing import Dict, FrozenSet, Iterable, List, Tuple

from overlay.ident import NodeId


class KeyValueStore:
    """Per-node storage: each hashed key maps to a set of values stamped with their insertion time."""

    def __init__(self):
        self._data: Dict[NodeId, Dict[bytes, int]] = {}

    def put(self, key: NodeId, value: bytes, timestamp: int) -> bool:
        """Add value under key; returns False when it was already present."""
        values = self._data.setdefault(key, {})
        if value in values:
            return False
        values[bytes(value)] = int(timestamp)
        return True

    def get(self, key: NodeId) -> FrozenSet[bytes]:
        return frozenset(self._data.get(key, {}))

    def inserted_at(self, key: NodeId, value: bytes) -> int:
        return self._data[key][value]

    def keys(self) -> List[NodeId]:
        return sorted(self._data)

    def pop_range(self, predicate) -> Dict[NodeId, Dict[bytes, int]]:
        """Remove and return every key for which predicate(key) holds."""
        moved = {key: values for key, values in self._data.items() if predicate(key)}
        for key in moved:
            del self._data[key]
        return moved

    def pop_all(self) -> Dict[NodeId, Dict[bytes, int]]:
        moved, self._data = self._data, {}
        return moved

    def merge(self, entries: Dict[NodeId, Dict[bytes, int]]):
        for key, values in entries.items():
            target = self._data.setdefault(key, {})
            for value, timestamp in values.items():
                target.setdefault(value, timestamp)

    def items(self) -> Iterable[Tuple[NodeId, FrozenSet[bytes]]]:
        for key in sorted(self._data):
            yield key, frozenset(self._data[key])

    def __contains__(self, key: NodeId) -> bool:
        return key in self._data

    def __len__(self):
        return len(self._data)
