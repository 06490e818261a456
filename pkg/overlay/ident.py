import hashlib
import ipaddress
from dataclasses import dataclass
from typing import Union


MAX_BITS = 160
UID_SEPARATOR = ":"


class MalformedUID(ValueError):
    pass


class MalformedTL(ValueError):
    pass


@dataclass(frozen=True)
class UID:
    """Stable three-part name of a node: name:device:id."""
    name: str
    device: str
    id: str

    def __post_init__(self):
        for part in (self.name, self.device, self.id):
            if not part or UID_SEPARATOR in part or part != part.strip():
                raise MalformedUID(f"invalid UID part {part!r}")

    def canonical(self) -> str:
        return UID_SEPARATOR.join((self.name, self.device, self.id))

    def __str__(self):
        return self.canonical()


@dataclass(frozen=True)
class TL:
    """Temporary locator: the address an access network issued to a host."""
    address: str
    network_id: int

    def __str__(self):
        return self.address


@dataclass(frozen=True, order=True)
class NodeId:
    value: int
    bits: int

    def __post_init__(self):
        if not 1 <= self.bits <= MAX_BITS:
            raise ValueError(f"identifier width must be in [1, {MAX_BITS}], got {self.bits}")
        if not 0 <= self.value < (1 << self.bits):
            raise ValueError(f"identifier {self.value} outside circle of {self.bits} bits")

    @property
    def size(self) -> int:
        return 1 << self.bits

    def __add__(self, offset: int) -> "NodeId":
        return NodeId((self.value + int(offset)) % self.size, self.bits)

    def __sub__(self, offset: int) -> "NodeId":
        return NodeId((self.value - int(offset)) % self.size, self.bits)

    def __int__(self):
        return self.value

    def __index__(self):
        return self.value

    def distance_to(self, other: "NodeId") -> int:
        """Clockwise distance from self to other."""
        return (other.value - self.value) % self.size

    def __str__(self):
        return f"N{self.value}"


def parse_uid(text: str) -> UID:
    """Parse "name:device:id", tolerating whitespace around the separators."""
    if not isinstance(text, str) or not text.strip():
        raise MalformedUID("empty UID")
    parts = [part.strip() for part in text.split(UID_SEPARATOR)]
    if len(parts) != 3 or not all(parts):
        raise MalformedUID(f"expected name:device:id, got {text!r}")
    return UID(*parts)


def serialize_uid(uid: UID) -> str:
    return uid.canonical()


def hash_to_id(uid: Union[UID, str], m: int) -> NodeId:
    """SHA-1 of the canonical UID, truncated to the low m bits."""
    if not 1 <= m <= MAX_BITS:
        raise ValueError(f"m must be in [1, {MAX_BITS}], got {m}")
    canonical = uid.canonical() if isinstance(uid, UID) else str(uid)
    digest = hashlib.sha1(canonical.encode("utf-8")).digest()
    return NodeId(int.from_bytes(digest, "big") & ((1 << m) - 1), m)


def parse_tl(text: str, network_id: int) -> TL:
    try:
        address = ipaddress.IPv4Address(text.strip())
    except (ipaddress.AddressValueError, AttributeError) as e:
        raise MalformedTL(f"invalid locator {text!r}: {e}") from e
    return TL(str(address), int(network_id))
