from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional

from overlay.ident import TL, UID, NodeId


class MessageKind(str, Enum):
    PUBLISH = "PUBLISH"
    PUBLISH_ACK = "PUBLISH_ACK"
    UPDATE = "UPDATE"
    UPDATE_ACK = "UPDATE_ACK"
    QUERY = "QUERY"
    QUERY_REDIRECT = "QUERY_REDIRECT"
    POINTER_INSTALL = "POINTER_INSTALL"
    TL_REPLY = "TL_REPLY"


# kinds that complete a request issued by a host
REPLY_KINDS = frozenset({MessageKind.PUBLISH_ACK, MessageKind.UPDATE_ACK, MessageKind.TL_REPLY})


@dataclass
class LocationMessage:
    """One location-layer message; origin is the address replies go to."""
    kind: MessageKind
    msg_id: int
    uid: UID
    key: NodeId
    origin: str
    tls: List[TL] = field(default_factory=list)
    base_node: Optional[NodeId] = None
    previous_base: Optional[NodeId] = None
    hops: int = 0
    via_pointer: bool = False
    via_redirect: bool = False
    found: bool = True
