import logging
from typing import Any, List, Optional

from location.location_service import LocationService
from location.messages import LocationMessage
from overlay.chord import OverlayMessage, RingNode
from overlay.ident import TL
from transport.msctp import SctpPacket, SctpTransport
from utils.trace import ChunkTrace

logger = logging.getLogger(__name__)


class BaseHost:
    """A host outside the ring: access-network addresses, an entry ring node and one mSCTP endpoint."""

    def __init__(self, name: str, location: LocationService, entry: RingNode,
                 trace: ChunkTrace = None, rto_ms: int = 1000):
        self.name = name
        self.location = location
        self.overlay = location.overlay
        self.sim = location.sim
        self.entry = entry
        self.tls: List[TL] = []
        self.transport = SctpTransport(self.sim, name, trace, rto_ms=rto_ms)

    @property
    def primary_tl(self) -> Optional[TL]:
        return self.tls[0] if self.tls else None

    @property
    def reply_address(self) -> str:
        return self.tls[0].address

    def attach(self, tl: TL):
        """Take an address issued by an access network."""
        if tl in self.tls:
            return
        self.tls.append(tl)
        self.transport.bind(tl, attach=False)
        self.sim.attach(tl.address, tl.network_id, self.receive)
        logger.debug(f"[{self.sim.now}ms] {self.name} attached {tl} on network {tl.network_id}")

    def detach(self, tl: TL):
        if tl not in self.tls:
            return
        self.tls.remove(tl)
        self.transport.unbind(tl, detach=False)
        self.sim.detach(tl.address)
        logger.debug(f"[{self.sim.now}ms] {self.name} released {tl}")

    def set_primary(self, tl: TL):
        self.tls.remove(tl)
        self.tls.insert(0, tl)

    def receive(self, src: str, dst: str, msg: Any):
        if isinstance(msg, SctpPacket):
            self.transport.receive(src, dst, msg)
        elif isinstance(msg, OverlayMessage):
            self.overlay.on_reply(msg)
        elif isinstance(msg, LocationMessage):
            self.location.on_reply(msg)
        else:
            logger.warning(f"{self.name}: unexpected {type(msg).__name__} from {src}")

    def __repr__(self):
        return f"{type(self).__name__}({self.name}, {[str(t) for t in self.tls]})"
