import logging
from dataclasses import dataclass
from typing import List, Optional

from agents.base_host import BaseHost
from location.location_service import LocationService, NotFound, ResolveResult
from overlay.chord import LookupTimeout, RingNode
from overlay.ident import UID, NodeId
from transport.msctp import Association, InitTimeout
from utils.trace import ChunkTrace

logger = logging.getLogger(__name__)


@dataclass
class Resolution:
    issued_at: int
    outcome: str
    result: Optional[ResolveResult] = None


class CorrespondentNode(BaseHost):
    """Peer of a mobile node: finds it through the overlay, opens the association and re-queries on a timer."""

    def __init__(self, name: str, location: LocationService, entry: RingNode,
                 requery_period_ms: int = 10000, use_cached_base: bool = True,
                 trace: ChunkTrace = None, rto_ms: int = 1000):
        super().__init__(name, location, entry, trace, rto_ms)
        self.requery_period_ms = requery_period_ms
        self.use_cached_base = use_cached_base
        self.cached_base: Optional[NodeId] = None
        self.resolutions: List[Resolution] = []
        self.association: Optional[Association] = None

    def resolve_once(self, uid: UID, via: NodeId = None):
        """Resolve and remember the answer; never raises for a failed query."""
        issued = self.sim.now
        try:
            result = yield from self.location.resolve_process(self, uid, via=via)
        except NotFound as e:
            logger.warning(f"[{self.sim.now}ms] {self.name}: {e}")
            self.resolutions.append(Resolution(issued, "not_found"))
            return None
        except LookupTimeout as e:
            logger.warning(f"[{self.sim.now}ms] {self.name}: {e}")
            self.resolutions.append(Resolution(issued, "timeout"))
            if via is not None:
                self.cached_base = None
            return None
        self.cached_base = result.base_node
        self.resolutions.append(Resolution(issued, "ok", result))
        return result

    def connect_process(self, uid: UID, peer_name: str = None):
        """Resolve the peer, open an association to its primary locator and keep re-querying."""
        result = yield from self.resolve_once(uid)
        if result is None:
            return None
        try:
            self.association = yield from self.transport.initiate_process(result.tls[0], peer_name or uid.name)
        except InitTimeout as e:
            logger.warning(f"[{self.sim.now}ms] {self.name}: {e}, locator may be stale")
            return None
        self.sim.process(self._requery(uid))
        return self.association

    def _requery(self, uid: UID):
        while True:
            yield self.sim.timeout(self.requery_period_ms)
            via = self.cached_base if self.use_cached_base else None
            yield from self.resolve_once(uid, via=via)
