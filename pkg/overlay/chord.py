import itertools
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Any, Callable, Dict, FrozenSet, Iterable, List, Optional, Sequence

from overlay.ident import TL, NodeId, hash_to_id
from overlay.store import KeyValueStore
from world.simulator import NetworkSimulator

logger = logging.getLogger(__name__)

BACKBONE_NETWORK = 0


class LookupTimeout(TimeoutError):
    pass


class JoinFailed(RuntimeError):
    pass


class OverlayKind(str, Enum):
    FIND_SUCCESSOR = "FIND_SUCCESSOR"
    FIND_REPLY = "FIND_REPLY"
    STORE = "STORE"
    STORE_ACK = "STORE_ACK"
    FETCH = "FETCH"
    FETCH_REPLY = "FETCH_REPLY"
    PING = "PING"
    PING_ACK = "PING_ACK"


REPLY_KIND = {
    OverlayKind.FIND_SUCCESSOR: OverlayKind.FIND_REPLY,
    OverlayKind.STORE: OverlayKind.STORE_ACK,
    OverlayKind.FETCH: OverlayKind.FETCH_REPLY,
    OverlayKind.PING: OverlayKind.PING_ACK,
}


@dataclass
class OverlayMessage:
    kind: OverlayKind
    rpc_id: int
    origin: str
    key: NodeId
    value: Optional[bytes] = None
    payload: Any = None


@dataclass
class FingerEntry:
    start: NodeId
    node: NodeId


@dataclass
class FindReply:
    """Answer of one routing step: either the key's successor list or closer candidates."""
    done: bool
    candidates: List[NodeId]


@dataclass
class LookupResult:
    node: NodeId
    candidates: List[NodeId]
    hops: int
    latency_ms: int


@dataclass
class QueryResult:
    node: NodeId
    values: FrozenSet[bytes]
    hops: int
    latency_ms: int


class RingNode:
    def __init__(self, node_id: NodeId, address: TL, overlay: "ChordOverlay"):
        self.id = node_id
        self.address = address
        self.overlay = overlay
        self.fingers: List[FingerEntry] = [FingerEntry(node_id + (1 << k), node_id) for k in range(node_id.bits)]
        self.successor_list: List[NodeId] = [node_id]
        self.predecessor: Optional[NodeId] = None
        self.store = KeyValueStore()
        self.alive = False
        self.next_finger = 0

    @property
    def successor(self) -> NodeId:
        return self.successor_list[0]

    def __repr__(self):
        state = "up" if self.alive else "down"
        return f"RingNode({self.id}, {self.address}, succ={self.successor}, pred={self.predecessor}, {state})"


def in_interval(x: NodeId, a: NodeId, b: NodeId,
                include_left: bool = False, include_right: bool = False) -> bool:
    """Circular interval test from a clockwise to b with the given closures."""
    if x.bits != a.bits or a.bits != b.bits:
        raise ValueError("identifiers from different circles")
    if x == a:
        return include_left or (a == b and include_right)
    if x == b:
        return include_right
    if a == b:
        return True
    return a.distance_to(x) < a.distance_to(b)


def preceding_fingers(node: RingNode, id: NodeId,
                      usable: Callable[[NodeId], bool] = None) -> List[NodeId]:
    """Distinct finger nodes strictly inside (node.id, id), closest to id first."""
    seen = []
    for entry in reversed(node.fingers):
        candidate = entry.node
        if candidate in seen or not in_interval(candidate, node.id, id):
            continue
        if usable is not None and not usable(candidate):
            continue
        seen.append(candidate)
    return seen


def closest_preceding_finger(node: RingNode, id: NodeId,
                             usable: Callable[[NodeId], bool] = None) -> NodeId:
    candidates = preceding_fingers(node, id, usable)
    return candidates[0] if candidates else node.id


class ChordOverlay:
    """The identifier circle of one simulation: membership, maintenance and networked queries."""

    def __init__(self, sim: NetworkSimulator, m: int, successor_list_len: int = 4,
                 rpc_timeout_ms: int = 1000, rpc_retries: int = 2, deadline_ms: int = 5000):
        if successor_list_len < 1:
            raise ValueError("successor list needs at least one entry")
        self.sim = sim
        self.m = m
        self.r = successor_list_len
        self.rpc_timeout_ms = rpc_timeout_ms
        self.rpc_retries = rpc_retries
        self.deadline_ms = deadline_ms
        self.hop_cap = 2 * m

        self.nodes: Dict[NodeId, RingNode] = {}
        self._handlers: Dict[type, Callable[[RingNode, str, Any], None]] = {}
        self._pending: Dict[int, Any] = {}
        self._rpc_ids = itertools.count()
        self._hosts = itertools.count(1)

    # ---- membership ---------------------------------------------------------

    def new_node(self, node_id: NodeId) -> RingNode:
        """Create a (not yet joined) node with a fresh backbone address."""
        if node_id.bits != self.m:
            raise ValueError(f"{node_id} is not on a {self.m}-bit circle")
        if node_id in self.nodes and self.nodes[node_id].alive:
            raise ValueError(f"{node_id} is already a live member")
        host = next(self._hosts)
        address = TL(f"10.0.{host // 250}.{host % 250 + 1}", BACKBONE_NETWORK)
        node = RingNode(node_id, address, self)
        self.nodes[node_id] = node
        return node

    def spawn_ids(self, count: int, prefix: str = None) -> List[NodeId]:
        """Distinct ids for count peers, hashed from synthetic names that carry the simulator seed."""
        if prefix is None:
            prefix = f"peer:seed-{self.sim.seed}"
        ids, taken = [], {nid for nid, n in self.nodes.items() if n.alive}
        index = 0
        while len(ids) < count:
            candidate = hash_to_id(f"{prefix}:{index}", self.m)
            index += 1
            if candidate not in taken:
                taken.add(candidate)
                ids.append(candidate)
            if index > count * 64 + (1 << min(self.m, 20)):
                raise ValueError(f"cannot place {count} peers on a {self.m}-bit circle")
        return ids

    def populate(self, ids: Iterable[NodeId], stabilize_rounds: int = None) -> List[RingNode]:
        """Join ids one after another through the first member, then stabilize."""
        joined = []
        for node_id in ids:
            node = self.new_node(node_id)
            bootstrap = joined[0].id if joined else self._any_live()
            self.join(node, bootstrap)
            joined.append(node)
        rounds = self.m + 4 if stabilize_rounds is None else stabilize_rounds
        self.stabilize(rounds)
        return joined

    def register_handler(self, message_type: type, handler: Callable[[RingNode, str, Any], None]):
        self._handlers[message_type] = handler

    def node(self, node_id: NodeId) -> RingNode:
        return self.nodes[node_id]

    def is_alive(self, node_id: NodeId) -> bool:
        node = self.nodes.get(node_id)
        return node is not None and node.alive

    def live_ids(self) -> List[NodeId]:
        return sorted(nid for nid, node in self.nodes.items() if node.alive)

    def live_nodes(self) -> List[RingNode]:
        return [self.nodes[nid] for nid in self.live_ids()]

    def _any_live(self) -> Optional[NodeId]:
        live = self.live_ids()
        return live[0] if live else None

    def oracle_successor(self, id: NodeId) -> NodeId:
        """Linear scan over live membership."""
        live = self.live_ids()
        if not live:
            raise LookupError("empty ring")
        return min(live, key=lambda nid: id.distance_to(nid))

    # ---- join / depart --------------------------------------------------------

    def join(self, new: RingNode, bootstrap: Optional[NodeId], fallbacks: Sequence[NodeId] = ()) -> bool:
        """Join through bootstrap; fallbacks are tried next, 1 + rpc_retries contacts in total."""
        if bootstrap is None:
            if self.live_ids():
                raise JoinFailed(f"{new.id}: ring is not empty, a bootstrap node is required")
            new.successor_list = [new.id]
            new.predecessor = None
            for entry in new.fingers:
                entry.node = new.id
            self._bring_up(new)
            logger.debug(f"{new.id} started a new ring")
            return True

        contacts = [bootstrap] + [b for b in fallbacks if b != bootstrap]
        attempts = contacts[:1 + self.rpc_retries]
        boot_id = next((b for b in attempts if self.is_alive(b)), None)
        if boot_id is None:
            raise JoinFailed(f"{new.id}: no bootstrap answered after {len(attempts)} attempts "
                             f"({', '.join(str(b) for b in attempts)})")
        if boot_id != bootstrap:
            logger.debug(f"{new.id}: bootstrap {bootstrap} unreachable, joining through {boot_id}")
        boot = self.nodes[boot_id]
        succ = self.nodes[self.lookup_local(boot, new.id)[0]]
        pred_id = succ.predecessor if succ.predecessor is not None and self.is_alive(succ.predecessor) else None
        if pred_id is None:
            pred_id = self._walk_to_predecessor(succ)

        new.successor_list = self._successor_list_for(new, succ)
        new.predecessor = pred_id
        succ.predecessor = new.id
        pred = self.nodes[pred_id]
        if in_interval(new.id, pred.id, pred.successor) or not self.is_alive(pred.successor):
            pred.successor_list = self._successor_list_for(pred, new)
        self._bring_up(new)

        self._init_fingers(new, boot)
        moved = succ.store.pop_range(lambda key: not in_interval(key, new.id, succ.id, include_right=True))
        new.store.merge(moved)
        logger.debug(f"{new.id} joined between {pred_id} and {succ.id}, took {len(moved)} keys")
        return True

    def _walk_to_predecessor(self, node: RingNode) -> NodeId:
        """Live node whose first live successor is node (maintenance-time knowledge)."""
        others = [nid for nid in self.live_ids() if nid != node.id]
        return min(others, key=lambda nid: nid.distance_to(node.id)) if others else node.id

    def _bring_up(self, node: RingNode):
        node.alive = True
        self.sim.attach(node.address.address, node.address.network_id,
                        lambda src, dst, msg, node=node: self._receive(node, src, msg))

    def _init_fingers(self, new: RingNode, boot: RingNode):
        new.fingers[0].node = new.successor
        for k in range(1, self.m):
            entry, previous = new.fingers[k], new.fingers[k - 1]
            if in_interval(entry.start, new.id, previous.node, include_right=True):
                entry.node = previous.node
            else:
                entry.node = self.lookup_local(boot, entry.start)[0]

    def depart(self, node: RingNode, graceful: bool) -> bool:
        if not node.alive:
            return True
        if graceful:
            succ_id = self.first_live_successor(node)
            if succ_id != node.id:
                succ = self.nodes[succ_id]
                succ.store.merge(node.store.pop_all())
                if succ.predecessor == node.id:
                    succ.predecessor = node.predecessor if node.predecessor != node.id else None
                if node.predecessor is not None and self.is_alive(node.predecessor):
                    pred = self.nodes[node.predecessor]
                    pred.successor_list = self._successor_list_for(pred, succ)
        node.alive = False
        self.sim.detach(node.address.address)
        logger.debug(f"{node.id} departed ({'graceful' if graceful else 'failure'})")
        return True

    # ---- maintenance -----------------------------------------------------------

    def first_live_successor(self, node: RingNode) -> NodeId:
        for candidate in node.successor_list:
            if candidate != node.id and self.is_alive(candidate):
                return candidate
        fallback = sorted((e.node for e in node.fingers if e.node != node.id and self.is_alive(e.node)),
                          key=node.id.distance_to)
        return fallback[0] if fallback else node.id

    def _successor_list_for(self, node: RingNode, succ: RingNode) -> List[NodeId]:
        entries = []
        for candidate in [succ.id] + succ.successor_list:
            if candidate == node.id or candidate in entries:
                continue
            entries.append(candidate)
            if len(entries) == self.r:
                break
        return entries or [node.id]

    def _notify(self, succ: RingNode, node: RingNode):
        pred = succ.predecessor
        if pred is None or not self.is_alive(pred) or in_interval(node.id, pred, succ.id):
            succ.predecessor = node.id

    def stabilize_round(self, node: RingNode) -> bool:
        """Verify successor, notify it, refresh the successor list and repair one finger."""
        if not node.alive:
            return False
        succ = self.nodes[self.first_live_successor(node)]
        x = succ.predecessor
        if x is not None and x != node.id and self.is_alive(x) and in_interval(x, node.id, succ.id):
            succ = self.nodes[x]
        if succ.id != node.id:
            self._notify(succ, node)
        node.successor_list = self._successor_list_for(node, succ) if succ.id != node.id else [node.id]
        if node.predecessor is not None and not self.is_alive(node.predecessor):
            node.predecessor = None

        k = node.next_finger
        node.next_finger = (k + 1) % self.m
        node.fingers[k].node = self.lookup_local(node, node.fingers[k].start)[0]
        return True

    def stabilize(self, rounds: int):
        for _ in range(rounds):
            for node in self.live_nodes():
                self.stabilize_round(node)

    def perturb_fingers(self, fraction: float, rng) -> int:
        """Point a fraction of all finger entries at a wrong live node."""
        live = self.live_ids()
        if fraction <= 0 or len(live) < 2:
            return 0
        entries = [entry for node in self.live_nodes() for entry in node.fingers]
        count = int(round(fraction * len(entries)))
        for index in sorted(rng.choice(len(entries), size=count, replace=False)):
            entry = entries[int(index)]
            others = [nid for nid in live if nid != entry.node]
            entry.node = others[int(rng.integers(len(others)))]
        logger.info(f"perturbed {count} of {len(entries)} finger entries")
        return count

    def lookup_local(self, start: RingNode, id: NodeId) -> tuple:
        """Instantaneous routing over current state; returns (successor, hops)."""
        node, hops = start, 0
        for _ in range(len(self.nodes) + self.m + 1):
            succ = self.first_live_successor(node)
            if in_interval(id, node.id, succ, include_right=True):
                return succ, hops
            nxt = closest_preceding_finger(node, id, usable=self.is_alive)
            if nxt == node.id:
                # no finger is closer, walk the successor pointer
                nxt = succ
            node, hops = self.nodes[nxt], hops + 1
        raise LookupError(f"maintenance routing for {id} did not converge")

    # ---- networked queries -------------------------------------------------------

    def answer(self, node: RingNode, key: NodeId) -> FindReply:
        """One iterative routing step as seen from node's own tables."""
        succs = list(node.successor_list)
        if in_interval(key, node.id, succs[0], include_right=True):
            return FindReply(True, succs)
        closer = preceding_fingers(node, key)
        closer += [s for s in succs if in_interval(s, node.id, key) and s not in closer]
        if not closer:
            return FindReply(True, succs)
        return FindReply(False, closer)

    def _receive(self, node: RingNode, src: str, msg: Any):
        if not node.alive:
            return
        if isinstance(msg, OverlayMessage):
            if msg.kind in REPLY_KIND:
                self._serve(node, msg)
            else:
                self.on_reply(msg)
            return
        handler = self._handlers.get(type(msg))
        if handler is None:
            logger.warning(f"{node.id} has no handler for {type(msg).__name__}")
            return
        handler(node, src, msg)

    def _serve(self, node: RingNode, msg: OverlayMessage):
        if msg.kind == OverlayKind.FIND_SUCCESSOR:
            payload = self.answer(node, msg.key)
        elif msg.kind == OverlayKind.STORE:
            node.store.put(msg.key, msg.value, self.sim.now)
            payload = True
        elif msg.kind == OverlayKind.PING:
            payload = True
        else:
            payload = node.store.get(msg.key)
        reply = OverlayMessage(REPLY_KIND[msg.kind], msg.rpc_id, node.address.address, msg.key, payload=payload)
        self.sim.transmit(node.address.address, msg.origin, reply)

    def on_reply(self, msg: OverlayMessage):
        waiter = self._pending.pop(msg.rpc_id, None)
        if waiter is not None and not waiter.triggered:
            waiter.succeed(msg.payload)

    def rpc(self, querier: str, target: NodeId, kind: OverlayKind, key: NodeId,
            deadline_at: int, value: bytes = None):
        """Request/response with per-attempt timeout; yields None when target never answered."""
        node = self.nodes.get(target)
        if node is None:
            return None
        for attempt in range(1 + self.rpc_retries):
            wait = min(self.rpc_timeout_ms, deadline_at - self.sim.now)
            if wait <= 0:
                return None
            rpc_id = next(self._rpc_ids)
            waiter = self.sim.event()
            self._pending[rpc_id] = waiter
            self.sim.transmit(querier, node.address.address, OverlayMessage(kind, rpc_id, querier, key, value))
            yield waiter | self.sim.timeout(wait)
            self._pending.pop(rpc_id, None)
            if waiter.triggered:
                return waiter.value
            logger.debug(f"[{self.sim.now}ms] {kind.value} to {target} timed out (attempt {attempt + 1})")
        return None

    def lookup_process(self, querier: str, entry: RingNode, key: NodeId, deadline_at: int = None,
                       verify: bool = False):
        """Iterative lookup driven by the querier; generator for sim.process.

        With verify the answer is pinged first and dead successor-list entries are skipped.
        """
        started = self.sim.now
        if deadline_at is None:
            deadline_at = started + self.deadline_ms
        hops = 0
        avoid = set()
        if entry.address.address == querier and entry.alive:
            replies = [self.answer(entry, key)]
        else:
            replies = [FindReply(False, [entry.id])]

        while True:
            while replies and not any(c not in avoid for c in replies[-1].candidates):
                replies.pop()
            if not replies:
                raise LookupTimeout(f"no live route towards {key} after {hops} hops")
            reply = replies[-1]
            usable = [c for c in reply.candidates if c not in avoid]
            if reply.done:
                target = usable[0]
                if not verify or self.nodes[target].address.address == querier:
                    return LookupResult(target, usable, hops, self.sim.now - started)
                alive = yield from self.rpc(querier, target, OverlayKind.PING, key, deadline_at)
                if alive:
                    return LookupResult(target, usable, hops, self.sim.now - started)
                avoid.add(target)
                if self.sim.now >= deadline_at:
                    raise LookupTimeout(f"lookup for {key} missed the {self.deadline_ms}ms deadline")
                continue
            if hops >= self.hop_cap:
                raise LookupTimeout(f"lookup for {key} exceeded the {self.hop_cap}-hop cap")
            target = usable[0]
            answer = yield from self.rpc(querier, target, OverlayKind.FIND_SUCCESSOR, key, deadline_at)
            hops += 1
            if answer is None:
                avoid.add(target)
                if self.sim.now >= deadline_at:
                    raise LookupTimeout(f"lookup for {key} missed the {self.deadline_ms}ms deadline")
                continue
            replies.append(answer)

    def _at_responsible(self, querier: str, entry: RingNode, key: NodeId, kind: OverlayKind,
                        value: bytes = None):
        started = self.sim.now
        deadline_at = started + self.deadline_ms
        found = yield from self.lookup_process(querier, entry, key, deadline_at)
        hops = found.hops
        for candidate in found.candidates:
            payload = yield from self.rpc(querier, candidate, kind, key, deadline_at, value)
            hops += 1
            if payload is not None:
                values = frozenset() if kind == OverlayKind.STORE else payload
                return QueryResult(candidate, values, hops, self.sim.now - started)
            if self.sim.now >= deadline_at:
                break
        raise LookupTimeout(f"{kind.value} for {key} got no answer within {self.deadline_ms}ms")

    def put_process(self, querier: str, entry: RingNode, key: NodeId, value: bytes):
        return (yield from self._at_responsible(querier, entry, key, OverlayKind.STORE, bytes(value)))

    def get_process(self, querier: str, entry: RingNode, key: NodeId):
        return (yield from self._at_responsible(querier, entry, key, OverlayKind.FETCH))

    # synchronous front-ends: run the simulation until the query completes

    def find_successor(self, entry: RingNode, id: NodeId) -> LookupResult:
        if not entry.alive:
            raise LookupTimeout(f"entry node {entry.id} is down")
        return self.sim.run_process(self.sim.process(
            self.lookup_process(entry.address.address, entry, id, verify=True)))

    def put(self, origin: RingNode, key: NodeId, value: bytes) -> QueryResult:
        return self.sim.run_process(self.sim.process(
            self.put_process(origin.address.address, origin, key, value)))

    def get(self, origin: RingNode, key: NodeId) -> QueryResult:
        return self.sim.run_process(self.sim.process(
            self.get_process(origin.address.address, origin, key)))
