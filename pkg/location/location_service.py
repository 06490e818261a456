import itertools
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple, Union

from location.messages import REPLY_KINDS, LocationMessage, MessageKind
from location.soft_state import LocationTable, LocatorRecord, RedirectEntry
from overlay.chord import ChordOverlay, LookupTimeout, RingNode, closest_preceding_finger, in_interval
from overlay.ident import TL, UID, NodeId, hash_to_id

logger = logging.getLogger(__name__)


class PublishFailed(RuntimeError):
    pass


class NotFound(LookupError):
    pass


class StalePhase(RuntimeError):
    pass


class HandoverPhase(str, Enum):
    ENTER_OVERLAP = "enter-overlap"
    SWITCH_PRIMARY = "switch-primary"
    LEAVE_OVERLAP = "leave-overlap"


NEXT_PHASE = {
    None: HandoverPhase.ENTER_OVERLAP,
    HandoverPhase.ENTER_OVERLAP: HandoverPhase.SWITCH_PRIMARY,
    HandoverPhase.SWITCH_PRIMARY: HandoverPhase.LEAVE_OVERLAP,
    HandoverPhase.LEAVE_OVERLAP: HandoverPhase.ENTER_OVERLAP,
}


@dataclass
class ResolveResult:
    tls: List[TL]
    base_node: NodeId
    hops: int
    latency_ms: int
    via_pointer: bool = False
    via_redirect: bool = False


@dataclass
class Registration:
    """What a publishing host remembers about its own record."""
    uid: UID
    base_node: NodeId
    tls: List[TL]
    phase: Optional[HandoverPhase] = None
    previous_base: Optional[NodeId] = None
    history: List[NodeId] = field(default_factory=list)


def _endpoint(handle) -> Tuple[str, RingNode]:
    """(reply address, first-hop ring node) of a ring member or an attached host."""
    if isinstance(handle, RingNode):
        return handle.address.address, handle
    return handle.reply_address, handle.entry


def _locators(handle) -> List[TL]:
    if isinstance(handle, RingNode):
        return [handle.address]
    return list(handle.tls)


class LocationService:
    """UID -> TL records at base nodes, successor pointers, redirects and the client side of all three."""

    def __init__(self, overlay: ChordOverlay, record_ttl_ms: int = 30000, pointer_ttl_ms: int = 15000,
                 redirect_ttl_ms: int = 30000, pointer_fanout: int = 3, pointers_enabled: bool = True,
                 purge_period_ms: int = 1000):
        if pointer_fanout > overlay.r:
            raise ValueError(f"pointer fan-out {pointer_fanout} exceeds successor list length {overlay.r}")
        self.overlay = overlay
        self.sim = overlay.sim
        self.record_ttl_ms = record_ttl_ms
        self.pointer_ttl_ms = pointer_ttl_ms
        self.redirect_ttl_ms = redirect_ttl_ms
        self.pointer_fanout = pointer_fanout
        self.pointers_enabled = pointers_enabled
        self.purge_period_ms = purge_period_ms

        self.tables: Dict[NodeId, LocationTable] = {}
        self.registrations: Dict[UID, Registration] = {}
        self._pending: Dict[int, object] = {}
        self._ids = itertools.count()
        self._purger = None
        overlay.register_handler(LocationMessage, self._on_message)

    def table(self, node_id: NodeId) -> LocationTable:
        return self.tables.setdefault(node_id, LocationTable())

    def key_of(self, uid: UID) -> NodeId:
        return hash_to_id(uid, self.overlay.m)

    def start(self):
        """Run expire() periodically on the simulator clock."""
        if self._purger is None:
            self._purger = self.sim.process(self._purge_loop())

    def _purge_loop(self):
        while True:
            yield self.sim.timeout(self.purge_period_ms)
            purged = self.expire(self.sim.now)
            if purged:
                logger.debug(f"[{self.sim.now}ms] purged {purged} soft-state entries")

    def expire(self, now: int) -> int:
        return sum(table.expire(now) for table in self.tables.values())

    # ---- base-node side -----------------------------------------------------------

    def _on_message(self, node: RingNode, src: str, msg: LocationMessage):
        if msg.kind in REPLY_KINDS:
            self.on_reply(msg)
        elif msg.kind in (MessageKind.PUBLISH, MessageKind.UPDATE):
            self._accept_record(node, msg)
        elif msg.kind == MessageKind.QUERY:
            self._handle_query(node, msg)
        elif msg.kind == MessageKind.QUERY_REDIRECT:
            table = self.table(node.id)
            expires_at = self.sim.now + self.redirect_ttl_ms
            table.install_redirect(RedirectEntry(msg.uid, msg.key, msg.base_node, expires_at))
            stale = table.records.get(msg.uid)
            if stale is not None:
                # the old record never outlives the redirect that hides it
                stale.expires_at = max(stale.published_at + 1, min(stale.expires_at, expires_at))
            logger.debug(f"[{self.sim.now}ms] {node.id} redirects {msg.uid} to {msg.base_node}")
        elif msg.kind == MessageKind.POINTER_INSTALL:
            self.table(node.id).install_pointer(msg.key, msg.base_node, self.sim.now + self.pointer_ttl_ms)

    def _accept_record(self, node: RingNode, msg: LocationMessage):
        now = self.sim.now
        table = self.table(node.id)
        # an update for an unknown UID is taken as a fresh publish
        table.store_record(LocatorRecord(msg.uid, msg.key, list(msg.tls), msg.tls[0], now, now + self.record_ttl_ms))
        self._install_pointers(node, msg.key)
        if msg.previous_base is not None and msg.previous_base != node.id:
            redirect = LocationMessage(MessageKind.QUERY_REDIRECT, next(self._ids), msg.uid, msg.key,
                                       node.address.address, base_node=node.id)
            self.sim.transmit(node.address.address, self.overlay.node(msg.previous_base).address.address, redirect)
        ack = MessageKind.PUBLISH_ACK if msg.kind == MessageKind.PUBLISH else MessageKind.UPDATE_ACK
        self.sim.transmit(node.address.address, msg.origin,
                          LocationMessage(ack, msg.msg_id, msg.uid, msg.key, msg.origin, base_node=node.id))

    def _install_pointers(self, node: RingNode, key: NodeId):
        targets = [s for s in node.successor_list if s != node.id][:self.pointer_fanout]
        for target in targets:
            install = LocationMessage(MessageKind.POINTER_INSTALL, next(self._ids), None, key,
                                      node.address.address, base_node=node.id)
            self.sim.transmit(node.address.address, self.overlay.node(target).address.address, install)

    def _handle_query(self, node: RingNode, msg: LocationMessage):
        now = self.sim.now
        table = self.table(node.id)
        redirect = table.redirect(msg.uid, now)
        if redirect is not None and redirect.new_base != node.id:
            msg.via_redirect = True
            self._forward(node, msg, redirect.new_base)
            return
        record = table.record(msg.uid, now)
        if record is not None:
            reply = LocationMessage(MessageKind.TL_REPLY, msg.msg_id, msg.uid, msg.key, msg.origin,
                                    tls=list(record.tls), base_node=node.id, hops=msg.hops,
                                    via_pointer=msg.via_pointer, via_redirect=msg.via_redirect)
            self.sim.transmit(node.address.address, msg.origin, reply)
            return
        pointer = table.pointer(msg.key, now) if self.pointers_enabled else None
        if pointer is not None and pointer.base_node != node.id and self.overlay.is_alive(pointer.base_node):
            msg.via_pointer = True
            self._forward(node, msg, pointer.base_node)
            return

        pred = node.predecessor
        if pred is not None and self.overlay.is_alive(pred) and in_interval(msg.key, pred, node.id,
                                                                               include_right=True):
            miss = LocationMessage(MessageKind.TL_REPLY, msg.msg_id, msg.uid, msg.key, msg.origin,
                                   base_node=node.id, hops=msg.hops, found=False)
            self.sim.transmit(node.address.address, msg.origin, miss)
            return
        succ = self.overlay.first_live_successor(node)
        if in_interval(msg.key, node.id, succ, include_right=True):
            self._forward(node, msg, succ)
            return
        nxt = closest_preceding_finger(node, msg.key, usable=self.overlay.is_alive)
        self._forward(node, msg, succ if nxt == node.id else nxt)

    def _forward(self, node: RingNode, msg: LocationMessage, next_hop: NodeId):
        if msg.hops >= self.overlay.hop_cap:
            logger.warning(f"[{self.sim.now}ms] query for {msg.uid} dropped at {node.id}: hop cap reached")
            return
        msg.hops += 1
        self.sim.transmit(node.address.address, self.overlay.node(next_hop).address.address, msg)

    # ---- client side ---------------------------------------------------------------

    def on_reply(self, msg: LocationMessage):
        waiter = self._pending.pop(msg.msg_id, None)
        if waiter is not None and not waiter.triggered:
            waiter.succeed(msg)

    def _request(self, src: str, target: NodeId, build, deadline_at: int):
        """Send build(msg_id) to target, retrying on timeout; yields the reply or None."""
        for _ in range(1 + self.overlay.rpc_retries):
            wait = min(self.overlay.rpc_timeout_ms, deadline_at - self.sim.now)
            if wait <= 0 or target not in self.overlay.nodes:
                return None
            msg = build(next(self._ids))
            waiter = self.sim.event()
            self._pending[msg.msg_id] = waiter
            self.sim.transmit(src, self.overlay.node(target).address.address, msg)
            yield waiter | self.sim.timeout(wait)
            self._pending.pop(msg.msg_id, None)
            if waiter.triggered:
                return waiter.value
        return None

    def _store_process(self, src: str, entry: RingNode, uid: UID, tls: List[TL], kind: MessageKind,
                       target: Optional[NodeId] = None, previous_base: NodeId = None):
        key = self.key_of(uid)
        deadline_at = self.sim.now + self.overlay.deadline_ms
        if target is None:
            try:
                found = yield from self.overlay.lookup_process(src, entry, key, deadline_at)
            except LookupTimeout as e:
                raise PublishFailed(f"no base node found for {uid}: {e}") from e
            candidates = found.candidates
        else:
            candidates = [target]
        for candidate in candidates:
            reply = yield from self._request(
                src, candidate,
                lambda msg_id: LocationMessage(kind, msg_id, uid, key, src, tls=list(tls),
                                               previous_base=previous_base),
                deadline_at)
            if reply is not None:
                return reply.base_node
        return None

    def publish_process(self, mn, uid: UID, tls: Union[TL, Sequence[TL]], src: str = None,
                        previous_base: NodeId = None):
        tls = [tls] if isinstance(tls, TL) else list(tls)
        reply_address, entry = _endpoint(mn)
        src = src or reply_address
        base = yield from self._store_process(src, entry, uid, tls, MessageKind.PUBLISH,
                                              previous_base=previous_base)
        if base is None:
            raise PublishFailed(f"no base node acknowledged {uid}")
        registration = self.registrations.get(uid)
        if registration is None:
            registration = self.registrations[uid] = Registration(uid, base, tls)
        registration.base_node, registration.tls = base, tls
        registration.history.append(base)
        logger.debug(f"[{self.sim.now}ms] {uid} published at {base} with {[str(t) for t in tls]}")
        return base

    def refresh_process(self, mn, uid: UID, src: str = None):
        registration = self.registrations.get(uid)
        if registration is None:
            return (yield from self.publish_process(mn, uid, _locators(mn), src))
        reply_address, entry = _endpoint(mn)
        src = src or reply_address
        base = yield from self._store_process(src, entry, uid, registration.tls, MessageKind.UPDATE,
                                              target=registration.base_node)
        if base is not None:
            return base
        logger.warning(f"[{self.sim.now}ms] {registration.base_node} did not acknowledge refresh of {uid}, "
                       f"locating another base node")
        return (yield from self.publish_process(mn, uid, registration.tls, src))

    def resolve_process(self, cn, uid: UID, via: NodeId = None):
        key = self.key_of(uid)
        reply_address, entry = _endpoint(cn)
        started = self.sim.now
        deadline_at = started + self.overlay.deadline_ms
        if via is not None:
            first_hops = [via]
        elif isinstance(cn, RingNode):
            first_hops = list(cn.successor_list)
        else:
            first_hops = [entry.id]

        attempt = 0
        while self.sim.now < deadline_at:
            first = first_hops[attempt % len(first_hops)]
            attempt += 1
            if first not in self.overlay.nodes:
                break
            msg_id = next(self._ids)
            waiter = self.sim.event()
            self._pending[msg_id] = waiter
            self.sim.transmit(reply_address, self.overlay.node(first).address.address,
                              LocationMessage(MessageKind.QUERY, msg_id, uid, key, reply_address, hops=1))
            yield waiter | self.sim.timeout(min(self.overlay.rpc_timeout_ms, deadline_at - self.sim.now))
            self._pending.pop(msg_id, None)
            if not waiter.triggered:
                continue
            reply = waiter.value
            if not reply.found:
                raise NotFound(f"{uid} has no record (asked {reply.base_node})")
            return ResolveResult(reply.tls, reply.base_node, reply.hops, self.sim.now - started,
                                 reply.via_pointer, reply.via_redirect)
        raise LookupTimeout(f"resolve of {uid} missed the {self.overlay.deadline_ms}ms deadline")

    def handover_update_process(self, mn, uid: UID, new_tl: TL, phase: HandoverPhase):
        phase = HandoverPhase(phase)
        registration = self.registrations.get(uid)
        if registration is None:
            raise StalePhase(f"{uid} has no published record to hand over")
        if NEXT_PHASE[registration.phase] != phase:
            raise StalePhase(f"{uid}: {phase.value} cannot follow {registration.phase}")
        old_primary = registration.tls[0]

        if phase == HandoverPhase.ENTER_OVERLAP:
            tls = [old_primary, new_tl]
            base = yield from self._update(mn, registration, tls, old_primary.address)
        elif phase == HandoverPhase.SWITCH_PRIMARY:
            bn1 = registration.base_node
            tls = [new_tl] + [t for t in registration.tls if t != new_tl]
            base = yield from self.publish_process(mn, uid, tls, src=new_tl.address, previous_base=bn1)
            registration.previous_base = bn1
            if base == bn1:
                logger.info(f"[{self.sim.now}ms] {uid}: same base node {base} in both networks, record updated")
            else:
                logger.info(f"[{self.sim.now}ms] {uid}: base node {bn1} -> {base}, redirect installed")
        else:
            tls = [new_tl]
            base = yield from self._update(mn, registration, tls, new_tl.address)
        registration.phase = phase
        return base

    def _update(self, mn, registration: Registration, tls: List[TL], src: str):
        registration.tls = tls
        _, entry = _endpoint(mn)
        base = yield from self._store_process(src, entry, registration.uid, tls, MessageKind.UPDATE,
                                              target=registration.base_node)
        if base is None:
            base = yield from self.publish_process(mn, registration.uid, tls, src)
        return base

    # synchronous front-ends

    def publish(self, mn, uid: UID, tl: Union[TL, Sequence[TL]]) -> NodeId:
        return self.sim.run_process(self.sim.process(self.publish_process(mn, uid, tl)))

    def refresh(self, mn, uid: UID) -> NodeId:
        return self.sim.run_process(self.sim.process(self.refresh_process(mn, uid)))

    def resolve(self, cn, uid: UID, via: NodeId = None) -> ResolveResult:
        return self.sim.run_process(self.sim.process(self.resolve_process(cn, uid, via)))

    def handover_update(self, mn, uid: UID, new_tl: TL, phase: HandoverPhase) -> NodeId:
        return self.sim.run_process(self.sim.process(self.handover_update_process(mn, uid, new_tl, phase)))
