import itertools
import logging
from collections import deque
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Callable, Deque, Dict, List, Optional, Tuple

from overlay.ident import TL
from transport.latency import HandoverReport, LatencyModel, predicted_latency
from utils.trace import ChunkTrace
from world.simulator import NetworkSimulator

logger = logging.getLogger(__name__)


class InitTimeout(TimeoutError):
    pass


class AsconfTimeout(TimeoutError):
    pass


class AssociationError(RuntimeError):
    pass


class ChunkKind(str, Enum):
    INIT = "INIT"
    INIT_ACK = "INIT_ACK"
    COOKIE_ECHO = "COOKIE_ECHO"
    COOKIE_ACK = "COOKIE_ACK"
    DATA = "DATA"
    SACK = "SACK"
    ASCONF = "ASCONF"
    ASCONF_ACK = "ASCONF_ACK"
    SHUTDOWN = "SHUTDOWN"
    SHUTDOWN_ACK = "SHUTDOWN_ACK"


class AsconfOp(str, Enum):
    ADD_IP = "ADD_IP"
    DELETE_IP = "DELETE_IP"
    SET_PRIMARY = "SET_PRIMARY"


class AssociationState(str, Enum):
    CLOSED = "CLOSED"
    COOKIE_WAIT = "COOKIE_WAIT"
    COOKIE_ECHOED = "COOKIE_ECHOED"
    ESTABLISHED = "ESTABLISHED"
    SHUTDOWN = "SHUTDOWN"


@dataclass
class Chunk:
    kind: ChunkKind
    asconf_op: Optional[AsconfOp] = None
    payload_len: int = 0
    tsn: Optional[int] = None
    bundled: bool = False
    params: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if (self.asconf_op is not None) != (self.kind == ChunkKind.ASCONF):
            raise ValueError("asconf_op is set exactly on ASCONF chunks")


@dataclass
class SctpPacket:
    assoc_id: str
    chunks: List[Chunk]


class Association:
    """Transmission control block of one endpoint for one peer."""

    def __init__(self, transport: "SctpTransport", assoc_id: str, local_tls: List[TL],
                 peer_tls: List[TL] = None, initiator: bool = True):
        self.transport = transport
        self.assoc_id = assoc_id
        self.initiator = initiator
        self.local_tls: List[TL] = list(local_tls)
        self.peer_tls: List[TL] = list(peer_tls or [])
        self.local_primary = 0
        self.primary_path = 0
        self.state = AssociationState.CLOSED
        self.peer_name = "?"

        self.tsn_next = 1
        self.bytes_sent = 0
        self.bytes_delivered = 0
        self.bytes_received = 0
        self.pending_asconf: Deque[Chunk] = deque()
        self.paused = False
        self.backlog: Deque[Tuple[int, Any]] = deque()

        self.outstanding: Dict[int, Tuple[int, Any, int]] = {}
        self.abandoned: Dict[int, int] = {}
        self.received_tsns = set()
        self.deliveries: List[Tuple[int, int]] = []
        self.path_bytes: Dict[int, int] = {}
        self.asconf_waiters: Dict[int, Any] = {}
        self.established = transport.sim.event()

        # responder-side interface numbers, shared by both ends of the association
        self.numbers: Dict[str, int] = {}
        self._watch: Optional[Tuple[str, int, HandoverReport]] = None
        self._new_path_departures: Dict[int, Tuple[int, str, str]] = {}

    def __repr__(self):
        return (f"Association({self.assoc_id}, {self.state.value}, local={[str(t) for t in self.local_tls]}, "
                f"peer={[str(t) for t in self.peer_tls]})")

    @property
    def source(self) -> TL:
        return self.local_tls[self.local_primary]

    @property
    def destination(self) -> TL:
        return self.peer_tls[self.primary_path]

    def number(self, address: str) -> int:
        if address not in self.numbers:
            self.numbers[address] = len(self.numbers) + 1
        return self.numbers[address]

    def path_index(self, src: str, dst: str) -> Optional[int]:
        return self.numbers.get(src, self.numbers.get(dst))

    def paths(self) -> List[Tuple[TL, TL]]:
        """Primary path first, then every other (local, peer) combination."""
        primary = (self.source, self.destination)
        others = [(l, p) for l in self.local_tls for p in self.peer_tls if (l, p) != primary]
        return [primary] + others

    def path_for(self, attempt: int) -> Tuple[TL, TL]:
        candidates = self.paths()
        return candidates[attempt % len(candidates)]

    def add_local(self, tl: TL):
        if tl not in self.local_tls:
            self.local_tls.append(tl)

    def remove_local(self, tl: TL):
        current = self.source
        if tl in self.local_tls and len(self.local_tls) > 1:
            self.local_tls.remove(tl)
        self.local_primary = self.local_tls.index(current) if current in self.local_tls else 0

    def set_local_primary(self, tl: TL):
        self.local_primary = self.local_tls.index(tl)

    def add_peer(self, tl: TL):
        if tl not in self.peer_tls:
            self.peer_tls.append(tl)

    def remove_peer(self, tl: TL):
        current = self.destination
        if tl in self.peer_tls and len(self.peer_tls) > 1:
            self.peer_tls.remove(tl)
        self.primary_path = self.peer_tls.index(current) if current in self.peer_tls else 0

    def set_peer_primary(self, tl: TL):
        self.add_peer(tl)
        self.primary_path = self.peer_tls.index(tl)


class SctpTransport:
    """mSCTP endpoint of one host: handshake, multihomed DATA/SACK, DAR reconfiguration."""

    def __init__(self, sim: NetworkSimulator, name: str, trace: ChunkTrace = None,
                 rto_ms: int = 1000, max_retrans: int = 4, max_init_retries: int = 4):
        self.sim = sim
        self.name = name
        self.trace = trace
        self.rto_ms = rto_ms
        self.max_retrans = max_retrans
        self.max_init_retries = max_init_retries
        self.local_tls: List[TL] = []
        self.associations: Dict[str, Association] = {}
        self.on_association: Optional[Callable[[Association], None]] = None
        self._assoc_ids = itertools.count(1)
        self._serials = itertools.count(1)

    def bind(self, tl: TL, attach: bool = True):
        if tl not in self.local_tls:
            self.local_tls.append(tl)
        if attach:
            self.sim.attach(tl.address, tl.network_id, self.receive)

    def unbind(self, tl: TL, detach: bool = True):
        if tl in self.local_tls:
            self.local_tls.remove(tl)
        if detach:
            self.sim.detach(tl.address)

    # ---- wire ---------------------------------------------------------------------

    def _emit(self, assoc: Association, src: TL, dst: TL, chunks: List[Chunk]):
        if self.trace is not None:
            index = assoc.path_index(src.address, dst.address)
            for chunk in chunks:
                self.trace.record(self.sim.now, f"{self.name}->{assoc.peer_name}", chunk.kind.value,
                                  chunk.asconf_op.value if chunk.asconf_op else None,
                                  chunk.tsn, index, chunk.bundled)
        self.sim.transmit(src.address, dst.address, SctpPacket(assoc.assoc_id, chunks))

    def receive(self, src: str, dst: str, packet: SctpPacket):
        assoc = self.associations.get(packet.assoc_id)
        for chunk in packet.chunks:
            if chunk.kind == ChunkKind.INIT:
                self._on_init(src, dst, packet.assoc_id, chunk)
            elif chunk.kind == ChunkKind.COOKIE_ECHO:
                assoc = self._on_cookie_echo(src, dst, packet.assoc_id, chunk)
            elif assoc is None:
                logger.debug(f"[{self.sim.now}ms] {self.name}: {chunk.kind.value} for unknown association")
            else:
                self._dispatch(assoc, src, dst, chunk)

    def _dispatch(self, assoc: Association, src: str, dst: str, chunk: Chunk):
        src_tl, dst_tl = self._tl(assoc.peer_tls, src), self._tl(assoc.local_tls, dst)
        if chunk.kind == ChunkKind.INIT_ACK and assoc.state == AssociationState.COOKIE_WAIT:
            assoc.peer_tls = list(chunk.params["addresses"])
            for tl in assoc.peer_tls:
                assoc.number(tl.address)
            assoc.primary_path = assoc.peer_tls.index(src_tl) if src_tl in assoc.peer_tls else 0
            assoc.peer_name = chunk.params["name"]
            assoc.state = AssociationState.COOKIE_ECHOED
            self._emit(assoc, assoc.source, assoc.destination,
                       [Chunk(ChunkKind.COOKIE_ECHO, params={"cookie": chunk.params["cookie"]})])
        elif chunk.kind == ChunkKind.COOKIE_ACK and assoc.state == AssociationState.COOKIE_ECHOED:
            assoc.state = AssociationState.ESTABLISHED
            if not assoc.established.triggered:
                assoc.established.succeed(assoc)
            logger.debug(f"[{self.sim.now}ms] {self.name}: {assoc.assoc_id} established")
        elif chunk.kind == ChunkKind.DATA:
            self._on_data(assoc, src_tl, dst_tl, chunk)
        elif chunk.kind == ChunkKind.SACK:
            self._on_sack(assoc, chunk)
        elif chunk.kind == ChunkKind.ASCONF:
            self._on_asconf(assoc, src_tl, dst_tl, chunk)
        elif chunk.kind == ChunkKind.ASCONF_ACK:
            waiter = assoc.asconf_waiters.pop(chunk.params["serial"], None)
            if waiter is not None and not waiter.triggered:
                waiter.succeed(True)
        elif chunk.kind == ChunkKind.SHUTDOWN:
            assoc.state = AssociationState.CLOSED
            self._emit(assoc, dst_tl, src_tl, [Chunk(ChunkKind.SHUTDOWN_ACK)])
        elif chunk.kind == ChunkKind.SHUTDOWN_ACK and assoc.state == AssociationState.SHUTDOWN:
            assoc.state = AssociationState.CLOSED

    @staticmethod
    def _tl(candidates: List[TL], address: str) -> TL:
        for tl in candidates:
            if tl.address == address:
                return tl
        return TL(address, -1)

    # ---- association establishment ----------------------------------------------------

    def _on_init(self, src: str, dst: str, assoc_id: str, chunk: Chunk):
        # stateless until the cookie comes back
        local = self._tl(self.local_tls, dst)
        cookie = {"peer_tls": chunk.params["addresses"], "peer_name": chunk.params["name"], "local": local}
        reply = Chunk(ChunkKind.INIT_ACK, params={"addresses": list(self.local_tls), "name": self.name,
                                                  "cookie": cookie})
        stub = Association(self, assoc_id, self.local_tls, initiator=False)
        stub.peer_name = chunk.params["name"]
        for tl in self.local_tls:
            stub.number(tl.address)
        self._emit(stub, local, self._tl(chunk.params["addresses"], src), [reply])

    def _on_cookie_echo(self, src: str, dst: str, assoc_id: str, chunk: Chunk) -> Association:
        assoc = self.associations.get(assoc_id)
        if assoc is None:
            cookie = chunk.params["cookie"]
            assoc = Association(self, assoc_id, self.local_tls, cookie["peer_tls"], initiator=False)
            assoc.peer_name = cookie["peer_name"]
            for tl in assoc.local_tls:
                assoc.number(tl.address)
            if cookie["local"] in assoc.local_tls:
                assoc.local_primary = assoc.local_tls.index(cookie["local"])
            src_tl = self._tl(assoc.peer_tls, src)
            assoc.primary_path = assoc.peer_tls.index(src_tl) if src_tl in assoc.peer_tls else 0
            assoc.state = AssociationState.ESTABLISHED
            assoc.established.succeed(assoc)
            self.associations[assoc_id] = assoc
            logger.debug(f"[{self.sim.now}ms] {self.name}: accepted {assoc_id} from {assoc.peer_name}")
            self._emit(assoc, self._tl(assoc.local_tls, dst), self._tl(assoc.peer_tls, src), [Chunk(ChunkKind.COOKIE_ACK)])
            if self.on_association is not None:
                self.on_association(assoc)
            return assoc
        self._emit(assoc, self._tl(assoc.local_tls, dst), self._tl(assoc.peer_tls, src), [Chunk(ChunkKind.COOKIE_ACK)])
        return assoc

    def initiate_process(self, peer_tl: TL, peer_name: str = "?"):
        if not self.local_tls:
            raise AssociationError(f"{self.name} has no bound address")
        assoc = Association(self, f"{self.name}:{next(self._assoc_ids)}", self.local_tls, [peer_tl])
        assoc.peer_name = peer_name
        assoc.state = AssociationState.COOKIE_WAIT
        self.associations[assoc.assoc_id] = assoc
        init = Chunk(ChunkKind.INIT, params={"addresses": list(self.local_tls), "name": self.name})
        for attempt in range(1 + self.max_init_retries):
            if assoc.state == AssociationState.COOKIE_WAIT:
                self._emit(assoc, assoc.source, peer_tl, [init])
            yield assoc.established | self.sim.timeout(self.rto_ms * 2 ** attempt)
            if assoc.established.triggered:
                return assoc
            if assoc.state == AssociationState.COOKIE_ECHOED:
                # the COOKIE_ECHO or its ACK was lost; start over
                assoc.state = AssociationState.COOKIE_WAIT
        assoc.state = AssociationState.CLOSED
        del self.associations[assoc.assoc_id]
        raise InitTimeout(f"{self.name}: no answer from {peer_tl} after {1 + self.max_init_retries} INITs")

    def initiate(self, peer_tl: TL, peer_name: str = "?") -> Association:
        return self.sim.run_process(self.sim.process(self.initiate_process(peer_tl, peer_name)))

    # ---- data transfer -------------------------------------------------------------------

    def send_data(self, assoc: Association, payload_len: int):
        """Queue one DATA chunk; the returned event fires True on SACK, False if abandoned."""
        if payload_len <= 0:
            raise ValueError(f"payload length must be positive, got {payload_len}")
        if assoc.state != AssociationState.ESTABLISHED:
            raise AssociationError(f"{assoc.assoc_id} is {assoc.state.value}, data needs ESTABLISHED")
        waiter = self.sim.event()
        if assoc.paused:
            assoc.backlog.append((payload_len, waiter))
        else:
            self._start_data(assoc, payload_len, waiter)
        return waiter

    def _start_data(self, assoc: Association, payload_len: int, waiter):
        tsn = assoc.tsn_next
        assoc.tsn_next += 1
        assoc.bytes_sent += payload_len
        assoc.outstanding[tsn] = (payload_len, waiter, self.sim.now)
        self.sim.process(self._data_loop(assoc, Chunk(ChunkKind.DATA, payload_len=payload_len, tsn=tsn), waiter))

    def _data_loop(self, assoc: Association, chunk: Chunk, waiter):
        for attempt in range(1 + self.max_retrans):
            if assoc.state != AssociationState.ESTABLISHED:
                break
            src, dst = assoc.path_for(attempt)
            chunks = [chunk]
            if attempt == 0 and assoc.pending_asconf:
                carried = assoc.pending_asconf.popleft()
                carried.params["departed"] = True
                chunks.insert(0, replace(carried, bundled=True))
            if assoc._watch is not None and src.address == assoc._watch[0]:
                assoc._new_path_departures.setdefault(chunk.tsn, (self.sim.now, src.address, dst.address))
            self._emit(assoc, src, dst, chunks)
            yield waiter | self.sim.timeout(self.rto_ms * 2 ** attempt)
            if waiter.triggered:
                return
            logger.debug(f"[{self.sim.now}ms] {self.name}: T3 expired for TSN {chunk.tsn}, attempt {attempt + 1}")
        if not waiter.triggered:
            assoc.outstanding.pop(chunk.tsn, None)
            assoc.abandoned[chunk.tsn] = chunk.payload_len
            waiter.succeed(False)
            if assoc.state == AssociationState.ESTABLISHED:
                logger.warning(f"[{self.sim.now}ms] {self.name}: TSN {chunk.tsn} unreachable on all paths, aborting")
                assoc.state = AssociationState.CLOSED

    def _on_data(self, assoc: Association, src: TL, dst: TL, chunk: Chunk):
        if chunk.tsn not in assoc.received_tsns:
            assoc.received_tsns.add(chunk.tsn)
            assoc.bytes_received += chunk.payload_len
            assoc.deliveries.append((self.sim.now, assoc.bytes_received))
            index = assoc.path_index(src.address, dst.address) or 0
            assoc.path_bytes[index] = assoc.path_bytes.get(index, 0) + chunk.payload_len
        self._emit(assoc, dst, src, [Chunk(ChunkKind.SACK, tsn=chunk.tsn)])

    def _on_sack(self, assoc: Association, chunk: Chunk):
        entry = assoc.outstanding.pop(chunk.tsn, None)
        if entry is None:
            return
        payload_len, waiter, _ = entry
        assoc.bytes_delivered += payload_len
        if not waiter.triggered:
            waiter.succeed(True)
        departure = assoc._new_path_departures.get(chunk.tsn)
        if departure is not None and assoc._watch is not None:
            _, decided, report = assoc._watch
            if report.measured_latency is None:
                sent_at, src, dst = departure
                # departure of the first new-path chunk; arrival at the CN is arrival_latency
                report.measured_latency = sent_at - decided
                report.arrival_latency = report.measured_latency + self.sim.link(src, dst).model.one_way_latency

    # ---- dynamic address reconfiguration ---------------------------------------------------

    def _on_asconf(self, assoc: Association, src: TL, dst: TL, chunk: Chunk):
        address = chunk.params["address"]
        if chunk.asconf_op == AsconfOp.ADD_IP:
            assoc.add_peer(address)
            assoc.number(address.address)
        elif chunk.asconf_op == AsconfOp.SET_PRIMARY:
            assoc.set_peer_primary(address)
        else:
            assoc.remove_peer(address)
        logger.debug(f"[{self.sim.now}ms] {self.name}: {chunk.asconf_op.value} {address}")
        self._emit(assoc, dst, src, [Chunk(ChunkKind.ASCONF_ACK, params={"serial": chunk.params["serial"]})])

    def _asconf(self, assoc: Association, op: AsconfOp, tl: TL, bundled: bool, bundle_wait_ms: int):
        """One ASCONF request until acknowledged; yields False when the peer never answered."""
        serial = next(self._serials)
        chunk = Chunk(ChunkKind.ASCONF, asconf_op=op, params={"address": tl, "serial": serial})
        waiter = self.sim.event()
        assoc.asconf_waiters[serial] = waiter
        first_wait = self.rto_ms
        if bundled:
            assoc.pending_asconf.append(chunk)
            yield waiter | self.sim.timeout(bundle_wait_ms)
            if waiter.triggered:
                return True
            if chunk.params.get("departed"):
                first_wait = max(self.rto_ms - bundle_wait_ms, 1)
            else:
                # no DATA came along to carry it
                assoc.pending_asconf.remove(chunk)
                self._emit(assoc, assoc.source, assoc.destination, [chunk])
        else:
            self._emit(assoc, assoc.source, assoc.destination, [chunk])

        yield waiter | self.sim.timeout(first_wait)
        for attempt in range(1, 1 + self.max_retrans):
            if waiter.triggered:
                return True
            src, dst = assoc.path_for(attempt)
            self._emit(assoc, src, dst, [replace(chunk, bundled=False)])
            yield waiter | self.sim.timeout(self.rto_ms * 2 ** attempt)
        return waiter.triggered

    def _resume(self, assoc: Association):
        assoc.paused = False
        while assoc.backlog:
            payload_len, waiter = assoc.backlog.popleft()
            self._start_data(assoc, payload_len, waiter)

    def handover_process(self, assoc: Association, new_tl: TL, model: LatencyModel, bundle_wait_ms: int = 20):
        report = HandoverReport(measured_latency=None, arrival_latency=None,
                                predicted_latency=predicted_latency(model), bundled=model.bundling)
        if assoc.state != AssociationState.ESTABLISHED:
            raise AssociationError(f"{assoc.assoc_id} is {assoc.state.value}, cannot hand over")
        old = assoc.source
        if new_tl == old:
            return HandoverReport(predicted_latency=report.predicted_latency, bundled=model.bundling)
        if new_tl in assoc.local_tls:
            raise AssociationError(f"{new_tl} is already part of {assoc.assoc_id}")

        decided = self.sim.now
        report.switched_at = decided
        first_tsn = assoc.tsn_next
        assoc.paused = True
        assoc._watch = (new_tl.address, decided, report)
        steps = ((AsconfOp.ADD_IP, new_tl), (AsconfOp.SET_PRIMARY, new_tl), (AsconfOp.DELETE_IP, old))
        logger.info(f"[{decided}ms] {self.name}: handover {old} -> {new_tl} "
                    f"({'bundled' if model.bundling else 'sequential'} ASCONF)")

        if model.bundling:
            yield self.sim.timeout(model.t_pc)
            assoc.add_local(new_tl)
            assoc.number(new_tl.address)
            assoc.set_local_primary(new_tl)
            self._resume(assoc)
        for op, tl in steps:
            acked = yield from self._asconf(assoc, op, tl, model.bundling, bundle_wait_ms)
            if not acked:
                assoc.state = AssociationState.CLOSED
                assoc.paused = False
                raise AsconfTimeout(f"{op.value} {tl} unacknowledged on every path, association aborted")
            if op == AsconfOp.ADD_IP and not model.bundling:
                assoc.add_local(new_tl)
                assoc.number(new_tl.address)
        if not model.bundling:
            yield self.sim.timeout(model.t_pc)
            assoc.set_local_primary(new_tl)
            self._resume(assoc)
        assoc.remove_local(old)
        report.completed_at = self.sim.now

        # settle every chunk that left during the handover window
        window = [entry[1] for tsn, entry in list(assoc.outstanding.items()) if tsn >= first_tsn]
        for waiter in window:
            yield waiter
        report.lost_bytes = sum(size for tsn, size in assoc.abandoned.items() if tsn >= first_tsn)
        assoc._watch = None
        logger.info(f"[{self.sim.now}ms] {self.name}: handover done, measured {report.measured_latency}ms "
                    f"(predicted {report.predicted_latency}ms), lost {report.lost_bytes} bytes")
        return report

    def execute_handover(self, assoc: Association, new_tl: TL, model: LatencyModel) -> HandoverReport:
        return self.sim.run_process(self.sim.process(self.handover_process(assoc, new_tl, model)))

    def shutdown_process(self, assoc: Association):
        if assoc.state != AssociationState.ESTABLISHED:
            return assoc.state
        assoc.state = AssociationState.SHUTDOWN
        for attempt in range(1 + self.max_retrans):
            self._emit(assoc, *assoc.path_for(attempt), [Chunk(ChunkKind.SHUTDOWN)])
            yield self.sim.timeout(self.rto_ms * 2 ** attempt)
            if assoc.state == AssociationState.CLOSED:
                break
        assoc.state = AssociationState.CLOSED
        return assoc.state

    def shutdown(self, assoc: Association) -> AssociationState:
        return self.sim.run_process(self.sim.process(self.shutdown_process(assoc)))
