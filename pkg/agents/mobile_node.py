import logging
from typing import List, Optional

from agents.base_host import BaseHost
from location.location_service import HandoverPhase, LocationService, PublishFailed, StalePhase
from overlay.chord import RingNode
from overlay.ident import TL, UID
from transport.latency import HandoverReport, LatencyModel
from transport.msctp import Association, AssociationError, AssociationState, AsconfTimeout
from utils.trace import ChunkTrace

logger = logging.getLogger(__name__)


class MobileNode(BaseHost):
    """Roaming endpoint: publishes its locators, keeps them fresh and streams data to its peer."""

    def __init__(self, name: str, uid: UID, location: LocationService, entry: RingNode,
                 model: LatencyModel = None, refresh_period_ms: int = 10000, chunk_bytes: int = 1000,
                 send_interval_ms: int = 10, trace: ChunkTrace = None, rto_ms: int = 1000):
        super().__init__(name, location, entry, trace, rto_ms)
        self.uid = uid
        self.model = model or LatencyModel()
        self.refresh_period_ms = refresh_period_ms
        self.chunk_bytes = chunk_bytes
        self.send_interval_ms = send_interval_ms

        self.association: Optional[Association] = None
        self.phase: Optional[HandoverPhase] = None
        self.movement_scheduled = False
        self.new_tl: Optional[TL] = None
        self.new_tl_ready = self.sim.event()
        self.handover_report: Optional[HandoverReport] = None
        self.phase_log: List[tuple] = []
        self.stop_at: Optional[int] = None
        self.relocating = False
        self.transport.on_association = self._on_association

    def start(self, first_tl: TL, stop_at: int = None):
        """Attach to network 1, publish, then refresh periodically."""
        self.attach(first_tl)
        self.stop_at = stop_at
        self.sim.process(self._publish_and_refresh())

    def _publish_and_refresh(self):
        try:
            yield from self.location.publish_process(self, self.uid, list(self.tls))
        except PublishFailed as e:
            logger.warning(f"[{self.sim.now}ms] {self.name}: initial publish failed: {e}")
        while self.stop_at is None or self.sim.now + self.refresh_period_ms <= self.stop_at:
            yield self.sim.timeout(self.refresh_period_ms)
            if self.relocating:
                # the switch-primary publish refreshes the record itself
                continue
            try:
                yield from self.location.refresh_process(self, self.uid, src=self.reply_address)
            except PublishFailed as e:
                logger.warning(f"[{self.sim.now}ms] {self.name}: refresh failed: {e}")

    def _on_association(self, assoc: Association):
        self.association = assoc
        logger.info(f"[{self.sim.now}ms] {self.name}: association {assoc.assoc_id} up, streaming data")
        self.sim.process(self._stream())

    def _stream(self):
        assoc = self.association
        while assoc.state == AssociationState.ESTABLISHED:
            if self.stop_at is not None and self.sim.now >= self.stop_at:
                break
            self.transport.send_data(assoc, self.chunk_bytes)
            yield self.sim.timeout(self.send_interval_ms)

    # ---- movement, driven by the mobility script ------------------------------------

    def _enter_phase(self, phase: HandoverPhase):
        expected = {None: HandoverPhase.ENTER_OVERLAP,
                    HandoverPhase.ENTER_OVERLAP: HandoverPhase.SWITCH_PRIMARY,
                    HandoverPhase.SWITCH_PRIMARY: HandoverPhase.LEAVE_OVERLAP}.get(self.phase)
        if phase != expected:
            raise StalePhase(f"{self.name}: {phase.value} cannot follow {self.phase}")
        self.phase = phase
        self.phase_log.append((self.sim.now, phase.value))

    def enter_overlap(self, new_tl: TL):
        self._enter_phase(HandoverPhase.ENTER_OVERLAP)
        self.new_tl = new_tl
        self.sim.process(self._acquire_and_announce(new_tl))

    def _acquire_and_announce(self, new_tl: TL):
        # movement detection and address configuration run beside the ongoing transfer
        yield self.sim.timeout(self.model.t_md + self.model.t_ac)
        self.attach(new_tl)
        self.new_tl_ready.succeed(new_tl)
        try:
            yield from self.location.handover_update_process(self, self.uid, new_tl, HandoverPhase.ENTER_OVERLAP)
        except (PublishFailed, StalePhase) as e:
            logger.warning(f"[{self.sim.now}ms] {self.name}: overlap update failed: {e}")

    def switch_primary(self):
        self._enter_phase(HandoverPhase.SWITCH_PRIMARY)
        self.sim.process(self._switch())

    def _switch(self):
        yield self.new_tl_ready
        new_tl = self.new_tl
        self.set_primary(new_tl)
        self.sim.process(self._relocate(new_tl))
        if self.association is None or self.association.state != AssociationState.ESTABLISHED:
            logger.warning(f"[{self.sim.now}ms] {self.name}: no association to hand over")
            return
        try:
            self.handover_report = yield from self.transport.handover_process(self.association, new_tl, self.model)
        except (AsconfTimeout, AssociationError) as e:
            logger.warning(f"[{self.sim.now}ms] {self.name}: handover aborted: {e}")

    def _relocate(self, new_tl: TL):
        self.relocating = True
        try:
            yield from self.location.handover_update_process(self, self.uid, new_tl, HandoverPhase.SWITCH_PRIMARY)
        except (PublishFailed, StalePhase) as e:
            logger.warning(f"[{self.sim.now}ms] {self.name}: relocation to a new base node failed: {e}")
        finally:
            self.relocating = False

    def leave_overlap(self):
        self._enter_phase(HandoverPhase.LEAVE_OVERLAP)
        self.sim.process(self._leave())

    def _leave(self):
        new_tl = self.new_tl
        old = [tl for tl in self.tls if tl != new_tl]
        try:
            yield from self.location.handover_update_process(self, self.uid, new_tl, HandoverPhase.LEAVE_OVERLAP)
        except (PublishFailed, StalePhase) as e:
            logger.warning(f"[{self.sim.now}ms] {self.name}: leave update failed: {e}")
        for tl in old:
            self.detach(tl)
