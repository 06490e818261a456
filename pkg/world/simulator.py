import hashlib
import itertools
import logging
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
import simpy

logger = logging.getLogger(__name__)

# one scheduler tick is one millisecond of sim time
TICK_MS = 1

Receiver = Callable[[str, str, Any], None]


@dataclass(frozen=True)
class LinkModel:
    one_way_latency: int = 10
    loss_prob: float = 0.0
    rng_seed: Optional[int] = None

    def __post_init__(self):
        if self.one_way_latency < 0:
            raise ValueError(f"negative link latency {self.one_way_latency}")
        if not 0.0 <= self.loss_prob <= 1.0:
            raise ValueError(f"loss probability {self.loss_prob} outside [0, 1]")


@dataclass(frozen=True)
class Event:
    """Descriptor of a scheduled action; seq breaks ties between equal fire_at."""
    fire_at: int
    seq: int
    action: str


class Link:
    """One directed src -> dst link with its own loss stream and counters."""

    def __init__(self, src: str, dst: str, model: LinkModel, rng: np.random.Generator):
        self.src = src
        self.dst = dst
        self.model = model
        self.rng = rng
        self.sent = 0
        self.delivered = 0
        self.dropped = 0

    def __repr__(self):
        return f"Link({self.src}->{self.dst}, {self.model.one_way_latency}ms, loss={self.model.loss_prob})"


class NetworkSimulator:
    """Single-threaded discrete-event kernel: virtual clock, timers and lossy links."""

    def __init__(self, seed: int = 0, default_link: LinkModel = None, record_events: bool = False):
        if seed < 0:
            raise ValueError(f"seed must be non-negative, got {seed}")
        self.env = simpy.Environment()
        self.seed = int(seed)
        self.default_link = default_link or LinkModel()
        self.record_events = record_events
        self.event_log: List[Event] = []
        self.trace_sink = None

        self._seq = itertools.count()
        self._receivers: Dict[str, Receiver] = {}
        self._networks: Dict[str, int] = {}
        self._links: Dict[Tuple[str, str], Link] = {}
        self._address_overrides: Dict[Tuple[str, str], LinkModel] = {}
        self._network_overrides: Dict[Tuple[int, int], LinkModel] = {}

    @property
    def now(self) -> int:
        return int(self.env.now)

    def stream(self, name: str) -> np.random.Generator:
        """Independent RNG stream derived from (scenario seed, stream name)."""
        key = int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "big")
        return np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=(key,)))

    # ---- timers and processes -------------------------------------------

    def schedule(self, delay: int, action: Callable, *args, label: str = "") -> Event:
        """Run action(*args) after delay ms."""
        if delay < 0:
            raise ValueError(f"cannot schedule into the past (delay={delay})")
        event = Event(self.now + int(delay), next(self._seq), label or getattr(action, "__name__", "action"))
        timeout = self.env.timeout(int(delay))
        timeout.callbacks.append(lambda _: self._fire(event, action, args))
        return event

    def call_at(self, when: int, action: Callable, *args, label: str = "") -> Event:
        return self.schedule(int(when) - self.now, action, *args, label=label)

    def _fire(self, event: Event, action: Callable, args):
        if self.record_events:
            self.event_log.append(event)
        action(*args)

    def process(self, generator) -> simpy.Process:
        return self.env.process(generator)

    def timeout(self, delay: int, value: Any = None) -> simpy.Timeout:
        return self.env.timeout(int(delay), value)

    def event(self) -> simpy.Event:
        return self.env.event()

    def run_until(self, limit: int) -> int:
        """Execute every event with fire_at <= limit; the clock ends at limit."""
        limit = int(limit)
        if limit < self.now:
            raise ValueError(f"clock is at {self.now}, cannot run until {limit}")
        executed = 0
        while self.env.peek() <= limit:
            self.env.step()
            executed += 1
        if self.now < limit:
            # park the clock: only the marker is due at or before the limit now
            self.env.timeout(limit - self.now)
            self.env.step()
        return executed

    def run_process(self, process: simpy.Process) -> Any:
        """Advance the simulation until process finishes and return its value."""
        if not process.triggered:
            self.env.run(until=process)
        if not process.ok:
            raise process.value
        return process.value

    # ---- addressing and links ---------------------------------------------

    def attach(self, address: str, network_id: int, receiver: Receiver):
        self._receivers[address] = receiver
        self._networks[address] = int(network_id)
        logger.debug(f"[{self.now}ms] attach {address} (network {network_id})")

    def detach(self, address: str):
        self._receivers.pop(address, None)
        logger.debug(f"[{self.now}ms] detach {address}")

    def is_attached(self, address: str) -> bool:
        return address in self._receivers

    def network_of(self, address: str) -> Optional[int]:
        return self._networks.get(address)

    def override_link(self, model: LinkModel, src: str = None, dst: str = None,
                      networks: Tuple[int, int] = None):
        """Per-link parameters, by address pair or by (src network, dst network)."""
        if networks is not None:
            self._network_overrides[(int(networks[0]), int(networks[1]))] = model
        elif src is not None and dst is not None:
            self._address_overrides[(src, dst)] = model
        else:
            raise ValueError("override_link needs an address pair or a network pair")
        # links already built keep their counters but pick up the new model
        for (s, d), link in self._links.items():
            link.model = self._model_for(s, d)

    def _model_for(self, src: str, dst: str) -> LinkModel:
        if (src, dst) in self._address_overrides:
            return self._address_overrides[(src, dst)]
        pair = (self._networks.get(src), self._networks.get(dst))
        if pair in self._network_overrides:
            return self._network_overrides[pair]
        return self.default_link

    def link(self, src: str, dst: str) -> Link:
        key = (src, dst)
        if key not in self._links:
            model = self._model_for(src, dst)
            if model.rng_seed is not None:
                rng = np.random.default_rng(np.random.SeedSequence(model.rng_seed))
            else:
                rng = self.stream(f"link:{src}->{dst}")
            self._links[key] = Link(src, dst, model, rng)
        return self._links[key]

    def send(self, link: Link, msg: Any) -> bool:
        """Schedule delivery of msg over link; returns False when it is dropped."""
        link.sent += 1
        # one draw per message keeps the loss pattern a function of the message index
        draw = link.rng.random()
        if link.src not in self._receivers or draw < link.model.loss_prob:
            link.dropped += 1
            logger.debug(f"[{self.now}ms] drop {type(msg).__name__} on {link!r}")
            return False
        self.schedule(link.model.one_way_latency, self._deliver, link, msg, label=f"deliver:{link.dst}")
        return True

    def transmit(self, src: str, dst: str, msg: Any) -> bool:
        return self.send(self.link(src, dst), msg)

    def _deliver(self, link: Link, msg: Any):
        receiver = self._receivers.get(link.dst)
        if receiver is None:
            link.dropped += 1
            logger.debug(f"[{self.now}ms] {link.dst} unreachable, {type(msg).__name__} lost")
            return
        link.delivered += 1
        receiver(link.src, link.dst, msg)

    def links(self) -> List[Link]:
        return list(self._links.values())

    def totals(self) -> Dict[str, int]:
        sent = sum(link.sent for link in self._links.values())
        delivered = sum(link.delivered for link in self._links.values())
        dropped = sum(link.dropped for link in self._links.values())
        return {"sent": sent, "delivered": delivered, "dropped": dropped}
