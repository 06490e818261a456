import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Collection, Dict, List

from location.location_service import StalePhase
from overlay.chord import ChordOverlay
from overlay.ident import TL, MalformedTL, parse_tl
from world.simulator import NetworkSimulator

logger = logging.getLogger(__name__)

__all__ = ["InvalidScript", "StalePhase", "MobilityScript", "ChurnStep", "ChurnSchedule",
           "apply_mobility", "apply_churn", "execute_churn_step"]


class InvalidScript(ValueError):
    pass


@dataclass
class MobilityScript:
    """Two access networks with an overlapping region the MN crosses."""
    t_enter_overlap: int = 20000
    t_switch: int = 30000
    t_leave_overlap: int = 40000
    network1_id: int = 1
    network2_id: int = 2
    network1_address: str = "10.1.0.2"
    network2_address: str = "10.2.0.2"

    def validate(self):
        if not 0 <= self.t_enter_overlap < self.t_switch < self.t_leave_overlap:
            raise InvalidScript("need 0 <= t_enter_overlap < t_switch < t_leave_overlap, got "
                                f"{self.t_enter_overlap}/{self.t_switch}/{self.t_leave_overlap}")
        if self.network1_id == self.network2_id:
            raise InvalidScript("the two access networks need distinct ids")
        try:
            first, second = self.first_tl(), self.second_tl()
        except MalformedTL as e:
            raise InvalidScript(str(e)) from e
        if first.address == second.address:
            raise InvalidScript(f"both networks issue {first.address}")
        return self

    def first_tl(self) -> TL:
        return parse_tl(self.network1_address, self.network1_id)

    def second_tl(self) -> TL:
        return parse_tl(self.network2_address, self.network2_id)


def apply_mobility(script: MobilityScript, mn, sim: NetworkSimulator) -> bool:
    """Schedule the three movement phases on mn (a MobileNode)."""
    script.validate()
    if mn.primary_tl != script.first_tl() or mn.movement_scheduled:
        raise StalePhase(f"{mn.name} is not attached to network {script.network1_id} only")
    mn.movement_scheduled = True
    second = script.second_tl()
    sim.call_at(script.t_enter_overlap, mn.enter_overlap, second, label="enter-overlap")
    sim.call_at(script.t_switch, mn.switch_primary, label="switch-primary")
    sim.call_at(script.t_leave_overlap, mn.leave_overlap, label="leave-overlap")
    logger.info(f"{mn.name}: overlap {script.t_enter_overlap}ms, switch {script.t_switch}ms, "
                f"leave {script.t_leave_overlap}ms")
    return True


@dataclass
class ChurnStep:
    time_ms: int
    action: str
    count: int
    graceful: bool = False

    def __post_init__(self):
        if self.action not in ("add", "remove"):
            raise InvalidScript(f"unknown churn action {self.action!r}")
        if self.count < 1 or self.time_ms < 0:
            raise InvalidScript(f"churn step needs count >= 1 and time >= 0, got {self.count}@{self.time_ms}")


@dataclass
class ChurnSchedule:
    steps: List[ChurnStep] = field(default_factory=list)

    @classmethod
    def from_config(cls, entries: List[Dict[str, Any]]) -> "ChurnSchedule":
        try:
            steps = [ChurnStep(**entry) for entry in entries]
        except TypeError as e:
            raise InvalidScript(f"malformed churn step: {e}") from e
        return cls(sorted(steps, key=lambda s: s.time_ms))

    def to_config(self) -> List[Dict[str, Any]]:
        return [asdict(step) for step in self.steps]

    def validate(self, initial_population: int):
        population = initial_population
        last = -1
        for step in self.steps:
            if step.time_ms < last:
                raise InvalidScript("churn steps must be in time order")
            last = step.time_ms
            population += step.count if step.action == "add" else -step.count
            if population < 1:
                raise InvalidScript(f"step at {step.time_ms}ms would leave {population} nodes")
        return self

    def populations(self, initial_population: int) -> List[int]:
        sizes, population = [], initial_population
        for step in self.steps:
            population += step.count if step.action == "add" else -step.count
            sizes.append(population)
        return sizes


def execute_churn_step(step: ChurnStep, overlay: ChordOverlay, rng, protected: Collection = ()) -> List:
    """Apply one step now; returns the ids that left or joined. Protected nodes are never removed."""
    live = overlay.live_ids()
    if step.action == "remove":
        candidates = [nid for nid in live if nid not in protected]
        if step.count > len(candidates):
            raise InvalidScript(f"cannot remove {step.count} of {len(candidates)} removable nodes")
        picked = sorted(rng.choice(len(candidates), size=step.count, replace=False))
        victims = [candidates[int(i)] for i in picked]
        for victim in victims:
            overlay.depart(overlay.node(victim), graceful=step.graceful)
        logger.info(f"[{overlay.sim.now}ms] removed {len(victims)} nodes "
                    f"({'graceful' if step.graceful else 'ungraceful'}), {len(live) - len(victims)} left")
        return victims
    joined = overlay.spawn_ids(step.count, prefix=f"peer:seed-{overlay.sim.seed}:churn-{step.time_ms}")
    for node_id in joined:
        bootstrap = overlay.live_ids()[int(rng.integers(len(overlay.live_ids())))]
        overlay.join(overlay.new_node(node_id), bootstrap)
    logger.info(f"[{overlay.sim.now}ms] added {len(joined)} nodes, {len(overlay.live_ids())} live")
    return joined


def _churn_and_maintain(step: ChurnStep, overlay: ChordOverlay, rng, protected: Collection, rounds: int):
    execute_churn_step(step, overlay, rng, protected)
    if rounds:
        overlay.stabilize(rounds)


def apply_churn(schedule: ChurnSchedule, overlay: ChordOverlay, rng=None, protected: Collection = (),
                stabilize_rounds: int = 0) -> bool:
    """Schedule every step at its sim time on the overlay's simulator, optionally followed by maintenance."""
    schedule.validate(len(overlay.live_ids()))
    rng = rng if rng is not None else overlay.sim.stream("churn")
    for step in schedule.steps:
        overlay.sim.call_at(step.time_ms, _churn_and_maintain, step, overlay, rng, frozenset(protected),
                            stabilize_rounds, label=f"churn:{step.action}")
    return True
