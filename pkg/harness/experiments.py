import logging
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, List, Tuple

from tqdm import tqdm

from agents.correspondent_node import CorrespondentNode
from agents.mobile_node import MobileNode
from harness.scenario import ConfigError, MetricsRow, ScenarioConfig
from location.location_service import LocationService
from overlay.chord import ChordOverlay, LookupTimeout
from overlay.ident import TL, UID, NodeId, hash_to_id
from transport.latency import HandoverReport, LatencyModel
from utils.trace import ChunkTrace
from world.mobility import (ChurnSchedule, ChurnStep, InvalidScript, MobilityScript, apply_churn, apply_mobility,
                            execute_churn_step)
from world.simulator import LinkModel, NetworkSimulator

logger = logging.getLogger(__name__)

CN_NETWORK = 3
CN_ADDRESS = "10.3.0.2"
# the CN looks the MN up once the MN has had time to publish
CONNECT_AT_MS = 1000
LADDER_SPACING_MS = 10000


@dataclass
class HandoverOutcome:
    row: MetricsRow
    series: List[Tuple[int, int]]
    report: HandoverReport
    trace: ChunkTrace
    base_nodes: List[NodeId] = field(default_factory=list)
    ring_size: int = 0


def build_simulator(cfg: ScenarioConfig, seed: int) -> NetworkSimulator:
    return NetworkSimulator(seed, LinkModel(cfg.link_latency_ms, cfg.loss_prob))


def build_overlay(cfg: ScenarioConfig, sim: NetworkSimulator, node_count: int) -> ChordOverlay:
    """A stabilized ring of node_count peers, with stale fingers injected when configured."""
    overlay = ChordOverlay(sim, cfg.m, cfg.successor_list_len, cfg.rpc_timeout_ms,
                           cfg.rpc_retries, cfg.query_deadline_ms)
    overlay.populate(overlay.spawn_ids(node_count), cfg.maintenance_rounds)
    if cfg.stale_finger_fraction > 0:
        overlay.perturb_fingers(cfg.stale_finger_fraction, sim.stream("stale-fingers"))
    return overlay


def _require(cfg: ScenarioConfig, *experiments: str):
    cfg.validate()
    if cfg.experiment not in experiments:
        raise ConfigError(f"expected experiment {' or '.join(experiments)}, got {cfg.experiment!r}")


def _seeds(cfg: ScenarioConfig) -> List[int]:
    return [cfg.seed + i for i in range(cfg.seeds)]


# ---- handover --------------------------------------------------------------------------

def run_handover_scenario(cfg: ScenarioConfig) -> HandoverOutcome:
    """MN streams to CN across two access networks; one handover at t_switch."""
    _require(cfg, "handover")
    sim = build_simulator(cfg, cfg.seed)
    for mn_net in (1, 2):
        sim.override_link(LinkModel(cfg.t_mn_cn_ms, cfg.loss_prob), networks=(mn_net, CN_NETWORK))
        sim.override_link(LinkModel(cfg.t_cn_mn_ms, cfg.loss_prob), networks=(CN_NETWORK, mn_net))
    overlay = build_overlay(cfg, sim, cfg.node_counts[0])
    location = LocationService(overlay, cfg.record_ttl_ms, cfg.pointer_ttl_ms, cfg.redirect_ttl_ms,
                               cfg.pointer_fanout, cfg.pointers_enabled)
    location.start()

    trace = ChunkTrace()
    rng = sim.stream("entry-nodes")
    live = overlay.live_nodes()
    model = LatencyModel(cfg.t_md_ms, cfg.t_ac_ms, cfg.t_mn_cn_ms, cfg.t_cn_mn_ms, cfg.t_pc_ms, cfg.bundling)
    uid = UID("mobile", "laptop", "1")
    mn = MobileNode("MN", uid, location, live[int(rng.integers(len(live)))], model, cfg.refresh_period_ms,
                    cfg.chunk_bytes, cfg.send_interval_ms, trace, cfg.rto_ms)
    cn = CorrespondentNode("CN", location, live[int(rng.integers(len(live)))], cfg.requery_period_ms,
                           trace=trace, rto_ms=cfg.rto_ms)

    script = MobilityScript(cfg.t_enter_overlap_ms, cfg.t_switch_ms, cfg.t_leave_overlap_ms)
    try:
        script.validate()
    except InvalidScript as e:
        raise ConfigError(str(e)) from e
    cn.attach(TL(CN_ADDRESS, CN_NETWORK))
    mn.start(script.first_tl(), stop_at=cfg.duration_ms)
    apply_mobility(script, mn, sim)
    if cfg.churn_schedule:
        # background churn never takes down the hosts' own entry nodes
        try:
            schedule = ChurnSchedule.from_config(cfg.churn_schedule).validate(cfg.node_counts[0] - 1)
        except InvalidScript as e:
            raise ConfigError(f"churn_schedule: {e}") from e
        apply_churn(schedule, overlay, protected={mn.entry.id, cn.entry.id},
                    stabilize_rounds=cfg.maintenance_rounds)
    sim.call_at(CONNECT_AT_MS, lambda: sim.process(cn.connect_process(uid, mn.name)), label="connect")

    logger.info(f"handover scenario: {cfg.node_counts[0]} ring nodes, {cfg.duration_ms}ms, "
                f"bundling={'on' if cfg.bundling else 'off'}")
    sim.run_until(cfg.duration_ms)

    row = MetricsRow("handover", cfg.node_counts[0], bytes_delivered_curve="timeseries.csv")
    for resolution in cn.resolutions:
        if resolution.outcome == "ok":
            row.record("ok", resolution.result.hops, resolution.result.latency_ms)
        else:
            row.record("timeout" if resolution.outcome == "timeout" else "failed")
    series = delivery_series(cn.association.deliveries if cn.association else [])
    report = mn.handover_report or HandoverReport(predicted_latency=0, bundled=cfg.bundling)
    registration = location.registrations.get(uid)
    logger.info(f"handover scenario done: {series[-1][1] if series else 0} bytes delivered, "
                f"measured latency {report.measured_latency}ms, lost {report.lost_bytes} bytes")
    return HandoverOutcome(row, series, report, trace, list(registration.history) if registration else [],
                           len(overlay.live_ids()))


def delivery_series(deliveries: List[Tuple[int, int]]) -> List[Tuple[int, int]]:
    """Cumulative bytes per millisecond, last value wins within a tick."""
    per_tick: Dict[int, int] = {}
    for when, total in deliveries:
        per_tick[when] = total
    return sorted(per_tick.items())


# ---- lookup workloads ------------------------------------------------------------------

class KeyWorkload:
    """Keys with their expected value sets, each owned by a ring node that can re-put it."""

    def __init__(self, overlay: ChordOverlay, count: int, values_per_key: int, rng):
        live = overlay.live_ids()
        self.overlay = overlay
        self.keys: List[NodeId] = []
        self.values: Dict[NodeId, FrozenSet[bytes]] = {}
        self.owners: Dict[NodeId, NodeId] = {}
        index = 0
        while len(self.keys) < count:
            name = f"item:seed-{overlay.sim.seed}:{index}"
            key = hash_to_id(name, overlay.m)
            index += 1
            if key in self.values:
                continue
            self.keys.append(key)
            self.values[key] = frozenset(f"{name}:value:{j}".encode() for j in range(values_per_key))
            self.owners[key] = live[int(rng.integers(len(live)))]

    def publish(self, keys: List[NodeId] = None) -> int:
        """Owners put their values; returns how many puts failed."""
        failed = 0
        for key in keys if keys is not None else self.keys:
            owner = self.overlay.node(self.owners[key])
            for value in sorted(self.values[key]):
                try:
                    self.overlay.put(owner, key, value)
                except LookupTimeout as e:
                    failed += 1
                    logger.warning(f"put of {key} by {owner.id} failed: {e}")
        return failed

    def live_keys(self) -> List[NodeId]:
        return [key for key in self.keys if self.overlay.is_alive(self.owners[key])]

    def query(self, row: MetricsRow, count: int, rng, live_owners_only: bool = True):
        """Issue count random gets from random live nodes into row.

        Without live_owners_only every key is queried, including those whose owner left and
        can no longer refresh them.
        """
        keys = self.live_keys() if live_owners_only else self.keys
        live = self.overlay.live_nodes()
        if not keys:
            logger.warning("no key with a live owner left to query")
            return
        for _ in range(count):
            key = keys[int(rng.integers(len(keys)))]
            origin = live[int(rng.integers(len(live)))]
            try:
                result = self.overlay.get(origin, key)
            except LookupTimeout as e:
                logger.warning(f"query for {key} from {origin.id} discarded: {e}")
                row.record("timeout")
                continue
            if result.values == self.values[key]:
                row.record("ok", result.hops, result.latency_ms)
            else:
                logger.warning(f"query for {key} returned {len(result.values)} of "
                               f"{len(self.values[key])} values")
                row.record("failed")


def run_lookup_scaling(cfg: ScenarioConfig, progress: bool = False) -> List[MetricsRow]:
    """One row per node count, summed over the configured seeds."""
    _require(cfg, "lookup_scaling")
    rows = {n: MetricsRow("lookup_scaling", n) for n in cfg.node_counts}
    points = [(n, seed) for n in cfg.node_counts for seed in _seeds(cfg)]
    for n, seed in tqdm(points, desc="lookup scaling", disable=not progress):
        sim = build_simulator(cfg, seed)
        overlay = build_overlay(cfg, sim, n)
        rng = sim.stream(f"workload:{n}")
        workload = KeyWorkload(overlay, cfg.queries_per_point, cfg.values_per_key, rng)
        workload.publish()
        row = MetricsRow("lookup_scaling", n)
        workload.query(row, cfg.queries_per_point, rng)
        rows[n].merge(row)
        logger.info(f"N={n} seed={seed}: {row.queries_succeeded}/{row.queries_issued} answered")
    return [rows[n] for n in cfg.node_counts]


# ---- churn -----------------------------------------------------------------------------

def _run_steps(cfg: ScenarioConfig, experiment: str, initial: int, steps: List[ChurnStep], seed: int,
               stabilize: bool) -> List[MetricsRow]:
    """Measure before the first step and after every step.

    A step removes or adds nodes, then maintains the ring. With refresh_values the live owners
    re-put their values and only their keys are queried; without it every key is queried, so
    values lost with failed nodes show up as failures.
    """
    sim = build_simulator(cfg, seed)
    overlay = build_overlay(cfg, sim, initial)
    rng = sim.stream("workload:churn")
    churn_rng = sim.stream("churn")
    workload = KeyWorkload(overlay, cfg.queries_per_point, cfg.values_per_key, rng)
    workload.publish()

    rows = []
    row = MetricsRow(experiment, len(overlay.live_ids()))
    workload.query(row, cfg.queries_per_point, rng)
    rows.append(row)
    for step in steps:
        if step.time_ms > sim.now:
            sim.run_until(step.time_ms)
        execute_churn_step(step, overlay, churn_rng)
        if stabilize:
            overlay.stabilize(cfg.maintenance_rounds)
        if cfg.refresh_values:
            workload.publish(workload.live_keys())
        row = MetricsRow(experiment, len(overlay.live_ids()))
        workload.query(row, cfg.queries_per_point, rng, live_owners_only=cfg.refresh_values)
        rows.append(row)
        logger.info(f"{experiment} seed={seed} N={row.node_count}: {row.success_pct:.1f}% answered")
    return rows


def _aggregate(per_seed: List[List[MetricsRow]]) -> List[MetricsRow]:
    merged = [MetricsRow(row.experiment, row.node_count) for row in per_seed[0]]
    for rows in per_seed:
        for target, row in zip(merged, rows):
            target.merge(row)
    return merged


def run_churn(cfg: ScenarioConfig, progress: bool = False, stabilize: bool = True) -> List[MetricsRow]:
    """Shrink the ring down the node_counts ladder, one row per population step."""
    _require(cfg, "churn")
    ladder = sorted(set(cfg.node_counts), reverse=True)
    steps = [ChurnStep((i + 1) * LADDER_SPACING_MS, "remove", ladder[i] - ladder[i + 1], cfg.graceful)
             for i in range(len(ladder) - 1)]
    per_seed = [_run_steps(cfg, "churn", ladder[0], steps, seed, stabilize)
                for seed in tqdm(_seeds(cfg), desc="churn", disable=not progress)]
    return _aggregate(per_seed)


def run_custom(cfg: ScenarioConfig, progress: bool = False) -> List[MetricsRow]:
    """Run the explicit churn_schedule of the config with the churn engine."""
    _require(cfg, "custom")
    try:
        schedule = ChurnSchedule.from_config(cfg.churn_schedule).validate(cfg.node_counts[0])
    except InvalidScript as e:
        raise ConfigError(f"churn_schedule: {e}") from e
    per_seed = [_run_steps(cfg, "custom", cfg.node_counts[0], schedule.steps, seed, True)
                for seed in tqdm(_seeds(cfg), desc="custom", disable=not progress)]
    return _aggregate(per_seed)


def run_experiment(cfg: ScenarioConfig, progress: bool = False):
    """Dispatch on cfg.experiment; returns (rows, series, trace, extra metadata)."""
    if cfg.experiment == "handover":
        outcome = run_handover_scenario(cfg)
        report = outcome.report
        extra = {"handover": {"measured_latency_ms": report.measured_latency,
                              "arrival_latency_ms": report.arrival_latency,
                              "predicted_latency_ms": report.predicted_latency,
                              "lost_bytes": report.lost_bytes,
                              "switched_at_ms": report.switched_at},
                 "base_nodes": [str(b) for b in outcome.base_nodes],
                 "ring_size": outcome.ring_size}
        return [outcome.row], outcome.series, outcome.trace, extra
    runners = {"lookup_scaling": run_lookup_scaling, "churn": run_churn, "custom": run_custom}
    rows = runners[cfg.experiment](cfg, progress=progress)
    return rows, [], None, {}
