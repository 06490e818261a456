import json
import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, List

from overlay.ident import MAX_BITS
from utils.trace import mean

logger = logging.getLogger(__name__)

EXPERIMENTS = ("handover", "lookup_scaling", "churn", "custom")

METRICS_COLUMNS = ["experiment", "node_count", "queries_issued", "queries_succeeded", "queries_timed_out",
                   "success_pct", "mean_hops", "mean_latency_ms"]


class ConfigError(ValueError):
    pass


@dataclass
class ScenarioConfig:
    experiment: str = "handover"
    m: int = 16
    node_counts: List[int] = field(default_factory=lambda: [16])
    queries_per_point: int = 25
    values_per_key: int = 1
    seed: int = 1
    seeds: int = 1
    link_latency_ms: int = 10
    loss_prob: float = 0.0
    rpc_timeout_ms: int = 1000
    rpc_retries: int = 2
    record_ttl_ms: int = 30000
    pointer_ttl_ms: int = 15000
    redirect_ttl_ms: int = 30000
    refresh_period_ms: int = 10000
    requery_period_ms: int = 10000
    t_md_ms: int = 0
    t_ac_ms: int = 0
    t_mn_cn_ms: int = 10
    t_cn_mn_ms: int = 10
    t_pc_ms: int = 50
    bundling: bool = True
    duration_ms: int = 60000
    t_enter_overlap_ms: int = 20000
    t_switch_ms: int = 30000
    t_leave_overlap_ms: int = 40000
    chunk_bytes: int = 1000
    send_interval_ms: int = 10
    rto_ms: int = 1000
    query_deadline_ms: int = 5000
    successor_list_len: int = 4
    pointer_fanout: int = 3
    pointers_enabled: bool = True
    stale_finger_fraction: float = 0.0
    stabilize_rounds: int = 0
    graceful: bool = False
    refresh_values: bool = True
    churn_schedule: List[Dict[str, Any]] = field(default_factory=list)

    @property
    def maintenance_rounds(self) -> int:
        return self.stabilize_rounds if self.stabilize_rounds > 0 else self.m + 4

    def validate(self) -> "ScenarioConfig":
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"experiment must be one of {EXPERIMENTS}, got {self.experiment!r}")
        if not 1 <= self.m <= MAX_BITS:
            raise ConfigError(f"m must be in [1, {MAX_BITS}], got {self.m}")
        if not self.node_counts or any(n < 1 for n in self.node_counts):
            raise ConfigError(f"node_counts must be a non-empty list of counts >= 1, got {self.node_counts}")
        if max(self.node_counts) > (1 << self.m):
            raise ConfigError(f"{max(self.node_counts)} nodes do not fit on a {self.m}-bit circle")
        for name in ("queries_per_point", "values_per_key", "seeds", "successor_list_len",
                     "pointer_fanout", "chunk_bytes", "send_interval_ms", "rto_ms", "rpc_timeout_ms"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.query_deadline_ms <= 0:
            raise ConfigError("query_deadline_ms must be positive")
        if not 0.0 <= self.loss_prob <= 1.0:
            raise ConfigError(f"loss_prob must be in [0, 1], got {self.loss_prob}")
        if not 0.0 <= self.stale_finger_fraction <= 1.0:
            raise ConfigError(f"stale_finger_fraction must be in [0, 1], got {self.stale_finger_fraction}")
        for f in fields(self):
            if f.name.endswith("_ms") and getattr(self, f.name) < 0:
                raise ConfigError(f"{f.name} must be non-negative, got {getattr(self, f.name)}")
        for name in ("seed", "rpc_retries", "stabilize_rounds"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")
        if not self.t_enter_overlap_ms < self.t_switch_ms < self.t_leave_overlap_ms:
            raise ConfigError("mobility times must satisfy t_enter_overlap_ms < t_switch_ms < t_leave_overlap_ms")
        if self.pointer_fanout > self.successor_list_len:
            raise ConfigError("pointer_fanout cannot exceed successor_list_len")
        return self

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ScenarioConfig":
        if not isinstance(data, dict):
            raise ConfigError(f"scenario must be a JSON object, got {type(data).__name__}")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config fields: {', '.join(unknown)}")
        try:
            cfg = cls(**data)
        except TypeError as e:
            raise ConfigError(str(e)) from e
        return cfg.validate()


def load_config(path: str) -> ScenarioConfig:
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path} is not valid JSON: {e}") from e
    return ScenarioConfig.from_dict(data)


def save_config(cfg: ScenarioConfig, path: str):
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(cfg.to_dict(), f, indent=2)
        f.write("\n")


@dataclass
class MetricsRow:
    experiment: str
    node_count: int
    queries_issued: int = 0
    queries_succeeded: int = 0
    queries_timed_out: int = 0
    hops: List[int] = field(default_factory=list)
    latencies: List[int] = field(default_factory=list)
    bytes_delivered_curve: str = ""

    @property
    def queries_failed(self) -> int:
        return self.queries_issued - self.queries_succeeded - self.queries_timed_out

    @property
    def success_pct(self) -> float:
        if self.queries_issued == 0:
            return 0.0
        return 100.0 * self.queries_succeeded / self.queries_issued

    def record(self, outcome: str, hops: int = 0, latency_ms: int = 0):
        """Count one query as "ok", "timeout" or "failed"."""
        self.queries_issued += 1
        if outcome == "ok":
            self.queries_succeeded += 1
            self.hops.append(hops)
            self.latencies.append(latency_ms)
        elif outcome == "timeout":
            self.queries_timed_out += 1

    def merge(self, other: "MetricsRow"):
        self.queries_issued += other.queries_issued
        self.queries_succeeded += other.queries_succeeded
        self.queries_timed_out += other.queries_timed_out
        self.hops.extend(other.hops)
        self.latencies.extend(other.latencies)

    def as_csv_row(self) -> List[Any]:
        return [self.experiment, self.node_count, self.queries_issued, self.queries_succeeded,
                self.queries_timed_out, f"{self.success_pct:.2f}", f"{mean(self.hops):.3f}",
                f"{mean(self.latencies):.3f}"]
