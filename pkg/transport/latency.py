from dataclasses import dataclass
from typing import Optional


@dataclass(frozen=True)
class LatencyModel:
    """Timing components of a DAR-based handover, all in milliseconds."""
    t_md: int = 0
    t_ac: int = 0
    t_mn_cn: int = 10
    t_cn_mn: int = 10
    t_pc: int = 50
    bundling: bool = True

    def __post_init__(self):
        for name in ("t_md", "t_ac", "t_mn_cn", "t_cn_mn", "t_pc"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative, got {getattr(self, name)}")

    @property
    def round_trip(self) -> int:
        return self.t_mn_cn + self.t_cn_mn

    # each ASCONF exchange costs one round trip
    @property
    def t_add_ip(self) -> int:
        return self.round_trip

    @property
    def t_set_primary(self) -> int:
        return self.round_trip

    @property
    def t_del_ip(self) -> int:
        return self.round_trip

    @property
    def t_dar(self) -> int:
        """Sequential reconfiguration plus the interface switch."""
        return self.t_add_ip + self.t_set_primary + self.t_del_ip + self.t_pc

    @property
    def t_total(self) -> int:
        """Full handover budget including detection and address configuration."""
        return self.t_md + self.t_ac + self.t_dar


def predicted_latency(model: LatencyModel) -> int:
    """Interruption seen by the data flow; detection and configuration overlap with ongoing traffic."""
    if model.bundling:
        return model.t_pc
    return model.t_dar


@dataclass
class HandoverReport:
    measured_latency: Optional[int] = 0
    lost_bytes: int = 0
    arrival_latency: Optional[int] = 0
    predicted_latency: int = 0
    bundled: bool = True
    switched_at: Optional[int] = None
    completed_at: Optional[int] = None
