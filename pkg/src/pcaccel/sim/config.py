"""Simulator configuration, statistics and energy coefficients."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace


@dataclass(frozen=True)
class EnergyCoefficients:
    """Energy per event (arbitrary units)."""

    pe_op: float = 1.0
    sram_read: float = 1.0
    sram_write: float = 1.0
    dram_access: float = 1.0
    leakage_per_cycle: float = 1.0

    def __post_init__(self):
        if min(asdict(self).values()) < 0:
            raise ValueError("energy coefficients must be >= 0")


# Relative magnitudes chosen so that representative search traces split energy
# as PE > SRAM read > SRAM write > leakage > DRAM.
DEFAULT_ENERGY = EnergyCoefficients(pe_op=1.0, sram_read=0.55, sram_write=0.45,
                                    dram_access=0.6, leakage_per_cycle=6.0)


@dataclass(frozen=True)
class Latencies:
    sram_read: int = 1
    dram_read: int = 100
    pe_pipeline_depth: int = 3
    ru_stage_count: int = 6
    qdn: int = 1

    def __post_init__(self):
        if self.ru_stage_count != 6:
            raise ValueError("the recursion unit model is built around 6 stages")
        if min(self.sram_read, self.dram_read, self.pe_pipeline_depth) < 1 or self.qdn < 0:
            raise ValueError("latencies must be >= 1 (qdn >= 0)")


@dataclass(frozen=True)
class SimConfig:
    num_ru: int = 64
    num_su: int = 32
    pes_per_su: int = 32
    h_top: int | None = None
    forwarding: bool = True
    bypassing: bool = True
    mqsn_vs_mqmn: str = "mqsn"
    node_cache_enabled: bool = True
    approx_enabled: bool = False
    node_cache_capacity: int = 128 * 1024
    bqb_capacity: int = 128
    leader_cap: int = 16
    max_stack_height: int = 18
    bytes_per_node: int = 16
    latencies: Latencies = field(default_factory=Latencies)
    energy: EnergyCoefficients = field(default_factory=lambda: DEFAULT_ENERGY)

    def __post_init__(self):
        if min(self.num_ru, self.num_su, self.pes_per_su, self.leader_cap, self.max_stack_height) < 1:
            raise ValueError("unit counts must be >= 1")
        if min(self.node_cache_capacity, self.bqb_capacity, self.bytes_per_node) <= 0:
            raise ValueError("capacities must be > 0")
        if self.mqsn_vs_mqmn not in ("mqsn", "mqmn"):
            raise ValueError("mqsn_vs_mqmn must be 'mqsn' or 'mqmn'")

    def replace(self, **kw) -> "SimConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown sim config keys: {sorted(unknown)}")
        if "latencies" in d:
            d["latencies"] = Latencies(**d["latencies"])
        if "energy" in d:
            d["energy"] = EnergyCoefficients(**d["energy"])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "SimConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


BUFFERS = ("input_point_buffer", "node_cache", "query_buffer", "query_stack_buffer",
           "top_tree_buffer", "result_buffer", "leader_buffer")


@dataclass
class SimStats:
    total_cycles: int = 0
    fe_busy_cycles: int = 0
    fe_stall_cycles: int = 0
    fe_bubble_cycles: int = 0
    be_busy_cycles: int = 0
    search_exposed_cycles: int = 0
    queries: int = 0
    segments: int = 0
    batches: int = 0
    pe_utilization: list = field(default_factory=list)
    reads: dict = field(default_factory=lambda: dict.fromkeys(BUFFERS, 0))
    writes: dict = field(default_factory=lambda: dict.fromkeys(BUFFERS, 0))
    node_set_fetches: int = 0
    node_cache_hits: int = 0
    node_cache_misses: int = 0
    node_reads: int = 0
    pe_ops: int = 0
    fe_distance_ops: int = 0
    dram_words: int = 0
    energy: dict = field(default_factory=dict)

    @property
    def mean_pe_utilization(self) -> float:
        return sum(self.pe_utilization) / len(self.pe_utilization) if self.pe_utilization else 0.0

    @property
    def sram_reads(self) -> int:
        return sum(self.reads.values())

    @property
    def sram_writes(self) -> int:
        return sum(self.writes.values())

    def traffic_share(self) -> dict:
        """Each buffer's share of all on-chip accesses (reads + writes)."""
        tot = self.sram_reads + self.sram_writes
        return {b: (self.reads[b] + self.writes[b]) / tot if tot else 0.0 for b in BUFFERS}

    def as_dict(self) -> dict:
        d = asdict(self)
        d["mean_pe_utilization"] = self.mean_pe_utilization
        d["traffic_share"] = self.traffic_share()
        return d

    def row(self) -> dict:
        """Flat summary used for sweep tables."""
        share = self.traffic_share()
        return {
            "total_cycles": self.total_cycles, "fe_busy_cycles": self.fe_busy_cycles,
            "fe_stall_cycles": self.fe_stall_cycles, "be_busy_cycles": self.be_busy_cycles,
            "mean_pe_utilization": round(self.mean_pe_utilization, 6),
            "node_reads": self.node_reads, "input_point_buffer_reads": self.reads["input_point_buffer"],
            "node_cache_hits": self.node_cache_hits, "node_cache_misses": self.node_cache_misses,
            "node_set_share": round(share["input_point_buffer"], 6),
            "energy_total": round(self.energy.get("total", 0.0), 6),
        }
