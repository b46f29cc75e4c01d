"""Cycle-level model of a KD-tree search accelerator driven by query traces."""

from .config import DEFAULT_ENERGY, BUFFERS, EnergyCoefficients, Latencies, SimConfig, SimStats
from .energy import energy_report
from .engine import SimulationError, model_ru, ru_schedule, simulate
from .trace import QueryTrace, TraceError, trace_search
from .sweep import hardware_sweep, h_top_sweep, save_rows_csv
