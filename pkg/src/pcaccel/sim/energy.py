"""Energy accounting from event counts."""

from __future__ import annotations

from .config import EnergyCoefficients

COMPONENTS = ("pe", "sram_read", "sram_write", "leakage", "dram")


def energy_report(stats, coeffs: EnergyCoefficients) -> dict:
    """Energy per component, its total and each component's fraction.

    PE energy covers every distance computation, in the back-end PEs and the
    front-end CD stage.
    """
    parts = {
        "pe": (stats.pe_ops + stats.fe_distance_ops) * coeffs.pe_op,
        "sram_read": stats.sram_reads * coeffs.sram_read,
        "sram_write": stats.sram_writes * coeffs.sram_write,
        "leakage": stats.total_cycles * coeffs.leakage_per_cycle,
        "dram": stats.dram_words * coeffs.dram_access,
    }
    total = sum(parts.values())
    out = dict(parts)
    out["total"] = total
    out["fractions"] = {k: (v / total if total else 0.0) for k, v in parts.items()}
    return out
