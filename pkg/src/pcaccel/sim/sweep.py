"""Parameter sweeps over hardware sizes and top-tree height."""

from __future__ import annotations

import csv
import itertools

from .config import SimConfig
from .engine import simulate
from .trace import trace_search

GRID = (16, 32, 64, 128)


def hardware_sweep(trace, base: SimConfig = SimConfig(), num_ru=GRID, num_su=GRID, pes_per_su=GRID):
    """One row per (RU, SU, PE) combination."""
    rows = []
    for ru, su, pe in itertools.product(num_ru, num_su, pes_per_su):
        cfg = base.replace(num_ru=ru, num_su=su, pes_per_su=pe)
        rows.append({"num_ru": ru, "num_su": su, "pes_per_su": pe, **simulate(trace, cfg).row()})
    return rows


def h_top_sweep(tree_factory, points, queries, h_values=range(2, 17), base: SimConfig = SimConfig(),
                mode: str = "nn", r: float | None = None, approx=None):
    """Simulate the same query batch on two-stage trees of each height.

    ``tree_factory(h)`` returns an unfitted two-stage tree of height ``h``.
    """
    rows = []
    for h in h_values:
        tree = tree_factory(h).fit(points)
        tr = trace_search(tree, queries, mode, r, approx)
        cfg = base.replace(h_top=None, approx_enabled=base.approx_enabled or approx is not None)
        rows.append({"h_top": h, **simulate(tr, cfg).row()})
    return rows


def save_rows_csv(rows, path) -> None:
    if not rows:
        raise ValueError("no rows to write")
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
