"""Wall-time of the forward fixed-point solve, direct vs iterative, across graph sizes."""

from __future__ import annotations

import csv
import io
import timeit
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .graph import Graph
from .solver import SolverConfig, build_maps, solve

BENCH_COLUMNS = ("num_nodes", "mode", "repeats", "median_s", "iterations", "status")


@dataclass
class BenchRow:
    num_nodes: int
    mode: str
    repeats: int
    median_s: float | None
    iterations: int | None
    status: str = "ok"


def random_maps(rng, p, n_a=5, num_heads=2, gamma=0.5):
    """GVI-shaped random maps: ``n_a`` distinct successors per node, random logits and bias."""
    n_a = min(n_a, p)
    src = np.repeat(np.arange(p), n_a)
    dst = np.concatenate([rng.choice(p, n_a, replace=False) for _ in range(p)])
    g = Graph(p, np.stack([src, dst], axis=1))
    node_out = T.Tensor(rng.normal(size=(p, num_heads)))
    edge_out = T.Tensor(rng.normal(size=(len(src), num_heads)))
    return build_maps(g, node_out, edge_out, gamma)


def run_bench(sizes, repeats=3, modes=("direct", "iterative"), n_a=5, num_heads=2, seed=0):
    rng = np.random.default_rng(seed)
    rows = []
    for p in sizes:
        maps = random_maps(rng, int(p), n_a, num_heads)
        for mode in modes:
            cfg = SolverConfig(mode=mode)
            try:
                iters = solve(maps, cfg).iterations
                # each sample loops enough calls to fill ~0.2 s so fast solves are not timer noise
                timer = timeit.Timer(lambda: solve(maps, cfg))
                number, _ = timer.autorange()
                times = [t / number for t in timer.repeat(repeats, number)]
            except MemoryError:
                rows.append(BenchRow(int(p), mode, repeats, None, None, "skipped"))
                continue
            rows.append(BenchRow(int(p), mode, repeats, float(np.median(times)), iters))
    return rows


def growth_ratios(rows, mode):
    """``[(p_small, p_large, t_large / t_small)]`` over consecutive measured sizes."""
    pts = sorted((r.num_nodes, r.median_s) for r in rows if r.mode == mode and r.status == "ok")
    return [(a, b, tb / ta) for (a, ta), (b, tb) in zip(pts[:-1], pts[1:]) if ta > 0]


def crossover(rows):
    """Smallest size at which the direct solve is slower than the iterative one, or ``None``."""
    by = {(r.num_nodes, r.mode): r.median_s for r in rows if r.status == "ok"}
    for p in sorted({r.num_nodes for r in rows}):
        d, i = by.get((p, "direct")), by.get((p, "iterative"))
        if d is not None and i is not None and d > i:
            return p
    return None


def rows_to_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BENCH_COLUMNS)
    for r in rows:
        w.writerow(
            [
                r.num_nodes,
                r.mode,
                r.repeats,
                "" if r.median_s is None else f"{r.median_s:.6e}",
                "" if r.iterations is None else r.iterations,
                r.status,
            ]
        )
    return buf.getvalue()


def summary(rows):
    lines = []
    for mode in ("direct", "iterative"):
        for a, b, ratio in growth_ratios(rows, mode):
            lines.append(f"{mode:9s} p {a:>5d} -> {b:>5d}: time x{ratio:.2f}")
    c = crossover(rows)
    lines.append(
        f"direct slower than iterative from p = {c}" if c is not None else "no direct/iterative crossover observed"
    )
    return "\n".join(lines)
