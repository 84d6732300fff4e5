"""Wall-clock scaling of factored vs. dense-materialised refined-graph propagation."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import psutil
import scipy.sparse as sp
import torch

from . import agcl
from .graphbuild import SparseGraph

log = logging.getLogger(__name__)


@dataclass
class BenchPoint:
    num_items: int
    factored_seconds: float
    dense_seconds: float | None


@dataclass
class BenchReport:
    d: int
    rank: int
    nnz_per_row: int
    reps: int
    points: list[BenchPoint] = field(default_factory=list)
    factored_slope: float = float("nan")
    dense_slope: float = float("nan")

    def to_dict(self) -> dict:
        return asdict(self)

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def random_graph(num_items: int, nnz_per_row: int, rng: np.random.Generator) -> SparseGraph:
    """Symmetric random graph with roughly ``nnz_per_row`` entries per row and an empty padding node."""
    n = num_items + 1
    rows = np.repeat(np.arange(1, n), nnz_per_row)
    cols = rng.integers(1, n, size=len(rows))
    vals = rng.random(len(rows)) / nnz_per_row
    mat = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    mat = (mat + mat.T).tocsr()
    mat.sort_indices()
    return SparseGraph(n, mat.indptr, mat.indices, mat.data)


def dense_propagate(graph: SparseGraph, w_us, w_v, alpha: float, e0, layers: int) -> np.ndarray:
    """Reference path: build the full refined matrix, then multiply layer by layer."""
    mat = graph.scipy()
    refined = mat.toarray()
    refined += alpha * ((mat @ w_us) @ (mat @ w_v).T)
    outs = [e0]
    for _ in range(layers):
        outs.append(refined @ outs[-1])
    return sum(outs) / len(outs)


def _time(fn, reps: int) -> float:
    fn()  # warmup
    start = time.perf_counter()
    for _ in range(reps):
        fn()
    return (time.perf_counter() - start) / reps


def slope(sizes, times) -> float:
    return float(np.polyfit(np.log(np.asarray(sizes, float)), np.log(np.asarray(times, float)), 1)[0])


def bench_svd(
    sizes: list[int],
    d: int = 32,
    rank: int = 16,
    nnz_per_row: int = 10,
    reps: int = 5,
    alpha: float = 0.05,
    layers: int = 2,
    seed: int = 0,
    dense: bool = True,
) -> BenchReport:
    if list(sizes) != sorted(sizes) or len(sizes) < 4:
        raise ValueError("sizes must be ascending with at least 4 points")
    if reps < 5:
        raise ValueError("each point needs at least 5 repetitions")
    prev_threads = torch.get_num_threads()
    torch.set_num_threads(1)
    report = BenchReport(d, rank, nnz_per_row, reps)
    try:
        for size in sizes:
            rng = np.random.default_rng([seed, size])
            graph = random_graph(size, nnz_per_row, rng)
            e0 = rng.standard_normal((graph.n, d))
            w_us = rng.standard_normal((graph.n, rank)) * 0.02
            w_v = rng.standard_normal((graph.n, rank)) * 0.02
            w_us[0] = w_v[0] = 0
            te0, tus, tv = (torch.from_numpy(a) for a in (e0, w_us, w_v))

            def factored():
                with torch.no_grad():
                    agcl.perturbed_propagate(graph, tus, tv, alpha, te0, layers)

            t_fact = _time(factored, reps)
            t_dense = None
            # full matrix plus one same-size temporary
            need = 2 * graph.n * graph.n * 8
            if dense and need < 0.8 * psutil.virtual_memory().available:
                try:
                    t_dense = _time(lambda: dense_propagate(graph, w_us, w_v, alpha, e0, layers), reps)
                except MemoryError:
                    log.warning("dense path skipped at |V|=%d (out of memory)", size)
            elif dense:
                log.warning("dense path skipped at |V|=%d (needs %.1f GB)", size, need / 1e9)
            report.points.append(BenchPoint(size, t_fact, t_dense))
            log.info("|V|=%d factored %.4fs dense %s", size, t_fact, t_dense)
    finally:
        torch.set_num_threads(prev_threads)

    report.factored_slope = slope([p.num_items for p in report.points], [p.factored_seconds for p in report.points])
    dense_pts = [p for p in report.points if p.dense_seconds is not None]
    if len(dense_pts) >= 2:
        report.dense_slope = slope([p.num_items for p in dense_pts], [p.dense_seconds for p in dense_pts])
    return report
