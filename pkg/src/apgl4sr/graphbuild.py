"""Rule-based global item transition graph and per-sequence sub-graph extraction."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
import scipy.sparse as sp
import torch

from . import container

Accumulator = dict[tuple[int, int], float]

# below this node count a dense copy (<= 32 MB) makes sub-graph gathers cheaper
DENSE_LOOKUP_MAX_NODES = 2048


@dataclass(frozen=True)
class GraphBuildConfig:
    window: int = 2
    self_loop_weight: float = 1.0
    symmetrize: str = "sum"
    degree_mode: str = "weighted"

    def __post_init__(self):
        if self.window < 1:
            raise ValueError(f"window must be >= 1, got {self.window}")
        if self.symmetrize != "sum" or self.degree_mode != "weighted":
            raise ValueError("only symmetrize='sum' and degree_mode='weighted' are supported")


@dataclass
class SparseGraph:
    """Square CSR adjacency over ``n = num_items + 1`` nodes; node 0 is padding and stays empty."""

    n: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    values: np.ndarray
    config: GraphBuildConfig = GraphBuildConfig()

    def __post_init__(self):
        self.row_offsets = np.asarray(self.row_offsets, dtype=np.int64)
        self.col_indices = np.asarray(self.col_indices, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64)
        rows = np.repeat(np.arange(self.n, dtype=np.int64), np.diff(self.row_offsets))
        # globally sorted because rows ascend and columns ascend within a row
        self._keys = rows * self.n + self.col_indices
        self._scipy: dict[np.dtype, sp.csr_matrix] = {}
        self._dense: np.ndarray | None = None

    @property
    def nnz(self) -> int:
        return len(self.values)

    @property
    def num_items(self) -> int:
        return self.n - 1

    def scipy(self, dtype=np.float64) -> sp.csr_matrix:
        key = np.dtype(dtype)
        if key not in self._scipy:
            self._scipy[key] = sp.csr_matrix(
                (self.values.astype(key), self.col_indices, self.row_offsets), shape=(self.n, self.n)
            )
        return self._scipy[key]

    def to_dense(self) -> np.ndarray:
        return self.scipy().toarray()

    def lookup(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        """Vectorised entry lookup; absent pairs read as 0."""
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        if self.n <= DENSE_LOOKUP_MAX_NODES:
            if self._dense is None:
                self._dense = self.to_dense()
            return self._dense[rows, cols]
        keys = rows * self.n + cols
        pos = np.searchsorted(self._keys, keys)
        pos = np.minimum(pos, max(len(self._keys) - 1, 0))
        out = np.zeros(keys.shape, dtype=np.float64)
        if len(self._keys):
            hit = self._keys[pos] == keys
            out[hit] = self.values[pos[hit]]
        return out

    def is_symmetric(self) -> bool:
        m = self.scipy()
        diff = m - m.T
        return diff.nnz == 0 or not np.any(diff.data != 0)

    def to_entries(self) -> dict[str, np.ndarray]:
        return {
            "kind": container.encode_text("graph"),
            "n": np.uint64(self.n),
            "row_offsets": self.row_offsets.astype(np.uint64),
            "col_indices": self.col_indices.astype(np.uint32),
            "values": self.values.astype(np.float64),
            "config": container.encode_json(asdict(self.config)),
        }

    @classmethod
    def from_entries(cls, entries: dict[str, np.ndarray]) -> "SparseGraph":
        if container.decode_text(entries.get("kind", np.zeros(0, np.uint32))) != "graph":
            raise container.ContainerError("container does not hold a graph")
        return cls(
            n=int(entries["n"]),
            row_offsets=entries["row_offsets"],
            col_indices=entries["col_indices"],
            values=entries["values"],
            config=GraphBuildConfig(**container.decode_json(entries["config"])),
        )

    def save(self, path: str | Path) -> None:
        container.save(path, self.to_entries())

    @classmethod
    def load(cls, path: str | Path) -> "SparseGraph":
        return cls.from_entries(container.load(path))


def accumulate_cooccurrence(sequences: Iterable[np.ndarray], window: int = 2) -> Accumulator:
    """Directed sliding-window counts: ``w(s[t], s[t+j]) += 1/j`` for ``1 <= j <= window``.

    Callers must pass training views only, in a fixed (user id) order.
    """
    acc: Accumulator = defaultdict(float)
    for seq in sequences:
        seq = [int(v) for v in seq]
        for t, src in enumerate(seq):
            for j in range(1, min(window, len(seq) - 1 - t) + 1):
                acc[(src, seq[t + j])] += 1.0 / j
    return dict(acc)


def normalize_degrees(acc: Accumulator) -> Accumulator:
    """Scale each weight by ``1/deg(i) + 1/deg(j)`` using in+out weighted degree."""
    deg: dict[int, float] = defaultdict(float)
    for (i, j), w in acc.items():
        deg[i] += w
        deg[j] += w
    out = {}
    for (i, j), w in acc.items():
        scale = (1.0 / deg[i] if deg[i] else 0.0) + (1.0 / deg[j] if deg[j] else 0.0)
        out[(i, j)] = scale * w
    return out


def finalize_graph(acc: Accumulator, num_items: int, cfg: GraphBuildConfig = GraphBuildConfig()) -> SparseGraph:
    n = num_items + 1
    sym: dict[tuple[int, int], float] = defaultdict(float)
    for (i, j), w in sorted(acc.items()):
        if not (1 <= i <= num_items and 1 <= j <= num_items):
            raise ValueError(f"edge ({i}, {j}) outside item range 1..{num_items}")
        sym[(i, j)] += w
        sym[(j, i)] += w
    for v in range(1, n):
        sym[(v, v)] = cfg.self_loop_weight

    keys = sorted(sym)
    rows = np.array([k[0] for k in keys], dtype=np.int64)
    cols = np.array([k[1] for k in keys], dtype=np.int64)
    vals = np.array([sym[k] for k in keys], dtype=np.float64)
    row_offsets = np.zeros(n + 1, dtype=np.int64)
    np.add.at(row_offsets, rows + 1, 1)
    return SparseGraph(n, np.cumsum(row_offsets), cols, vals, cfg)


def build_graph(sequences: Iterable[np.ndarray], num_items: int, cfg: GraphBuildConfig = GraphBuildConfig()) -> SparseGraph:
    return finalize_graph(normalize_degrees(accumulate_cooccurrence(sequences, cfg.window)), num_items, cfg)


def graph_ids(seqs: np.ndarray, num_items: int) -> np.ndarray:
    """Map ids outside the graph (the mask token) onto the padding node."""
    seqs = np.asarray(seqs, dtype=np.int64)
    return np.where(seqs > num_items, 0, seqs)


def original_subgraph(graph: SparseGraph, seqs: np.ndarray) -> np.ndarray:
    """Batch of ``A[s_p, s_q]`` blocks, shape ``(..., N, N)``; padding rows/cols are zero."""
    ids = graph_ids(seqs, graph.num_items)
    rows = ids[..., :, None]
    cols = ids[..., None, :]
    rows, cols = np.broadcast_arrays(rows, cols)
    return graph.lookup(rows, cols)


def extract_subgraph(
    graph: SparseGraph,
    seqs,
    source: str = "refined",
    aw_us: torch.Tensor | None = None,
    aw_v: torch.Tensor | None = None,
    alpha: float = 0.0,
    dtype: torch.dtype = torch.float64,
) -> torch.Tensor:
    """Sub-graph of the original or refined graph restricted to each sequence's items.

    ``aw_us``/``aw_v`` are the propagated factors ``A @ W_US`` and ``A @ W_V``; the
    refined block is ``A[s, s] + alpha * aw_us[s] @ aw_v[s].T`` so the full
    perturbation matrix is never formed. Works on a single sequence ``(N,)`` or a
    batch ``(B, N)``.
    """
    seqs = np.asarray(seqs, dtype=np.int64)
    ids = graph_ids(seqs, graph.num_items)
    base = torch.as_tensor(original_subgraph(graph, ids), dtype=dtype)
    if source == "original" or alpha == 0.0:
        return base
    if source != "refined":
        raise ValueError(f"unknown sub-graph source {source!r}")
    if aw_us is None or aw_v is None:
        raise ValueError("refined sub-graph needs the propagated perturbation factors")
    idx = torch.as_tensor(ids)
    left = aw_us[idx]
    right = aw_v[idx]
    pert = left @ right.transpose(-1, -2)
    valid = (idx != 0).to(dtype)
    pert = pert * valid[..., :, None] * valid[..., None, :]
    return base + alpha * pert
