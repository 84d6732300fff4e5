"""Adaptive global collaborative learner.

LightGCN propagation over the fixed item graph, the same propagation over the
low-rank refined graph ``A + alpha * (A W_US)(A W_V)^T``, and the cosine InfoNCE
loss that ties the two views together.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .graphbuild import SparseGraph
from .numcore import ShapeError, csr_matmul

COMBINE_MODES = ("mean", "paper_literal")


@dataclass(frozen=True)
class GraphEncoderConfig:
    layers: int = 2
    layer_combine: str = "mean"
    tau: float = 0.2

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError(f"layers must be >= 1, got {self.layers}")
        if self.layer_combine not in COMBINE_MODES:
            raise ValueError(f"layer_combine must be one of {COMBINE_MODES}")
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")


def _np_dtype(t: torch.Tensor):
    return np.float64 if t.dtype == torch.float64 else np.float32


def _adj(graph: SparseGraph, like: torch.Tensor):
    mat = graph.scipy(_np_dtype(like))
    # the graph is symmetric, so the transpose needed by backward is the matrix itself
    return mat


def _check(graph: SparseGraph, e0: torch.Tensor) -> None:
    if e0.dim() != 2 or e0.shape[0] != graph.n:
        raise ShapeError(f"graph has {graph.n} nodes but embeddings have shape {tuple(e0.shape)}")


def _combine(layers: list[torch.Tensor], mode: str) -> torch.Tensor:
    total = torch.stack(layers, dim=0).sum(dim=0)
    if mode == "mean":
        return total / len(layers)
    if mode == "paper_literal":
        return total / (len(layers) - 1)
    raise ValueError(f"unknown layer_combine {mode!r}")


def propagate_factors(graph: SparseGraph, w_us: torch.Tensor, w_v: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """``(A @ W_US, A @ W_V)``, each ``n x d'``."""
    if w_us.shape != w_v.shape or w_us.shape[0] != graph.n:
        raise ShapeError(f"factor shapes {tuple(w_us.shape)} / {tuple(w_v.shape)} do not match graph size {graph.n}")
    mat = _adj(graph, w_us)
    return csr_matmul(mat, w_us, mat), csr_matmul(mat, w_v, mat)


def lightgcn_propagate(graph: SparseGraph, e0: torch.Tensor, layers: int = 2, combine: str = "mean") -> torch.Tensor:
    _check(graph, e0)
    mat = _adj(graph, e0)
    outs = [e0]
    for _ in range(layers):
        outs.append(csr_matmul(mat, outs[-1], mat))
    return _combine(outs, combine)


def perturbed_propagate(
    graph: SparseGraph,
    w_us: torch.Tensor,
    w_v: torch.Tensor,
    alpha: float,
    e0: torch.Tensor,
    layers: int = 2,
    combine: str = "mean",
    factors: tuple[torch.Tensor, torch.Tensor] | None = None,
) -> torch.Tensor:
    """LightGCN over the refined graph without forming any ``n x n`` matrix.

    Per layer: ``A E + alpha * (A W_US) ((A W_V)^T E)``. ``factors`` may carry
    precomputed ``propagate_factors`` output to share it with the sub-graph path.
    """
    _check(graph, e0)
    if alpha == 0.0:
        return lightgcn_propagate(graph, e0, layers, combine)
    aw_us, aw_v = factors if factors is not None else propagate_factors(graph, w_us, w_v)
    mat = _adj(graph, e0)
    outs = [e0]
    for _ in range(layers):
        prev = outs[-1]
        outs.append(csr_matmul(mat, prev, mat) + alpha * (aw_us @ (aw_v.T @ prev)))
    return _combine(outs, combine)


def gce_loss(
    e_orig: torch.Tensor,
    e_refined: torch.Tensor,
    items,
    tau: float = 0.2,
    reduction: str = "sum",
) -> torch.Tensor:
    """Cosine InfoNCE between original and refined representations of ``items``.

    Anchor ``i`` is the original view of item ``i``; its positive is the refined
    view of the same item and the refined views of the other items are negatives.
    """
    items = torch.as_tensor(np.asarray(items, dtype=np.int64))
    if items.numel() == 0:
        raise ValueError("gce_loss needs at least one item")
    if len(torch.unique(items)) != items.numel():
        raise ValueError("gce_loss items must be unique")
    if bool((items == 0).any()):
        raise ValueError("gce_loss items must not include the padding id")
    a = e_orig[items]
    b = e_refined[items]
    na = a.norm(dim=1, keepdim=True)
    nb = b.norm(dim=1, keepdim=True)
    if bool((na == 0).any()) or bool((nb == 0).any()):
        raise ValueError("zero-norm representation row; cosine similarity undefined")
    logits = (a / na) @ (b / nb).T / tau
    per_anchor = torch.logsumexp(logits, dim=1) - logits.diagonal()
    if reduction == "sum":
        return per_anchor.sum()
    if reduction == "mean":
        return per_anchor.mean()
    raise ValueError(f"unknown reduction {reduction!r}")
