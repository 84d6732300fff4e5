"""Causal Transformer encoder with a per-user graph bias on the attention logits.

Also hosts the crop/mask/reorder augmentations and the sequence-level
contrastive loss used as an auxiliary objective.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np
import torch
import torch.nn.functional as F

from .dataio import pad_left
from .numcore import ShapeError, gather_rows, relu, softmax_rows

LN_EPS = 1e-12
AUG_OPS = ("crop", "mask", "reorder")


@dataclass(frozen=True)
class AugmentationConfig:
    ops: tuple[str, ...] = AUG_OPS
    crop_keep: float = 0.6
    mask_ratio: float = 0.3
    reorder_ratio: float = 0.6

    def __post_init__(self):
        for r in (self.crop_keep, self.mask_ratio, self.reorder_ratio):
            if not 0 < r <= 1:
                raise ValueError(f"augmentation ratios must lie in (0, 1], got {r}")
        unknown = set(self.ops) - set(AUG_OPS)
        if unknown or not self.ops:
            raise ValueError(f"unknown augmentation ops {sorted(unknown)}")


def layer_names(i: int) -> list[str]:
    p = f"layers.{i}."
    return [p + n for n in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln1.g", "ln1.b",
                            "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2", "ln2.g", "ln2.b")]


def layer_shapes(d: int) -> dict[str, tuple[int, ...]]:
    return {
        "wq": (d, d), "bq": (d,), "wk": (d, d), "bk": (d,), "wv": (d, d), "bv": (d,),
        "wo": (d, d), "bo": (d,), "ln1.g": (d,), "ln1.b": (d,),
        "ffn.w1": (d, 4 * d), "ffn.b1": (4 * d,), "ffn.w2": (4 * d, d), "ffn.b2": (d,),
        "ln2.g": (d,), "ln2.b": (d,),
    }


def pge_hidden(d: int) -> int:
    return math.ceil(d / 2)


def pge_scale(params: Mapping[str, torch.Tensor], users) -> torch.Tensor:
    """Scalar per user from the user-embedding MLP ``d -> ceil(d/2) -> 1``."""
    users = torch.as_tensor(users, dtype=torch.long)
    table = params["user_emb"]
    if users.numel() and (int(users.min()) < 1 or int(users.max()) >= table.shape[0]):
        raise KeyError(f"unknown user id(s) for user table with {table.shape[0] - 1} users")
    s = table[users]
    hidden = relu(s @ params["pge.w1"] + params["pge.b1"])
    return (hidden @ params["pge.w2"] + params["pge.b2"]).squeeze(-1)


def personalized_pe(users, subgraph: torch.Tensor, params: Mapping[str, torch.Tensor]) -> torch.Tensor:
    """``MLP(s_u) * A_sub`` for one user (``N x N``) or a batch (``B x N x N``)."""
    c = pge_scale(params, users)
    if subgraph.dim() == 2:
        return c.reshape(()) * subgraph
    return c[:, None, None] * subgraph


def _dropout(x: torch.Tensor, p: float, gen: torch.Generator | None) -> torch.Tensor:
    if p <= 0.0 or gen is None:
        return x
    keep = torch.rand(x.shape, generator=gen, dtype=x.dtype) >= p
    return x * keep / (1.0 - p)


def attention_weights(logits: torch.Tensor, allowed: torch.Tensor) -> torch.Tensor:
    """Row softmax over allowed keys; rows with no allowed key get all-zero weights."""
    empty = ~allowed.any(dim=-1, keepdim=True)
    masked = logits.masked_fill(~allowed, float("-inf")).masked_fill(empty, 0.0)
    return softmax_rows(masked).masked_fill(~allowed, 0.0)


def encode_sequence(
    seqs,
    params: Mapping[str, torch.Tensor],
    n_layers: int,
    heads: int = 2,
    pe: torch.Tensor | None = None,
    dropout: float = 0.0,
    gen: torch.Generator | None = None,
    return_attention: bool = False,
):
    """Hidden states ``(B, N, d)`` for left-padded id sequences ``(B, N)``.

    ``pe`` (``B x N x N``) is added to every head's scaled logits before the
    causal and padding masks are applied.
    """
    seqs = torch.as_tensor(np.asarray(seqs), dtype=torch.long)
    squeeze = seqs.dim() == 1
    if squeeze:
        seqs = seqs[None]
        if pe is not None and pe.dim() == 2:
            pe = pe[None]
    bsz, n = seqs.shape
    pos = params["pos_emb"]
    if n != pos.shape[0]:
        raise ShapeError(f"sequence length {n} does not match positional table {tuple(pos.shape)}")
    d = pos.shape[1]
    if d % heads:
        raise ShapeError(f"hidden size {d} not divisible by {heads} heads")
    key_ok = seqs != 0
    if not bool(key_ok.any(dim=1).all()):
        raise ValueError("cannot encode an all-padding sequence")

    causal = torch.ones(n, n, dtype=torch.bool).tril()
    allowed = (causal[None] & key_ok[:, None, :])[:, None]  # B,1,N,N
    dh = d // heads
    h = gather_rows(params["item_emb"], seqs) + pos
    h = _dropout(h, dropout, gen)
    attn_maps = []
    for i in range(n_layers):
        p = f"layers.{i}."
        q = (h @ params[p + "wq"] + params[p + "bq"]).view(bsz, n, heads, dh).transpose(1, 2)
        k = (h @ params[p + "wk"] + params[p + "bk"]).view(bsz, n, heads, dh).transpose(1, 2)
        v = (h @ params[p + "wv"] + params[p + "bv"]).view(bsz, n, heads, dh).transpose(1, 2)
        logits = q @ k.transpose(-1, -2) / math.sqrt(dh)
        if pe is not None:
            logits = logits + pe[:, None]
        weights = attention_weights(logits, allowed)
        attn_maps.append(weights)
        mixed = (_dropout(weights, dropout, gen) @ v).transpose(1, 2).reshape(bsz, n, d)
        out = mixed @ params[p + "wo"] + params[p + "bo"]
        h = F.layer_norm(h + _dropout(out, dropout, gen), (d,), params[p + "ln1.g"], params[p + "ln1.b"], LN_EPS)
        ff = F.gelu(h @ params[p + "ffn.w1"] + params[p + "ffn.b1"]) @ params[p + "ffn.w2"] + params[p + "ffn.b2"]
        h = F.layer_norm(h + _dropout(ff, dropout, gen), (d,), params[p + "ln2.g"], params[p + "ln2.b"], LN_EPS)
    if squeeze:
        h = h[0]
    if return_attention:
        return h, attn_maps
    return h


def augment(
    seq,
    cfg: AugmentationConfig,
    rng: np.random.Generator,
    mask_id: int,
    max_len: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Two independently augmented, left-padded views of an unpadded sequence."""
    seq = np.asarray(seq, dtype=np.int64)
    views = []
    for _ in range(2):
        op = cfg.ops[int(rng.integers(len(cfg.ops)))]
        views.append(pad_left(apply_augmentation(seq, op, cfg, rng, mask_id), max_len))
    return views[0], views[1]


def apply_augmentation(seq: np.ndarray, op: str, cfg: AugmentationConfig, rng: np.random.Generator, mask_id: int) -> np.ndarray:
    n = len(seq)
    if n == 0:
        return seq.copy()
    if op == "crop":
        keep = math.ceil(cfg.crop_keep * n)
        start = int(rng.integers(n - keep + 1))
        return seq[start : start + keep].copy()
    if op == "mask":
        count = math.ceil(cfg.mask_ratio * n)
        out = seq.copy()
        out[rng.choice(n, size=count, replace=False)] = mask_id
        return out
    if op == "reorder":
        span = math.ceil(cfg.reorder_ratio * n)
        start = int(rng.integers(n - span + 1))
        out = seq.copy()
        out[start : start + span] = rng.permutation(out[start : start + span])
        return out
    raise ValueError(f"unknown augmentation {op!r}")


def seq_cl_loss(z1: torch.Tensor, z2: torch.Tensor, tau: float = 1.0, reduction: str = "sum") -> torch.Tensor:
    """Symmetric in-batch InfoNCE over paired views with a dot-product critic.

    Each of the ``2B`` views is an anchor; its partner view is the positive and
    the remaining ``2B - 2`` views are negatives.
    """
    if z1.shape != z2.shape:
        raise ShapeError(f"view shapes differ: {tuple(z1.shape)} vs {tuple(z2.shape)}")
    bsz = z1.shape[0]
    if bsz == 0:
        raise ValueError("seq_cl_loss needs at least one sequence")
    z = torch.cat([z1, z2], dim=0)
    sim = z @ z.T / tau
    sim = sim.masked_fill(torch.eye(2 * bsz, dtype=torch.bool), float("-inf"))
    partner = torch.cat([torch.arange(bsz, 2 * bsz), torch.arange(bsz)])
    per_anchor = torch.logsumexp(sim, dim=1) - sim[torch.arange(2 * bsz), partner]
    if reduction == "sum":
        return per_anchor.sum()
    if reduction == "mean":
        return per_anchor.mean()
    raise ValueError(f"unknown reduction {reduction!r}")
