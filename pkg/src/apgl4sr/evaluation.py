"""Full-catalogue leave-one-out ranking metrics (HR@K, NDCG@K)."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Sequence

import numpy as np
import torch

from .dataio import Dataset, pad_left

if TYPE_CHECKING:
    from .trainer import APGL4SR

DEFAULT_KS = (5, 20)


@dataclass
class MetricsReport:
    split: str
    num_users: int
    hr: dict[int, float] = field(default_factory=dict)
    ndcg: dict[int, float] = field(default_factory=dict)
    seed: int | None = None

    def to_dict(self) -> dict:
        out = {}
        for k in sorted(self.hr):
            out[f"hr@{k}"] = self.hr[k]
        for k in sorted(self.ndcg):
            out[f"ndcg@{k}"] = self.ndcg[k]
        out["num_users"] = self.num_users
        out["split"] = self.split
        out["seed"] = self.seed
        return out

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def rank_of_target(scores: np.ndarray, target: int, exclude) -> int:
    """1 + number of other eligible candidates scoring at least as high (the target loses ties)."""
    excluded = np.zeros(len(scores), dtype=bool)
    excluded[np.asarray(list(exclude), dtype=np.int64)] = True
    if excluded[target]:
        raise ValueError(f"target item {target} is in the exclusion set")
    excluded[target] = True
    better = (scores >= scores[target]) & ~excluded
    return 1 + int(better.sum())


def score_rank(rank: int, k: int) -> tuple[int, float]:
    if rank <= k:
        return 1, 1.0 / math.log2(rank + 1)
    return 0, 0.0


def rank_and_score(
    h_last,
    item_emb,
    exclude,
    target: int,
    ks: Sequence[int] = DEFAULT_KS,
    num_items: int | None = None,
) -> dict[int, tuple[int, float]]:
    """Hit and NDCG of ``target`` among all items, per cut-off.

    ``item_emb`` rows are indexed by item id; row 0 (padding) and any row past
    ``num_items`` (the mask token) are never candidates.
    """
    h = np.asarray(h_last, dtype=np.float64)
    table = np.asarray(item_emb, dtype=np.float64)
    num_items = table.shape[0] - 1 if num_items is None else num_items
    scores = table[: num_items + 1] @ h
    excl = set(int(e) for e in exclude) | {0}
    rank = rank_of_target(scores, target, excl)
    return {k: score_rank(rank, k) for k in ks}


def ranks_batch(scores: torch.Tensor, targets: torch.Tensor, exclude_mask: torch.Tensor) -> torch.Tensor:
    """Vectorised pessimistic ranks; ``scores`` is ``B x (num_items + 1)`` with column 0 = padding."""
    target_scores = scores.gather(1, targets[:, None])
    others = exclude_mask.clone()
    others[torch.arange(len(targets)), targets] = True
    better = (scores >= target_scores) & ~others
    return 1 + better.sum(dim=1)


def evaluate(
    model: "APGL4SR",
    dataset: Dataset,
    split: str = "test",
    ks: Sequence[int] = DEFAULT_KS,
    exclude_seen: bool = True,
    batch_size: int = 512,
    users: Sequence[int] | None = None,
) -> MetricsReport:
    """Average HR@K/NDCG@K over users, ranking every item against the held-out target.

    With ``exclude_seen`` the items of the user's input view are removed from the
    candidate list, except the target itself when the user re-consumed it.
    """
    if split not in ("valid", "test"):
        raise ValueError(f"unknown split {split!r}")
    if model.num_items != dataset.num_items or model.num_users != dataset.num_users:
        raise ValueError(
            f"checkpoint expects {model.num_users} users / {model.num_items} items, "
            f"dataset has {dataset.num_users} / {dataset.num_items}"
        )
    users = list(range(1, dataset.num_users + 1)) if users is None else list(users)
    n = model.cfg.max_len
    hits = {k: 0.0 for k in ks}
    gains = {k: 0.0 for k in ks}
    for start in range(0, len(users), batch_size):
        chunk = users[start : start + batch_size]
        views = [dataset.sequences.input_view(u, split) for u in chunk]
        seqs = np.stack([pad_left(v, n) for v in views])
        targets = torch.as_tensor([dataset.sequences.target(u, split) for u in chunk])
        with torch.no_grad():
            h = model.user_representation(seqs, np.asarray(chunk))
            scores = h @ model.registry["item_emb"][: dataset.num_items + 1].T
        mask = torch.zeros(scores.shape, dtype=torch.bool)
        mask[:, 0] = True
        if exclude_seen:
            for row, view in enumerate(views):
                mask[row, torch.as_tensor(view)] = True
            mask[torch.arange(len(chunk)), targets] = False
        ranks = ranks_batch(scores, targets, mask).numpy()
        # fixed user order keeps the float reduction deterministic
        for r in ranks:
            for k in ks:
                hit, gain = score_rank(int(r), k)
                hits[k] += hit
                gains[k] += gain
    count = len(users)
    return MetricsReport(
        split=split,
        num_users=count,
        hr={k: hits[k] / count for k in ks},
        ndcg={k: gains[k] / count for k in ks},
        seed=model.cfg.seed,
    )
