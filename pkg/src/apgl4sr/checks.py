"""Tiny end-to-end instance used by the finite-difference gradient contract."""

from __future__ import annotations

import numpy as np
import torch

from .dataio import Dataset, SequenceStore
from .graphbuild import build_graph
from .numcore import gradcheck
from .trainer import APGL4SR, TrainConfig, compute_losses, make_batch


def tiny_dataset(num_users: int = 8, num_items: int = 20, max_len: int = 6, seed: int = 0) -> Dataset:
    rng = np.random.default_rng(seed)
    seqs = [rng.integers(1, num_items + 1, size=int(rng.integers(5, max_len + 3))) for _ in range(num_users)]
    return Dataset(
        num_users=num_users,
        num_items=num_items,
        user_index={f"u{i}": i + 1 for i in range(num_users)},
        item_index={f"i{i}": i + 1 for i in range(num_items)},
        sequences=SequenceStore(seqs),
        max_len=max_len,
    )


def gradcheck_instance(seed: int = 0, **overrides):
    """Model, batch and a deterministic loss closure with every loss term active."""
    values = dict(d=8, max_len=6, rank=4, heads=2, n_layers=1, lambda1=0.1, lambda2=0.1, alpha=0.05,
                  dropout=0.0, dtype="float64", seed=seed, batch_size=8)
    values.update(overrides)
    cfg = TrainConfig(**values)
    data = tiny_dataset(max_len=cfg.max_len, seed=seed)
    graph = build_graph(data.train_views(), data.num_items)
    model = APGL4SR(cfg, data.num_users, data.num_items, graph)
    # move off the tiny init scale so every term has non-negligible gradients
    rng = np.random.default_rng(seed + 1)
    for name, p in model.registry.params.items():
        p.data.add_(torch.as_tensor(rng.standard_normal(tuple(p.shape)) * 0.3, dtype=p.dtype))
        for row in model.registry.pinned_rows.get(name, ()):
            p.data[row] = 0
    batch = make_batch(data, np.arange(1, data.num_users + 1), cfg, np.random.default_rng(seed))

    def loss_fn():
        return compute_losses(model, batch)["total"]

    return model, batch, loss_fn


def run_gradcheck(seed: int = 0, h: float = 1e-5, rtol: float = 1e-3, atol: float = 1e-6) -> dict[str, float]:
    model, _, loss_fn = gradcheck_instance(seed)
    return gradcheck(loss_fn, model.registry, h=h, rtol=rtol, atol=atol)
