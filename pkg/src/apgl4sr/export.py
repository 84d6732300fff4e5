"""Data exporters: 2-D embedding projection CSV."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .numcore import top2_svd_project


def item_table(model) -> np.ndarray:
    """Item embeddings for ids ``1..num_items`` (padding and mask rows dropped)."""
    return model.registry["item_emb"].detach().numpy()[1 : model.num_items + 1].astype(np.float64)


def export_projection(model, path: str | Path, iters: int = 500) -> np.ndarray:
    emb = item_table(model)
    coords = top2_svd_project(emb, iters=iters)
    write_projection(coords, path)
    return coords


def write_projection(coords: np.ndarray, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["item_id", "x", "y"])
        for i, (x, y) in enumerate(coords, start=1):
            writer.writerow([i, repr(float(x)), repr(float(y))])
