"""Seeded synthetic interaction logs with planted cluster structure.

Items are split into equal clusters. Each user walks through clusters: at every
step it stays in the current cluster with probability ``1 - cross_cluster_prob``,
otherwise it jumps. Where it jumps is decided by a hidden cluster-transition
chain for "global" users and by a uniform draw for "local" users, so users
differ in how much the shared structure explains their behaviour. The next
item is uniform within the destination cluster.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataio import InteractionLog

GLOBAL_WEIGHT = 0.9
LOCAL_WEIGHT = 0.1


@dataclass
class SynthConfig:
    num_items: int = 200
    num_clusters: int = 4
    num_users: int = 2000
    seq_len_range: tuple[int, int] = (5, 12)
    cross_cluster_prob: float = 0.3
    user_globality_mix: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.num_clusters < 1 or self.num_items % self.num_clusters:
            raise ValueError(f"num_items ({self.num_items}) must be divisible by num_clusters ({self.num_clusters})")
        lo, hi = self.seq_len_range
        if not 1 <= lo <= hi:
            raise ValueError(f"bad seq_len_range {self.seq_len_range}")
        if not 0 <= self.cross_cluster_prob <= 1 or not 0 <= self.user_globality_mix <= 1:
            raise ValueError("probabilities must lie in [0, 1]")


@dataclass
class SynthTruth:
    chain: np.ndarray          # C x C jump destinations for global users (zero diagonal when C > 1)
    globality: np.ndarray      # per-user weight on the chain, index = user position
    cluster_of: np.ndarray     # cluster of item id (index 0 unused)

    def expected_cluster_transitions(self, cross_cluster_prob: float, globality: float) -> np.ndarray:
        """Cluster-to-cluster step distribution for a user with the given chain weight."""
        c = self.chain.shape[0]
        uniform = np.full((c, c), 1.0 / c)
        jump = globality * self.chain + (1.0 - globality) * uniform
        return (1.0 - cross_cluster_prob) * np.eye(c) + cross_cluster_prob * jump


def planted_chain(num_clusters: int, rng: np.random.Generator) -> np.ndarray:
    if num_clusters == 1:
        return np.ones((1, 1))
    chain = np.zeros((num_clusters, num_clusters))
    for c in range(num_clusters):
        others = [o for o in range(num_clusters) if o != c]
        chain[c, others] = rng.dirichlet(np.full(len(others), 0.5))
    return chain


def generate(cfg: SynthConfig) -> tuple[InteractionLog, SynthTruth, list[np.ndarray]]:
    """Return the log, the planted parameters and the per-user item sequences."""
    rng = np.random.default_rng(cfg.seed)
    per_cluster = cfg.num_items // cfg.num_clusters
    chain = planted_chain(cfg.num_clusters, rng)
    is_global = rng.random(cfg.num_users) < cfg.user_globality_mix
    globality = np.where(is_global, GLOBAL_WEIGHT, LOCAL_WEIGHT)
    cluster_of = np.concatenate([[-1], np.repeat(np.arange(cfg.num_clusters), per_cluster)])

    records = []
    sequences = []
    lo, hi = cfg.seq_len_range
    for u in range(cfg.num_users):
        length = int(rng.integers(lo, hi + 1))
        cluster = int(rng.integers(cfg.num_clusters))
        seq = []
        for t in range(length):
            if t > 0 and rng.random() < cfg.cross_cluster_prob:
                if rng.random() < globality[u]:
                    cluster = int(rng.choice(cfg.num_clusters, p=chain[cluster]))
                else:
                    cluster = int(rng.integers(cfg.num_clusters))
            item = cluster * per_cluster + int(rng.integers(per_cluster)) + 1
            seq.append(item)
            records.append((f"u{u}", f"i{item}", t))
        sequences.append(np.array(seq, dtype=np.int64))
    return InteractionLog(records), SynthTruth(chain, globality, cluster_of), sequences


def gen_synthetic(
    num_items: int = 200,
    num_clusters: int = 4,
    num_users: int = 2000,
    seq_len_range: tuple[int, int] = (5, 12),
    cross_cluster_prob: float = 0.3,
    user_globality_mix: float = 0.5,
    seed: int = 0,
) -> InteractionLog:
    cfg = SynthConfig(num_items, num_clusters, num_users, tuple(seq_len_range),
                      cross_cluster_prob, user_globality_mix, seed)
    return generate(cfg)[0]


def write_log(ilog: InteractionLog, path, delimiter: str = "\t") -> None:
    with open(path, "w") as fh:
        for user, item, ts in ilog.records:
            fh.write(f"{user}{delimiter}{item}{delimiter}{ts}\n")
