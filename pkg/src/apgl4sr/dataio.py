"""Interaction-log ingestion, k-core filtering, indexing and leave-one-out splits."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import container

log = logging.getLogger(__name__)

PAD = 0


class DataError(ValueError):
    pass


@dataclass
class InteractionLog:
    records: list[tuple[str, str, int]] = field(default_factory=list)
    malformed: int = 0

    def __len__(self) -> int:
        return len(self.records)


def parse_log(path: str | Path, delimiter: str = "\t", strict: bool = False) -> InteractionLog:
    """Read ``user<delim>item<delim>timestamp`` lines; extra columns are ignored."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read interaction log {path}: {exc}") from exc

    records = []
    bad_lines = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split(delimiter)
        try:
            user, item, ts = parts[0].strip(), parts[1].strip(), parts[2].strip()
            if not user or not item:
                raise ValueError("empty id")
            records.append((user, item, int(ts)))
        except (IndexError, ValueError):
            bad_lines.append(lineno)

    if bad_lines:
        msg = f"{path}: {len(bad_lines)} malformed line(s), first at line {bad_lines[0]}"
        if strict:
            raise DataError(msg)
        log.warning(msg)
    if not records:
        log.warning("%s: no interaction records", path)
    return InteractionLog(records, malformed=len(bad_lines))


def five_core_filter(ilog: InteractionLog, min_count: int = 5) -> InteractionLog:
    """Drop users and items with fewer than ``min_count`` interactions, repeated to a fixpoint."""
    if min_count < 1:
        raise DataError(f"min_count must be >= 1, got {min_count}")
    records = ilog.records
    while True:
        users = Counter(r[0] for r in records)
        items = Counter(r[1] for r in records)
        kept = [r for r in records if users[r[0]] >= min_count and items[r[1]] >= min_count]
        if len(kept) == len(records):
            break
        records = kept
    if not records:
        raise DataError(
            f"{min_count}-core filtering removed every record "
            f"({len(ilog.records)} in, {len(set(r[0] for r in ilog.records))} users)"
        )
    return InteractionLog(records, malformed=ilog.malformed)


class SequenceStore:
    """Per-user chronological item sequences; user ``u`` lives at index ``u - 1``.

    The last item is the test target, the second to last the validation target,
    and everything before is the training view.
    """

    def __init__(self, sequences: list[np.ndarray]):
        self.sequences = [np.asarray(s, dtype=np.int64) for s in sequences]

    def __len__(self) -> int:
        return len(self.sequences)

    def full(self, user: int) -> np.ndarray:
        return self.sequences[user - 1]

    def train_view(self, user: int) -> np.ndarray:
        return self.sequences[user - 1][:-2]

    def valid_target(self, user: int) -> int:
        return int(self.sequences[user - 1][-2])

    def test_target(self, user: int) -> int:
        return int(self.sequences[user - 1][-1])

    def input_view(self, user: int, split: str) -> np.ndarray:
        """History fed to the encoder when predicting the ``split`` target."""
        if split == "valid":
            return self.sequences[user - 1][:-2]
        if split == "test":
            return self.sequences[user - 1][:-1]
        raise DataError(f"unknown split {split!r}; expected 'valid' or 'test'")

    def target(self, user: int, split: str) -> int:
        return self.valid_target(user) if split == "valid" else self.test_target(user)


def pad_left(seq: np.ndarray, length: int) -> np.ndarray:
    """Keep the most recent ``length`` items and left-pad with the padding id."""
    seq = np.asarray(seq, dtype=np.int64)[-length:] if length > 0 else np.zeros(0, np.int64)
    out = np.zeros(length, dtype=np.int64)
    if len(seq):
        out[length - len(seq) :] = seq
    return out


@dataclass
class Dataset:
    num_users: int
    num_items: int
    user_index: dict[str, int]
    item_index: dict[str, int]
    sequences: SequenceStore
    max_len: int

    @property
    def mask_id(self) -> int:
        return self.num_items + 1

    def train_views(self) -> list[np.ndarray]:
        return [self.sequences.train_view(u) for u in range(1, self.num_users + 1)]

    def to_entries(self) -> dict[str, np.ndarray]:
        seqs = self.sequences.sequences
        offsets = np.zeros(len(seqs) + 1, dtype=np.uint64)
        offsets[1:] = np.cumsum([len(s) for s in seqs])
        flat = np.concatenate(seqs).astype(np.uint32) if seqs else np.zeros(0, np.uint32)
        users = sorted(self.user_index, key=self.user_index.__getitem__)
        items = sorted(self.item_index, key=self.item_index.__getitem__)
        return {
            "kind": container.encode_text("dataset"),
            "num_users": np.uint64(self.num_users),
            "num_items": np.uint64(self.num_items),
            "max_len": np.uint64(self.max_len),
            "seq_offsets": offsets,
            "seq_items": flat,
            "user_ids": container.encode_json(users),
            "item_ids": container.encode_json(items),
        }

    @classmethod
    def from_entries(cls, entries: dict[str, np.ndarray]) -> "Dataset":
        if container.decode_text(entries.get("kind", np.zeros(0, np.uint32))) != "dataset":
            raise container.ContainerError("container does not hold a dataset")
        offsets = entries["seq_offsets"].astype(np.int64)
        flat = entries["seq_items"].astype(np.int64)
        seqs = [flat[offsets[i] : offsets[i + 1]] for i in range(len(offsets) - 1)]
        users = container.decode_json(entries["user_ids"])
        items = container.decode_json(entries["item_ids"])
        return cls(
            num_users=int(entries["num_users"]),
            num_items=int(entries["num_items"]),
            user_index={raw: i + 1 for i, raw in enumerate(users)},
            item_index={raw: i + 1 for i, raw in enumerate(items)},
            sequences=SequenceStore(seqs),
            max_len=int(entries["max_len"]),
        )

    def save(self, path: str | Path) -> None:
        container.save(path, self.to_entries())

    @classmethod
    def load(cls, path: str | Path) -> "Dataset":
        return cls.from_entries(container.load(path))


def build_dataset(ilog: InteractionLog, max_len: int) -> Dataset:
    """Index users/items by first appearance and group records into time-ordered sequences.

    Sequences longer than ``max_len + 2`` keep their most recent ``max_len + 2``
    items, so the training view never exceeds ``max_len``.
    """
    user_index: dict[str, int] = {}
    item_index: dict[str, int] = {}
    per_user: dict[int, list[tuple[int, int]]] = {}
    for user, item, ts in ilog.records:
        uid = user_index.setdefault(user, len(user_index) + 1)
        iid = item_index.setdefault(item, len(item_index) + 1)
        per_user.setdefault(uid, []).append((ts, iid))

    sequences = []
    for uid in range(1, len(user_index) + 1):
        events = sorted(per_user[uid], key=lambda e: e[0])  # stable: ties keep input order
        seq = [iid for _, iid in events][-(max_len + 2) :]
        if len(seq) < 3:
            raise DataError(f"user {uid} has {len(seq)} interactions; leave-one-out needs at least 3")
        sequences.append(np.array(seq, dtype=np.int64))

    return Dataset(
        num_users=len(user_index),
        num_items=len(item_index),
        user_index=user_index,
        item_index=item_index,
        sequences=SequenceStore(sequences),
        max_len=max_len,
    )


def sample_negative(rng: np.random.Generator, seq, num_items: int) -> int:
    """Draw one item uniformly from the catalogue minus the items in ``seq``."""
    seen = set(int(i) for i in seq)
    if num_items <= len(seen & set(range(1, num_items + 1))):
        raise DataError(f"no negative available: sequence covers all {num_items} items")
    while True:
        item = int(rng.integers(1, num_items + 1))
        if item not in seen:
            return item


def sample_negatives(rng: np.random.Generator, seq, count: int, num_items: int) -> np.ndarray:
    """Vectorised rejection sampling of ``count`` independent negatives for one sequence."""
    seen = np.zeros(num_items + 2, dtype=bool)
    seen[np.asarray(seq, dtype=np.int64)] = True
    if seen[1 : num_items + 1].all():
        raise DataError(f"no negative available: sequence covers all {num_items} items")
    out = rng.integers(1, num_items + 1, size=count)
    bad = seen[out]
    while bad.any():
        out[bad] = rng.integers(1, num_items + 1, size=int(bad.sum()))
        bad = seen[out]
    return out
