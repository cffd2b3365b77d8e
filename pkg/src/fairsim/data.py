"""Interaction data: CSV ingestion, synthetic low-rank generation,
per-user train/test splits, negative sampling, and per-device partitions.

One device per user throughout: device i holds exactly user i's training
records, and the per-device sample counts feed the aggregation weights.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fileio import atomic_write_text

logger = logging.getLogger(__name__)

IMPLICIT = "implicit"
EXPLICIT = "explicit"


class DataError(ValueError):
    pass


@dataclass
class InteractionDataset:
    """Flat (user, item, rating) records with a train/test tag per record."""

    num_users: int
    num_items: int
    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    is_test: np.ndarray
    kind: str
    duplicates_dropped: int = 0
    _train_pos: list | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in (IMPLICIT, EXPLICIT):
            raise DataError(f"kind must be '{IMPLICIT}' or '{EXPLICIT}', got '{self.kind}'")
        if len(self.users) and (self.users.min() < 0 or self.users.max() >= self.num_users):
            raise DataError("user index out of range")
        if len(self.items) and (self.items.min() < 0 or self.items.max() >= self.num_items):
            raise DataError("item index out of range")
        if not np.all(np.isfinite(self.ratings)):
            raise DataError("ratings must be finite")
        if self.kind == IMPLICIT and len(self.ratings) and not np.all(self.ratings == 1.0):
            raise DataError("implicit datasets carry rating 1 on every record")
        for split in (False, True):
            sel = self.is_test == split
            keys = self.users[sel].astype(np.int64) * self.num_items + self.items[sel]
            if len(np.unique(keys)) != len(keys):
                raise DataError("duplicate (user, item) pair within a split")

    def __len__(self) -> int:
        return len(self.users)

    def train_items_of(self, user: int) -> np.ndarray:
        """Sorted train item ids of one user (cached)."""
        if self._train_pos is None:
            per_user = [[] for _ in range(self.num_users)]
            for u, i, t in zip(self.users, self.items, self.is_test):
                if not t:
                    per_user[u].append(i)
            self._train_pos = [np.sort(np.array(lst, dtype=np.int64)) for lst in per_user]
        return self._train_pos[user]

    def test_records_of(self, user: int) -> tuple[np.ndarray, np.ndarray]:
        sel = (self.users == user) & self.is_test
        return self.items[sel], self.ratings[sel]

    def num_train_records(self) -> int:
        return int(np.sum(~self.is_test))


def _parse_int(text: str, lineno: int, column: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise DataError(f"line {lineno}: non-numeric {column} value '{text}'") from None


def _parse_float(text: str, lineno: int, column: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise DataError(f"line {lineno}: non-numeric {column} value '{text}'") from None
    if not math.isfinite(value):
        raise DataError(f"line {lineno}: non-finite {column} value '{text}'")
    return value


def _write_id_mapping(path: Path, mapping: dict) -> None:
    lines = ["raw_id,dense_id"]
    lines += [f"{raw},{dense}" for raw, dense in mapping.items()]
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_csv(path, kind: str, mapping_dir=None) -> InteractionDataset:
    """Read `user_id,item_id[,rating]` rows (header required), densify ids.

    Raw-to-dense id mappings are persisted as `<stem>.user_ids.csv` and
    `<stem>.item_ids.csv` sidecars.  Duplicate (user, item) rows keep the
    first occurrence; the drop count is logged and recorded on the dataset.
    """
    path = Path(path)
    if kind not in (IMPLICIT, EXPLICIT):
        raise DataError(f"kind must be '{IMPLICIT}' or '{EXPLICIT}', got '{kind}'")
    if not path.exists():
        raise DataError(f"no such file: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file, expected a header line") from None
        header = [h.strip() for h in header]
        if header[:2] != ["user_id", "item_id"]:
            raise DataError(f"{path}: header must start with 'user_id,item_id', got {','.join(header)}")
        has_rating = len(header) >= 3
        if kind == EXPLICIT and not has_rating:
            raise DataError(f"{path}: explicit data needs a rating column")

        user_map: dict[int, int] = {}
        item_map: dict[int, int] = {}
        seen: set[tuple[int, int]] = set()
        users, items, ratings = [], [], []
        dropped = 0
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue  # blank line
            if len(row) < 2 or (kind == EXPLICIT and len(row) < 3):
                raise DataError(f"line {lineno}: expected {3 if kind == EXPLICIT else 2}+ fields, got {len(row)}")
            raw_u = _parse_int(row[0].strip(), lineno, "user_id")
            raw_i = _parse_int(row[1].strip(), lineno, "item_id")
            rating = 1.0
            if kind == EXPLICIT:
                rating = _parse_float(row[2].strip(), lineno, "rating")
            if (raw_u, raw_i) in seen:
                dropped += 1
                continue
            seen.add((raw_u, raw_i))
            users.append(user_map.setdefault(raw_u, len(user_map)))
            items.append(item_map.setdefault(raw_i, len(item_map)))
            ratings.append(rating)

    if dropped:
        logger.warning("%s: dropped %d duplicate (user, item) rows", path, dropped)
    out_dir = Path(mapping_dir) if mapping_dir is not None else path.parent
    _write_id_mapping(out_dir / f"{path.stem}.user_ids.csv", user_map)
    _write_id_mapping(out_dir / f"{path.stem}.item_ids.csv", item_map)
    n = len(users)
    return InteractionDataset(
        num_users=len(user_map), num_items=len(item_map),
        users=np.array(users, dtype=np.int64), items=np.array(items, dtype=np.int64),
        ratings=np.array(ratings, dtype=np.float64), is_test=np.zeros(n, dtype=bool),
        kind=kind, duplicates_dropped=dropped)


def synth_lowrank(num_users: int, num_items: int, latent_dim: int, density: float,
                  noise_sd: float, seed, kind: str) -> InteractionDataset:
    """Rank-`latent_dim` synthetic interactions, deterministic per seed.

    Scores are U V^T with standard-normal factors.  Implicit: each user's
    top-ceil(density * num_items) items by score become positives.
    Explicit: the same per-user count of uniformly chosen items, observed
    as score + noise.
    """
    if num_users < 1 or num_items < 1:
        raise DataError(f"need at least one user and one item, got {num_users}x{num_items}")
    if not (0.0 < density <= 1.0):
        raise DataError(f"density must be in (0, 1], got {density}")
    if latent_dim < 1:
        raise DataError(f"latent_dim must be >= 1, got {latent_dim}")
    if kind not in (IMPLICIT, EXPLICIT):
        raise DataError(f"kind must be '{IMPLICIT}' or '{EXPLICIT}', got '{kind}'")
    rng = np.random.default_rng(seed)
    U = rng.standard_normal((num_users, latent_dim))
    V = rng.standard_normal((num_items, latent_dim))
    per_user = math.ceil(density * num_items)
    users, items, ratings = [], [], []
    for u in range(num_users):
        scores = U[u] @ V.T
        if kind == IMPLICIT:
            chosen = np.argsort(-scores, kind="stable")[:per_user]
            chosen = np.sort(chosen)
            vals = np.ones(per_user)
        else:
            chosen = np.sort(rng.choice(num_items, size=per_user, replace=False))
            vals = scores[chosen]
            if noise_sd > 0.0:
                vals = vals + noise_sd * rng.standard_normal(per_user)
        users.append(np.full(per_user, u, dtype=np.int64))
        items.append(chosen.astype(np.int64))
        ratings.append(vals)
    n = num_users * per_user
    return InteractionDataset(
        num_users=num_users, num_items=num_items,
        users=np.concatenate(users), items=np.concatenate(items),
        ratings=np.concatenate(ratings), is_test=np.zeros(n, dtype=bool), kind=kind)


def split_train_test(ds: InteractionDataset, holdout_per_user: int, seed) -> InteractionDataset:
    """Leave-k-out: uniformly tag `holdout_per_user` records per user as test."""
    if holdout_per_user < 0:
        raise DataError(f"holdout_per_user must be >= 0, got {holdout_per_user}")
    counts = np.bincount(ds.users, minlength=ds.num_users)
    if holdout_per_user > 0:
        too_few = np.flatnonzero(counts <= holdout_per_user)
        if len(too_few):
            raise DataError(
                f"users with <= {holdout_per_user} interactions cannot be split: "
                f"ids {too_few[:10].tolist()}")
    is_test = np.zeros(len(ds), dtype=bool)
    if holdout_per_user > 0:
        rng = np.random.default_rng(seed)
        for u in range(ds.num_users):
            rows = np.flatnonzero(ds.users == u)
            picked = rng.choice(rows, size=holdout_per_user, replace=False)
            is_test[picked] = True
    return InteractionDataset(
        num_users=ds.num_users, num_items=ds.num_items,
        users=ds.users.copy(), items=ds.items.copy(), ratings=ds.ratings.copy(),
        is_test=is_test, kind=ds.kind, duplicates_dropped=ds.duplicates_dropped)


def sample_negatives(ds: InteractionDataset, user: int, count: int, rng) -> list[int]:
    """`count` items uniform over the complement of the user's TRAIN positives.

    Test positives stay eligible: during training they are negatives like
    any other un-trained-on item.
    """
    pos = ds.train_items_of(user)
    available = ds.num_items - len(pos)
    if available <= 0:
        raise DataError(f"user {user} has no non-positive item to sample")
    pos_set = set(pos.tolist())
    out: list[int] = []
    while len(out) < count:
        cand = int(rng.integers(ds.num_items))
        if cand not in pos_set:
            out.append(cand)
    return out


@dataclass
class DevicePartition:
    """Per-device training data; device i is user i."""

    num_devices: int
    train_items: list
    train_ratings: list
    sample_counts: np.ndarray

    @classmethod
    def from_dataset(cls, ds: InteractionDataset) -> "DevicePartition":
        items, ratings = [], []
        for u in range(ds.num_users):
            sel = (ds.users == u) & ~ds.is_test
            items.append(ds.items[sel])
            ratings.append(ds.ratings[sel])
        counts = np.array([len(x) for x in items], dtype=np.int64)
        return cls(num_devices=ds.num_users, train_items=items,
                   train_ratings=ratings, sample_counts=counts)
