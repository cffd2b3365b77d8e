"""Ranking and rating metrics over the server model, plus the run log.

ndcg@k ranks every item the user has not trained on (test positives are
candidates with gain 1, everything else gain 0); ties break by ascending
item id so evaluation is deterministic.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .data import EXPLICIT, IMPLICIT, InteractionDataset
from .fileio import atomic_write_text

CSV_HEADER = ["round", "mode", "scheme", "seed", "metric", "value"]


def ndcg_at_k(scores: np.ndarray, train_positives, test_positives, k: int) -> float:
    """DCG of test positives in the top-k candidate ranking over its ideal."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    scores = np.asarray(scores, dtype=np.float64)
    train_positives = np.asarray(train_positives, dtype=np.int64)
    test_positives = np.asarray(test_positives, dtype=np.int64)
    if len(test_positives) == 0:
        raise ValueError("no test positives to rank")
    mask = np.ones(len(scores), dtype=bool)
    mask[train_positives] = False
    candidates = np.flatnonzero(mask)
    if len(candidates) == 0:
        raise ValueError("candidate set is empty (every item is a train positive)")
    # lexsort: primary key last -> descending score, then ascending item id
    order = np.lexsort((candidates, -scores[candidates]))
    top = candidates[order[:k]]
    hits = np.isin(top, test_positives)
    ranks = np.flatnonzero(hits) + 1
    dcg = float(np.sum(1.0 / np.log2(ranks + 1.0)))
    ideal = np.arange(1, min(k, len(test_positives)) + 1)
    idcg = float(np.sum(1.0 / np.log2(ideal + 1.0)))
    return dcg / idcg


def evaluate_server(theta: np.ndarray, dataset: InteractionDataset,
                    user_vecs: np.ndarray, k: int = 20) -> float:
    """Server-model quality on the test split.

    Implicit: mean ndcg@k over users with a non-empty test set, each scored
    with that user's (device-local, frozen) vector against the server item
    table.  Explicit: MSE over all test records.
    """
    user_vecs = np.asarray(user_vecs, dtype=np.float64)
    dim = user_vecs.shape[1]
    table = np.asarray(theta, dtype=np.float64).reshape(dataset.num_items, dim)
    if dataset.kind == IMPLICIT:
        values = []
        for u in range(dataset.num_users):
            test_items, _ = dataset.test_records_of(u)
            if len(test_items) == 0:
                continue
            scores = table @ user_vecs[u]
            values.append(ndcg_at_k(scores, dataset.train_items_of(u), test_items, k))
        if not values:
            raise ValueError("no user has a non-empty test set")
        return float(np.mean(values))
    sel = dataset.is_test
    if not np.any(sel):
        raise ValueError("no test records to evaluate")
    preds = np.einsum("ij,ij->i", user_vecs[dataset.users[sel]], table[dataset.items[sel]])
    err = preds - dataset.ratings[sel]
    return float(np.mean(err * err))


def metric_name_for(kind: str) -> str:
    return "ndcg@20" if kind == IMPLICIT else "mse"


@dataclass
class MetricsLog:
    """Ordered (round, mode, scheme, seed, metric, value) records."""

    records: list = field(default_factory=list)

    def append(self, round_num: int, mode: str, scheme: str, seed: int,
               metric: str, value: float) -> None:
        if self.records and round_num < self.records[-1][0]:
            raise ValueError(f"rounds must be non-decreasing, got {round_num} after {self.records[-1][0]}")
        if not math.isfinite(value):
            raise ValueError(f"metric '{metric}' has non-finite value at round {round_num}")
        self.records.append((round_num, mode, scheme, seed, metric, float(value)))

    def values_for(self, metric: str) -> list:
        return [(r[0], r[5]) for r in self.records if r[4] == metric]

    def numeric_content(self) -> list:
        """(round, metric, value) triples: the label-free payload."""
        return [(r[0], r[4], r[5]) for r in self.records]

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for round_num, mode, scheme, seed, metric, value in self.records:
            writer.writerow([round_num, mode, scheme, seed, metric, repr(value)])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        atomic_write_text(path, self.to_csv_text())
