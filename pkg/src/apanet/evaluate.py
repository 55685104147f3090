"""Recall@N place-recognition evaluation with a geographic correctness radius."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .core import GeoImageRecord, parallel_map

DEFAULT_RADIUS = 25.0
DEFAULT_NS = (1, 5, 10, 20)


def geo_distance(a: GeoImageRecord, b: GeoImageRecord) -> float:
    return math.hypot(a.x - b.x, a.y - b.y)


@dataclass
class RetrievalResult:
    query_id: str
    ranked_ids: list[str]
    distances: list[float]
    correct_rank: int | None  # 1-based


@dataclass
class RecallTable:
    ns: tuple[int, ...]
    recalls: tuple[float, ...]
    num_queries: int
    num_excluded: int
    results: list[RetrievalResult] = field(default_factory=list)

    def as_dict(self) -> dict[int, float]:
        return dict(zip(self.ns, self.recalls))


def rank_database(query_vec, db_matrix, max_rank: int):
    """Exhaustive nearest neighbours by Euclidean distance.

    Rows must already be in id order; the stable sort then resolves equal
    distances by id.
    """
    diff = db_matrix - query_vec
    d2 = np.einsum("ij,ij->i", diff, diff)
    order = np.argsort(d2, kind="stable")[:max_rank]
    return order, np.sqrt(d2[order])


def recall_at_n(
    queries: Sequence[GeoImageRecord],
    database: Sequence[GeoImageRecord],
    descriptors: Mapping[str, np.ndarray],
    radius: float = DEFAULT_RADIUS,
    ns: Sequence[int] = DEFAULT_NS,
    threads: int = 1,
) -> RecallTable:
    """Fraction of queries with a database image within ``radius`` metres in the top N.

    Queries with no database image inside the radius are left out of the
    denominator and counted in ``num_excluded``.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    ns = tuple(sorted(set(int(n) for n in ns)))
    if not ns or ns[0] < 1:
        raise ValueError("Ns must be positive integers")
    missing = [r.id for r in list(queries) + list(database) if r.id not in descriptors]
    if missing:
        raise KeyError(f"no descriptor for {len(missing)} record(s), e.g. {missing[0]!r}")

    db = sorted(database, key=lambda r: r.id)
    db_ids = [r.id for r in db]
    db_matrix = np.stack([np.asarray(descriptors[i], dtype=np.float64) for i in db_ids])
    db_xy = np.array([[r.x, r.y] for r in db])
    max_rank = min(max(ns), len(db))

    def one(q):
        geo = np.hypot(db_xy[:, 0] - q.x, db_xy[:, 1] - q.y)
        correct = geo <= radius
        if not correct.any():
            return None
        order, dists = rank_database(np.asarray(descriptors[q.id], dtype=np.float64), db_matrix, max_rank)
        ok = np.flatnonzero(correct[order])
        rank = int(ok[0]) + 1 if ok.size else None
        return RetrievalResult(q.id, [db_ids[i] for i in order], dists.tolist(), rank)

    ranked = parallel_map(one, sorted(queries, key=lambda r: r.id), threads)
    results = [r for r in ranked if r is not None]
    excluded = len(ranked) - len(results)
    counted = len(results)
    hits = np.zeros(len(ns))
    for r in results:
        if r.correct_rank is not None:
            hits += np.array([r.correct_rank <= n for n in ns])
    recalls = tuple((hits / counted).tolist()) if counted else tuple(0.0 for _ in ns)
    return RecallTable(ns, recalls, counted, excluded, results)


def write_recall_csv(path, table: RecallTable) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["N", "recall"])
        for n, r in zip(table.ns, table.recalls):
            writer.writerow([n, repr(r)])


def read_recall_csv(path) -> dict[int, float]:
    with open(path, newline="") as f:
        return {int(row["N"]): float(row["recall"]) for row in csv.DictReader(f)}


def write_detail_json(path, table: RecallTable) -> None:
    payload = {
        "num_queries": table.num_queries,
        "num_excluded": table.num_excluded,
        "recall": {str(n): r for n, r in zip(table.ns, table.recalls)},
        "queries": [
            {"query_id": r.query_id, "correct_rank": r.correct_rank,
             "ranked_ids": r.ranked_ids, "distances": r.distances}
            for r in table.results
        ],
    }
    with open(path, "w") as f:
        json.dump(payload, f, indent=1)
        f.write("\n")
