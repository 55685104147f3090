"""File-level glue: load feature maps from a manifest, pool them, extract descriptors."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .aggregate import apanet_forward_cached, global_sum_pool, mac_pool
from .attention import HeadParams, score_rows
from .core import GeoImageRecord, parallel_map, read_featuremap, resolve_featuremap
from .pyramid import pyramid_pool_forward

AGGREGATORS = ("apanet", "mac", "sum")


def pool_records(manifest_path, records: Sequence[GeoImageRecord], scales, threads: int = 1):
    """Regional features for every record, keyed by id."""
    def one(r):
        return pyramid_pool_forward(read_featuremap(resolve_featuremap(manifest_path, r)), scales)[0]

    return dict(zip((r.id for r in records), parallel_map(one, records, threads)))


def extract(
    manifest_path,
    records: Sequence[GeoImageRecord],
    params: HeadParams,
    scales,
    normalize: bool = True,
    aggregator: str = "apanet",
    threads: int = 1,
    want_scores: bool = False,
):
    """Descriptor matrix (rows in ``records`` order) and optional attention score rows."""
    if aggregator not in AGGREGATORS:
        raise ValueError(f"aggregator must be one of {AGGREGATORS}")

    def one(r):
        fm = read_featuremap(resolve_featuremap(manifest_path, r))
        if aggregator == "mac":
            return mac_pool(fm).values, []
        if aggregator == "sum":
            return global_sum_pool(fm).values, []
        out, cache = apanet_forward_cached(fm, params, scales, normalize)
        return out, score_rows(r.id, scales, cache.scores) if want_scores else []

    results = parallel_map(one, records, threads)
    matrix = np.stack([v for v, _ in results]) if results else np.zeros((0, 0))
    scores = [row for _, rows in results for row in rows]
    return matrix, scores
