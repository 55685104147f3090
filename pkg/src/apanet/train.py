"""Weakly supervised triplet-ranking training of the attention head.

Only the head parameters are learned; pooling has none, so regional
features are pooled once per image and reused across epochs.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .aggregate import head_forward, head_vjp
from .attention import MODES, HeadParams, init_head_params
from .core import (
    GeoImageRecord,
    RegionalFeatureSet,
    make_rng,
    read_descriptors,
    write_descriptors,
)
from .evaluate import geo_distance
from .pyramid import DEFAULT_SCALES

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    margin: float = 0.1
    batch_tuples: int = 4
    lr0: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.001
    attention_lr_multiplier: float = 10.0
    epochs: int = 10
    seed: int = 0
    r_pos: float = 10.0
    r_neg: float = 25.0
    neg_pool: int = 100
    hardest_k: int = 10
    mode: str = "cascaded"
    scales: tuple[int, ...] = DEFAULT_SCALES
    normalize_context: bool = True

    def __post_init__(self):
        self.scales = tuple(int(s) for s in self.scales)
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if min(self.lr0, self.attention_lr_multiplier) <= 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("learning rates must be positive; momentum and weight decay non-negative")
        if self.batch_tuples < 1 or self.epochs < 0 or self.hardest_k < 1 or self.neg_pool < 1:
            raise ValueError("batch_tuples, hardest_k and neg_pool must be >= 1, epochs >= 0")
        if self.r_pos <= 0 or self.r_neg < self.r_pos:
            raise ValueError("need 0 < r_pos <= r_neg")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")

    def learning_rate(self, epoch: int) -> float:
        """Base rate for 1-based ``epoch``: lr0 * exp(-0.1 (epoch - 1))."""
        return self.lr0 * math.exp(-0.1 * (epoch - 1))


class TrainingError(RuntimeError):
    def __init__(self, message: str, state: dict):
        super().__init__(message)
        self.state = state


@dataclass
class TrainingTuple:
    query: GeoImageRecord
    potential_positives: list[GeoImageRecord]
    negatives: list[GeoImageRecord]

    def __post_init__(self):
        if not self.potential_positives or not self.negatives:
            raise ValueError("a training tuple needs at least one positive and one negative")
        if {r.id for r in self.potential_positives} & {r.id for r in self.negatives}:
            raise ValueError("positives and negatives overlap")


def _sqdist(a, b) -> float:
    d = a - b
    return float(d @ d)


def triplet_loss(q, positives: Sequence, negatives: Sequence, margin: float):
    """Hinge loss of the best positive against every negative.

    Returns ``(loss, active, best)``: ``active`` lists negatives whose hinge
    is strictly positive, ``best`` is the index of the closest positive.
    """
    if not len(positives) or not len(negatives):
        raise ValueError("triplet_loss needs at least one positive and one negative")
    q = np.asarray(q, dtype=np.float64)
    pos_d = [_sqdist(q, np.asarray(p, dtype=np.float64)) for p in positives]
    best = int(np.argmin(pos_d))
    p_star = pos_d[best]
    loss = 0.0
    active = []
    for j, n in enumerate(negatives):
        h = p_star + margin - _sqdist(q, np.asarray(n, dtype=np.float64))
        if h > 0:
            loss += h
            active.append(j)
    return loss, active, best


def triplet_loss_grads(q, positives, negatives, margin: float):
    """Loss plus its gradient w.r.t. q, every positive and every negative."""
    loss, active, best = triplet_loss(q, positives, negatives, margin)
    q = np.asarray(q, dtype=np.float64)
    g_q = np.zeros_like(q)
    g_pos = [np.zeros_like(q) for _ in positives]
    g_neg = [np.zeros_like(q) for _ in negatives]
    if active:
        p = np.asarray(positives[best], dtype=np.float64)
        k = len(active)
        g_q += k * 2.0 * (q - p)
        g_pos[best] = -k * 2.0 * (q - p)
        for j in active:
            n = np.asarray(negatives[j], dtype=np.float64)
            g_q -= 2.0 * (q - n)
            g_neg[j] = 2.0 * (q - n)
    return loss, g_q, g_pos, g_neg


def mine_tuples(
    records: Sequence[GeoImageRecord],
    rng,
    cfg: TrainConfig,
    descriptors: Mapping[str, np.ndarray],
) -> list[TrainingTuple]:
    """One tuple per query.

    Positives are database images within ``r_pos`` metres. Negatives are the
    ``hardest_k`` closest (in descriptor space) among a random sample of at
    most ``neg_pool`` database images farther than ``r_neg`` metres. Queries
    without a positive or a negative are skipped with a warning.
    """
    database = sorted((r for r in records if r.role == "database"), key=lambda r: r.id)
    tuples = []
    for q in sorted((r for r in records if r.role == "query"), key=lambda r: r.id):
        dists = [geo_distance(q, r) for r in database]
        positives = [r for r, d in zip(database, dists) if d <= cfg.r_pos]
        far = [r for r, d in zip(database, dists) if d > cfg.r_neg]
        if not positives:
            log.warning("query %s has no database image within %g m; skipped", q.id, cfg.r_pos)
            continue
        if not far:
            log.warning("query %s has no database image beyond %g m; skipped", q.id, cfg.r_neg)
            continue
        if len(far) > cfg.neg_pool:
            pick = np.sort(rng.choice(len(far), size=cfg.neg_pool, replace=False))
            far = [far[i] for i in pick]
        qd = descriptors[q.id]
        d2 = np.array([_sqdist(qd, descriptors[r.id]) for r in far])
        hardest = np.argsort(d2, kind="stable")[:cfg.hardest_k]
        tuples.append(TrainingTuple(q, positives, [far[i] for i in hardest]))
    return tuples


def describe_all(features: Mapping[str, RegionalFeatureSet], params: HeadParams) -> dict[str, np.ndarray]:
    return {k: head_forward(rfs, params)[0] for k, rfs in features.items()}


def _tuple_grads(t: TrainingTuple, features, params: HeadParams, margin: float):
    """Loss of one tuple and its gradient w.r.t. the head parameters."""
    q_out, q_cache = head_forward(features[t.query.id], params)
    pos = [head_forward(features[r.id], params) for r in t.potential_positives]
    neg = [head_forward(features[r.id], params) for r in t.negatives]
    loss, g_q, g_pos, g_neg = triplet_loss_grads(q_out, [p[0] for p in pos], [n[0] for n in neg], margin)
    grads = {k: np.zeros_like(v) for k, v in params.arrays().items()}
    for g, cache in [(g_q, q_cache)] + [(g, c) for g, (_, c) in zip(g_pos + g_neg, pos + neg)]:
        if not g.any():
            continue
        for k, v in head_vjp(g, cache)[1].items():
            grads[k] += v
    return loss, grads


def sgd_step(params: HeadParams, velocity: dict, grads: dict, lr: float, cfg: TrainConfig) -> None:
    """In-place momentum SGD with L2 weight decay: buf = mu*buf + g + wd*theta; theta -= lr*buf."""
    for name, theta in params.arrays().items():
        g = grads[name] + cfg.weight_decay * theta
        buf = velocity.setdefault(name, np.zeros_like(theta))
        buf *= cfg.momentum
        buf += g
        theta -= lr * buf


def train_step(params: HeadParams, velocity: dict, batch: Sequence[TrainingTuple], features, lr: float,
               cfg: TrainConfig) -> list[float]:
    """One update on a batch of tuples; the gradient is the batch mean.

    ``lr`` is the base rate; attention parameters use it times
    ``attention_lr_multiplier``. Returns the per-tuple losses.
    """
    losses = []
    total = {k: np.zeros_like(v) for k, v in params.arrays().items()}
    for t in batch:
        loss, grads = _tuple_grads(t, features, params, cfg.margin)
        losses.append(loss)
        for k in total:
            total[k] += grads[k]
    for k in total:
        total[k] /= len(batch)
    if not all(np.isfinite(loss) for loss in losses) or not all(np.all(np.isfinite(g)) for g in total.values()):
        raise TrainingError("non-finite loss or gradient", {
            "losses": [float(x) for x in losses],
            "tuples": [t.query.id for t in batch],
            "params": {k: v.tolist() for k, v in params.arrays().items()},
        })
    sgd_step(params, velocity, total, lr * cfg.attention_lr_multiplier, cfg)
    return losses


def train_epochs(
    records: Sequence[GeoImageRecord],
    features: Mapping[str, RegionalFeatureSet],
    cfg: TrainConfig,
    params: HeadParams | None = None,
    on_epoch: Callable[[int, HeadParams, float], None] | None = None,
):
    """Train for ``cfg.epochs`` epochs, re-mining tuples at the start of each.

    Returns ``(params, loss_history)`` with the mean tuple loss per epoch.
    """
    rng = make_rng(cfg.seed)
    dim = next(iter(features.values())).depth
    if params is None:
        params = init_head_params(dim, cfg.mode, rng, cfg.normalize_context)
    velocity: dict = {}
    history = []
    for epoch in range(1, cfg.epochs + 1):
        tuples = mine_tuples(records, rng, cfg, describe_all(features, params))
        if not tuples:
            raise ValueError("no training tuples could be mined")
        order = rng.permutation(len(tuples))
        lr = cfg.learning_rate(epoch)
        losses = []
        for start in range(0, len(order), cfg.batch_tuples):
            batch = [tuples[i] for i in order[start:start + cfg.batch_tuples]]
            losses.extend(train_step(params, velocity, batch, features, lr, cfg))
        mean = float(np.mean(losses))
        history.append(mean)
        log.info("epoch %d lr %.6g mean loss %.6f (%d tuples)", epoch, lr, mean, len(tuples))
        if on_epoch is not None:
            on_epoch(epoch, params, mean)
    return params, history


# --- checkpoints ----------------------------------------------------------


def save_head(path, params: HeadParams, scales: Sequence[int], **meta) -> None:
    """Write ``<path>`` (JSON) and ``<path stem>.apad`` holding v0, b and W rows."""
    path = Path(path)
    matrix_path = path.with_suffix(".apad")
    arrays = params.arrays()
    dim = params.dim or 0
    rows = []
    if "v0" in arrays:
        rows.append(arrays["v0"])
    if "fc_bias" in arrays:
        rows.append(arrays["fc_bias"])
        rows.extend(arrays["fc_weight"])
    write_descriptors(matrix_path, np.array(rows).reshape(len(rows), dim))
    doc = {"mode": params.mode, "dim": dim, "scales": list(scales), "params_file": matrix_path.name,
           "normalize_context": params.normalize_context, **meta}
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_head(path) -> tuple[HeadParams, tuple[int, ...], dict]:
    path = Path(path)
    doc = json.loads(path.read_text())
    mode = doc["mode"]
    matrix = read_descriptors(path.parent / doc["params_file"])
    if mode == "none":
        params = HeadParams("none")
    elif mode == "single":
        params = HeadParams("single", matrix[0].copy())
    else:
        params = HeadParams("cascaded", matrix[0].copy(), matrix[2:].copy(), matrix[1].copy(),
                            bool(doc.get("normalize_context", True)))
    return params, tuple(doc["scales"]), doc


def config_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["scales"] = list(cfg.scales)
    return d
