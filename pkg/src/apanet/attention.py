"""Single and cascaded attention over regional features.

A block scores every regional feature with an evaluation vector ``v``
against the L2-normalized feature, then sums the *unnormalized* features
weighted by those scores::

    a_i = v . (f_i / |f_i|)        F = sum_i a_i f_i

The cascaded block runs a first block with the learned ``v0``, maps the
result through ``tanh(W F1 + b)`` and uses that as the evaluator of a second
block. Scores carry no activation and may be negative.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import NORM_EPS, RegionalFeatureSet, l2_normalize_rows

MODES = ("none", "single", "cascaded")


@dataclass
class HeadParams:
    mode: str
    v0: np.ndarray | None = None
    fc_weight: np.ndarray | None = None
    fc_bias: np.ndarray | None = None
    normalize_context: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode != "none" and self.v0 is None:
            raise ValueError(f"mode {self.mode!r} requires v0")
        if self.mode == "cascaded":
            if self.fc_weight is None or self.fc_bias is None:
                raise ValueError("cascaded mode requires fc_weight and fc_bias")
        elif self.fc_weight is not None or self.fc_bias is not None:
            raise ValueError("fc_weight/fc_bias are only valid in cascaded mode")
        for name, arr in self.arrays().items():
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"HeadParams.{name} contains non-finite values")
        if self.v0 is not None:
            d = self.v0.shape[0]
            if self.fc_weight is not None and (self.fc_weight.shape != (d, d) or self.fc_bias.shape != (d,)):
                raise ValueError("fc_weight must be D x D and fc_bias length D")

    @property
    def dim(self) -> int | None:
        return None if self.v0 is None else self.v0.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        """Trainable arrays by name (empty for mode none)."""
        names = {"none": (), "single": ("v0",), "cascaded": ("v0", "fc_weight", "fc_bias")}[self.mode]
        return {n: getattr(self, n) for n in names}

    def copy(self) -> "HeadParams":
        return HeadParams(self.mode, *(None if a is None else a.copy()
                                       for a in (self.v0, self.fc_weight, self.fc_bias)),
                          normalize_context=self.normalize_context)


def xavier_uniform(rng, fan_in: int, fan_out: int, shape) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_head_params(dim: int, mode: str, rng, normalize_context: bool = True) -> HeadParams:
    """Glorot-uniform v0 (a 1x1 conv with D inputs, one output) and W; zero bias."""
    if mode == "none":
        return HeadParams("none")
    v0 = xavier_uniform(rng, dim, 1, (dim,))
    if mode == "single":
        return HeadParams("single", v0)
    w = xavier_uniform(rng, dim, dim, (dim, dim))
    return HeadParams("cascaded", v0, w, np.zeros(dim), normalize_context)


@dataclass
class AttentionScores:
    stage1: np.ndarray
    stage2: np.ndarray | None = None

    @property
    def final(self) -> np.ndarray:
        return self.stage1 if self.stage2 is None else self.stage2


@dataclass
class AttentionCache:
    mode: str
    features: np.ndarray
    normed: np.ndarray
    norms: np.ndarray
    scores: AttentionScores
    params: HeadParams
    f1: np.ndarray | None = None
    v1: np.ndarray | None = None


def _check_dim(rfs: RegionalFeatureSet, v) -> None:
    if v is None or v.shape != (rfs.depth,):
        raise ValueError(f"evaluation vector must have length {rfs.depth}")


def single_attention_forward(rfs: RegionalFeatureSet, v0):
    """Return ``(F1, scores, cache)``."""
    v0 = np.asarray(v0, dtype=np.float64)
    _check_dim(rfs, v0)
    normed, norms = l2_normalize_rows(rfs.data)
    scores = normed @ v0
    f1 = scores @ rfs.data
    cache = AttentionCache("single", rfs.data, normed, norms, AttentionScores(scores),
                           HeadParams("single", v0))
    return f1, cache.scores, cache


def cascaded_attention_forward(rfs: RegionalFeatureSet, params: HeadParams):
    """Return ``(F, scores, cache)``; ``scores`` holds both stages."""
    if params.mode != "cascaded":
        raise ValueError("cascaded_attention_forward needs mode 'cascaded'")
    _check_dim(rfs, params.v0)
    normed, norms = l2_normalize_rows(rfs.data)
    a1 = normed @ params.v0
    f1 = a1 @ rfs.data
    ctx = _context(f1, params.normalize_context)
    v1 = np.tanh(params.fc_weight @ ctx + params.fc_bias)
    a2 = normed @ v1
    out = a2 @ rfs.data
    cache = AttentionCache("cascaded", rfs.data, normed, norms, AttentionScores(a1, a2), params, f1, v1)
    return out, cache.scores, cache


def attention_forward(rfs: RegionalFeatureSet, params: HeadParams):
    """Dispatch on ``params.mode``. Mode none is plain sum pooling."""
    if params.mode == "none":
        return rfs.data.sum(axis=0), None, AttentionCache("none", rfs.data, None, None, None, params)
    if params.mode == "single":
        return single_attention_forward(rfs, params.v0)
    return cascaded_attention_forward(rfs, params)


def _context(f1, normalize: bool) -> np.ndarray:
    if not normalize:
        return f1
    norm = np.sqrt(f1 @ f1)
    return f1 / norm if norm >= NORM_EPS else np.zeros_like(f1)


def _context_vjp(g, f1, normalize: bool) -> np.ndarray:
    if not normalize:
        return g
    norm = np.sqrt(f1 @ f1)
    if norm < NORM_EPS:
        return np.zeros_like(g)
    y = f1 / norm
    return (g - (g @ y) * y) / norm


def _weighted_sum_vjp(g, features, normed, norms, scores, v):
    """Gradient of ``sum_i (v . n_i) f_i`` w.r.t. the features and ``v``."""
    proj = features @ g                     # dL/da_i
    grad_v = proj @ normed
    grad_n = np.outer(proj, v)              # dL/dn_i
    radial = np.einsum("ij,ij->i", grad_n, normed)
    safe = np.where(norms >= NORM_EPS, norms, 1.0)
    grad_f = (grad_n - radial[:, None] * normed) / safe[:, None]
    grad_f[norms < NORM_EPS] = 0.0
    grad_f += np.outer(scores, g)
    return grad_f, grad_v


def attention_vjp(upstream, cache: AttentionCache):
    """Backward pass of :func:`attention_forward`.

    Returns ``(grad_features, grads)`` where ``grads`` maps parameter names
    to arrays shaped like the parameters.
    """
    if cache is None:
        raise ValueError("attention_vjp needs the cache from the forward call")
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape != (cache.features.shape[1],):
        raise ValueError(f"upstream gradient must have shape ({cache.features.shape[1]},)")
    if cache.mode == "none":
        return np.broadcast_to(g, cache.features.shape).copy(), {}
    if cache.mode == "single":
        grad_f, grad_v0 = _weighted_sum_vjp(g, cache.features, cache.normed, cache.norms,
                                            cache.scores.stage1, cache.params.v0)
        return grad_f, {"v0": grad_v0}
    p = cache.params
    grad_f, grad_v1 = _weighted_sum_vjp(g, cache.features, cache.normed, cache.norms,
                                        cache.scores.stage2, cache.v1)
    grad_u = grad_v1 * (1.0 - cache.v1 ** 2)
    grad_w = np.outer(grad_u, _context(cache.f1, p.normalize_context))
    grad_f1 = _context_vjp(p.fc_weight.T @ grad_u, cache.f1, p.normalize_context)
    grad_f_stage1, grad_v0 = _weighted_sum_vjp(grad_f1, cache.features, cache.normed, cache.norms,
                                               cache.scores.stage1, p.v0)
    return grad_f + grad_f_stage1, {"v0": grad_v0, "fc_weight": grad_w, "fc_bias": grad_u}


# --- score dumps ----------------------------------------------------------

SCORE_COLUMNS = ("image_id", "scale", "region_row", "region_col", "stage", "score")


def score_rows(image_id: str, scales: Sequence[int], scores: AttentionScores | None) -> list[tuple]:
    if scores is None:
        return []
    labels = [(s, r, c) for s in scales for r in range(s) for c in range(s)]
    stages = [(1, scores.stage1)] + ([(2, scores.stage2)] if scores.stage2 is not None else [])
    return [(image_id, s, r, c, stage, float(vals[k]))
            for stage, vals in stages for k, (s, r, c) in enumerate(labels)]


def write_score_csv(path, rows: list[tuple]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(SCORE_COLUMNS)
        for row in rows:
            writer.writerow(row[:-1] + (repr(row[-1]),))
