"""The full head (pyramid pooling, attention, sum pooling, L2 norm) and baselines."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .attention import AttentionCache, AttentionScores, HeadParams, attention_forward, attention_vjp
from .core import NORM_EPS, Descriptor, FeatureMap, RegionalFeatureSet
from .pyramid import DEFAULT_SCALES, pyramid_pool_forward, pyramid_pool_vjp


def sum_pool(rfs: RegionalFeatureSet) -> Descriptor:
    return Descriptor.from_vector(rfs.data.sum(axis=0), normalize=False)


def mac_pool(fm: FeatureMap) -> Descriptor:
    """Global max pooling per channel, L2-normalized."""
    return Descriptor.from_vector(fm.data.max(axis=(0, 1)))


def global_sum_pool(fm: FeatureMap) -> Descriptor:
    return Descriptor.from_vector(fm.data.sum(axis=(0, 1)))


@dataclass
class HeadCache:
    shape: tuple[int, int, int]
    argmax: np.ndarray | None
    attention: AttentionCache
    raw: np.ndarray
    normalize: bool
    scores: AttentionScores | None


def head_forward(rfs: RegionalFeatureSet, params: HeadParams, normalize: bool = True):
    """Attention (per ``params.mode``) plus optional final L2 norm on pooled regions.

    Returns ``(vector, cache)``. Training calls this directly on cached
    regional features since pooling has no parameters.
    """
    raw, scores, att_cache = attention_forward(rfs, params)
    out = raw
    if normalize:
        norm = np.sqrt(raw @ raw)
        out = raw / norm if norm >= NORM_EPS else raw.copy()
    return out, HeadCache((0, 0, rfs.depth), None, att_cache, raw, normalize, scores)


def head_vjp(upstream, cache: HeadCache):
    """Gradient w.r.t. the regional features and the head parameters."""
    g = np.asarray(upstream, dtype=np.float64)
    if cache.normalize:
        norm = np.sqrt(cache.raw @ cache.raw)
        if norm < NORM_EPS:
            g = np.zeros_like(g)
        else:
            y = cache.raw / norm
            g = (g - (g @ y) * y) / norm
    return attention_vjp(g, cache.attention)


def apanet_forward_cached(fm: FeatureMap, params: HeadParams, scales: Sequence[int] = DEFAULT_SCALES,
                          normalize: bool = True):
    rfs, argmax = pyramid_pool_forward(fm, scales)
    if params.dim is not None and params.dim != fm.depth:
        raise ValueError(f"head expects depth {params.dim}, feature map has {fm.depth}")
    out, cache = head_forward(rfs, params, normalize)
    cache.shape = fm.data.shape
    cache.argmax = argmax
    return out, cache


def apanet_forward(fm: FeatureMap, params: HeadParams, scales: Sequence[int] = DEFAULT_SCALES,
                   normalize: bool = True) -> Descriptor:
    """Global descriptor of one feature map.

    Mode none reduces to plain pyramid sum pooling. The final L2 norm can be
    skipped when a whitening step that normalizes follows.
    """
    out, _ = apanet_forward_cached(fm, params, scales, normalize)
    return Descriptor.from_vector(out, normalize=normalize)


def apanet_vjp(upstream, cache: HeadCache):
    """Returns ``(grad_featuremap, param_grads)`` for :func:`apanet_forward_cached`."""
    grad_rfs, grads = head_vjp(upstream, cache)
    return pyramid_pool_vjp(grad_rfs, cache.argmax, cache.shape), grads
