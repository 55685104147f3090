"""Central finite-difference checks of every analytic backward pass.

Each block contracts its output with a random vector ``r`` to get a scalar
``L = r . out``, then compares the analytic gradient of ``L`` against
``(L(x + h) - L(x - h)) / 2h`` entry by entry.
"""

from __future__ import annotations

import numpy as np

from .aggregate import apanet_forward_cached, apanet_vjp, head_forward, head_vjp
from .attention import HeadParams, init_head_params
from .core import FeatureMap, RegionalFeatureSet, make_rng
from .pyramid import grid_spec, pyramid_pool_forward, pyramid_pool_vjp

STEP = 1e-5
# Central differences at STEP carry ~1e-11 round-off on an O(1) loss; entries
# smaller than this floor are compared in absolute terms.
ABS_FLOOR = 1e-5
TOLERANCE = 1e-5
CHECK_SCALES = (1, 2, 3)


def relative_error(analytic, numeric, floor: float = ABS_FLOOR) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def numeric_grad(f, x: np.ndarray, h: float = STEP) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. ``x``, perturbed in place."""
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + h
        up = f()
        x[idx] = orig - h
        down = f()
        x[idx] = orig
        grad[idx] = (up - down) / (2 * h)
    return grad


def tie_free_map(rng, shape, scales=CHECK_SCALES, gap: float = 1e-3) -> np.ndarray:
    """Random map whose pooling windows all have a unique maximum by ``gap``."""
    h, w, d = shape
    while True:
        data = rng.normal(size=shape)
        ok = True
        for s in scales:
            for r0, r1, c0, c1 in grid_spec(s, w, h).windows():
                block = np.sort(data[r0:r1, c0:c1].reshape(-1, d), axis=0)
                if block.shape[0] > 1 and np.min(block[-1] - block[-2]) < gap:
                    ok = False
        if ok:
            return data


def _random_params(rng, dim: int, mode: str, normalize_context: bool = True) -> HeadParams:
    p = init_head_params(dim, mode, rng, normalize_context)
    if mode == "cascaded":
        p.fc_bias = rng.uniform(-0.5, 0.5, size=dim)
    return p


def check_pyramid(rng) -> float:
    h, w = (int(v) for v in rng.integers(5, 10, size=2))
    data = tie_free_map(rng, (h, w, 4))
    rfs, argmax = pyramid_pool_forward(FeatureMap(data), CHECK_SCALES)
    r = rng.normal(size=rfs.data.shape)
    analytic = pyramid_pool_vjp(r, argmax, data.shape)
    numeric = numeric_grad(lambda: float(np.sum(r * pyramid_pool_forward(FeatureMap(data), CHECK_SCALES)[0].data)), data)
    return relative_error(analytic, numeric)


def check_head(rng, mode: str, normalize_context: bool = True, normalize: bool = False,
               feature_scale: float = 1.0) -> float:
    """Attention block (plus optional final L2 norm) w.r.t. features and params.

    ``feature_scale`` keeps the raw-context tanh out of saturation, where
    gradients shrink to the round-off level of the differences.
    """
    dim = 4
    n = sum(s * s for s in CHECK_SCALES)
    features = feature_scale * rng.normal(size=(n, dim))
    params = _random_params(rng, dim, mode, normalize_context)
    r = rng.normal(size=dim)

    def loss():
        return float(r @ head_forward(RegionalFeatureSet(features, CHECK_SCALES), params, normalize)[0])

    _, cache = head_forward(RegionalFeatureSet(features, CHECK_SCALES), params, normalize)
    grad_f, grads = head_vjp(r, cache)
    errs = [relative_error(grad_f, numeric_grad(loss, features))]
    for name, arr in params.arrays().items():
        errs.append(relative_error(grads[name], numeric_grad(loss, arr)))
    return max(errs)


def check_end_to_end(rng, mode: str, shape=(7, 7, 4)) -> float:
    data = tie_free_map(rng, shape)
    params = _random_params(rng, shape[2], mode)
    r = rng.normal(size=shape[2])

    def loss():
        return float(r @ apanet_forward_cached(FeatureMap(data), params, CHECK_SCALES)[0])

    _, cache = apanet_forward_cached(FeatureMap(data), params, CHECK_SCALES)
    grad_map, grads = apanet_vjp(r, cache)
    errs = [relative_error(grad_map, numeric_grad(loss, data))]
    for name, arr in params.arrays().items():
        errs.append(relative_error(grads[name], numeric_grad(loss, arr)))
    return max(errs)


BLOCKS = {
    "pyramid_pool": check_pyramid,
    "single_attention": lambda rng: check_head(rng, "single"),
    "cascaded_attention": lambda rng: check_head(rng, "cascaded"),
    "cascaded_attention_raw_context": lambda rng: check_head(rng, "cascaded", normalize_context=False, feature_scale=0.2),
    "head_with_final_norm": lambda rng: check_head(rng, "cascaded", normalize=True),
    "end_to_end_none": lambda rng: check_end_to_end(rng, "none"),
    "end_to_end_single": lambda rng: check_end_to_end(rng, "single"),
    "end_to_end_cascaded": lambda rng: check_end_to_end(rng, "cascaded"),
    "end_to_end_cascaded_9x9": lambda rng: check_end_to_end(rng, "cascaded", (9, 9, 4)),
}


def run_suite(seed: int = 7, trials: int = 20) -> dict[str, float]:
    """Max relative error per block over ``trials`` random instances."""
    results = {}
    for i, (name, check) in enumerate(BLOCKS.items()):
        rng = make_rng(seed * 1000 + i)
        results[name] = max(check(rng) for _ in range(trials))
    return results
