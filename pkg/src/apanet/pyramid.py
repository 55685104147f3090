"""Overlapping spatial pyramid max pooling and its backward pass."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import FeatureMap, RegionalFeatureSet, l2_normalize_rows

DEFAULT_SCALES = (2, 4, 6, 8)


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def region_count(scales: Sequence[int]) -> int:
    scales = list(scales)
    if not scales:
        raise ValueError("region_count: scale list is empty")
    if any(int(s) < 1 for s in scales):
        raise ValueError(f"region_count: scales must be positive, got {scales}")
    return sum(int(s) ** 2 for s in scales)


def parse_scales(text: str) -> tuple[int, ...]:
    """Parse ``"2,4,6,8"`` into ``(2, 4, 6, 8)``."""
    try:
        scales = tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise ValueError(f"invalid scale list {text!r}") from None
    region_count(scales)
    return scales


@dataclass(frozen=True)
class GridSpec:
    scale: int
    window_w: int
    window_h: int
    stride_w: int
    stride_h: int
    width: int
    height: int
    origins: tuple[tuple[int, int], ...]

    def windows(self):
        """Yield clamped ``(row0, row1, col0, col1)`` bounds in row-major cell order."""
        for r0, c0 in self.origins:
            yield r0, min(r0 + self.window_h, self.height), c0, min(c0 + self.window_w, self.width)


def grid_spec(n: int, width: int, height: int) -> GridSpec:
    """Window and stride for one pyramid level.

    Windows are ceil(2W/(n+1)) wide with stride ceil(W/(n+1)) (same for H).
    Windows running past the edge are truncated there. Raises ValueError if
    a truncated window would be empty, which happens for large ``n`` on small
    maps.
    """
    if n < 1 or width < 1 or height < 1:
        raise ValueError(f"grid_spec needs positive n, W, H; got n={n}, W={width}, H={height}")
    window_w = _ceil_div(2 * width, n + 1)
    window_h = _ceil_div(2 * height, n + 1)
    stride_w = _ceil_div(width, n + 1)
    stride_h = _ceil_div(height, n + 1)
    last_row, last_col = (n - 1) * stride_h, (n - 1) * stride_w
    if last_row >= height or last_col >= width:
        raise ValueError(
            f"scale {n} does not fit a {width}x{height} map: "
            f"last window starts at ({last_row}, {last_col}), outside the map"
        )
    origins = tuple((i * stride_h, j * stride_w) for i in range(n) for j in range(n))
    return GridSpec(n, window_w, window_h, stride_w, stride_h, width, height, origins)


def pyramid_pool_forward(fm: FeatureMap, scales: Sequence[int] = DEFAULT_SCALES):
    """Per-channel max over every pyramid window.

    Returns the RegionalFeatureSet and an (N, D) integer array holding, for each
    region and channel, the flat spatial index ``row * W + col`` of the maximum
    (first occurrence in row-major order on ties).
    """
    data = fm.data
    h, w, d = data.shape
    scales = tuple(int(s) for s in scales)
    n_regions = region_count(scales)
    pooled = np.empty((n_regions, d))
    argmax = np.empty((n_regions, d), dtype=np.int64)
    k = 0
    for s in scales:
        for r0, r1, c0, c1 in grid_spec(s, w, h).windows():
            block = data[r0:r1, c0:c1, :].reshape(-1, d)
            local = np.argmax(block, axis=0)
            pooled[k] = block[local, np.arange(d)]
            rows, cols = np.divmod(local, c1 - c0)
            argmax[k] = (rows + r0) * w + (cols + c0)
            k += 1
    return RegionalFeatureSet(pooled, scales), argmax


def pyramid_pool_vjp(upstream, argmax, shape) -> np.ndarray:
    """Route each regional gradient entry back to the cell that won the max.

    ``shape`` is the (H, W, D) shape of the pooled map. Overlapping windows
    accumulate.
    """
    upstream = np.asarray(upstream, dtype=np.float64)
    argmax = np.asarray(argmax)
    h, w, d = shape
    if upstream.shape != argmax.shape or upstream.shape[1] != d:
        raise ValueError(f"vjp shape mismatch: upstream {upstream.shape}, index {argmax.shape}, map {shape}")
    grad = np.zeros((h * w, d))
    channels = np.broadcast_to(np.arange(d), argmax.shape)
    np.add.at(grad, (argmax, channels), upstream)
    return grad.reshape(h, w, d)


def apply_snw(rfs: RegionalFeatureSet, model) -> RegionalFeatureSet:
    """Shift, normalize and whiten every regional feature (the R-MAC recipe).

    Rows are L2-normalized, transformed by ``model`` and L2-normalized again.
    """
    if model.dim != rfs.depth:
        raise ValueError(f"whitening model has dim {model.dim}, regional features have {rfs.depth}")
    normed, _ = l2_normalize_rows(rfs.data)
    return RegionalFeatureSet(model.transform(normed, normalize=True), rfs.scales)
