"""PCA rotation, whitening and power whitening of global descriptors.

All three share one transform::

    y = diag(lambda_i ** (-alpha / 2)) @ P.T @ (x - mean)

with alpha = 0 giving the plain rotation, alpha = 1 full whitening and
alpha = 0.5 the default power whitening.
"""

from __future__ import annotations

import csv
import struct
import warnings
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import FormatError, l2_normalize_rows

EIG_FLOOR = 1e-12
DEFAULT_ALPHA = 0.5
WHITENING_MAGIC = b"APAW"


@dataclass(frozen=True)
class WhiteningModel:
    mean: np.ndarray
    rotation: np.ndarray  # columns are eigenvectors, descending eigenvalue
    eigenvalues: np.ndarray
    alpha: float = DEFAULT_ALPHA
    out_dim: int | None = None

    def __post_init__(self):
        d = self.mean.shape[0]
        if self.rotation.shape != (d, d) or self.eigenvalues.shape != (d,):
            raise ValueError("WhiteningModel: mean, rotation and eigenvalues disagree on dimension")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        out_dim = d if self.out_dim is None else int(self.out_dim)
        if not 1 <= out_dim <= d:
            raise ValueError(f"out_dim must be in [1, {d}], got {out_dim}")
        object.__setattr__(self, "out_dim", out_dim)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def with_params(self, alpha: float | None = None, out_dim: int | None = None) -> "WhiteningModel":
        return replace(
            self,
            alpha=self.alpha if alpha is None else float(alpha),
            out_dim=self.out_dim if out_dim is None else int(out_dim),
        )

    def scaling(self, alpha: float | None = None) -> np.ndarray:
        alpha = self.alpha if alpha is None else alpha
        return np.maximum(self.eigenvalues, EIG_FLOOR) ** (-0.5 * alpha)

    def transform(self, x, normalize: bool = True, alpha: float | None = None) -> np.ndarray:
        """Whiten a single vector or the rows of a matrix."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        rows = np.atleast_2d(x)
        if rows.shape[1] != self.dim:
            raise ValueError(f"input dim {rows.shape[1]} does not match whitening dim {self.dim}")
        k = self.out_dim
        y = ((rows - self.mean) @ self.rotation[:, :k]) * self.scaling(alpha)[:k]
        if normalize:
            y, _ = l2_normalize_rows(y)
        return y[0] if single else y


def fit_pca(samples) -> WhiteningModel:
    """Eigendecompose the sample covariance of zero-centered rows.

    Eigenvalues are sorted descending; each eigenvector's sign is fixed so
    that its largest-magnitude entry is positive. Eigenvalues below 1e-12 are
    clamped to 1e-12 with a warning.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("fit_pca needs at least two sample rows")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (x.shape[0] - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals, kind="stable")[::-1]
    evals, evecs = evals[order], evecs[:, order]
    pivot = np.argmax(np.abs(evecs), axis=0)
    evecs = evecs * np.sign(evecs[pivot, np.arange(evecs.shape[1])])
    small = evals < EIG_FLOOR
    if small.any():
        warnings.warn(
            f"covariance is rank deficient: {int(small.sum())} eigenvalue(s) clamped to {EIG_FLOOR}",
            RuntimeWarning,
            stacklevel=2,
        )
        evals = np.where(small, EIG_FLOOR, evals)
    return WhiteningModel(mean, evecs, evals)


def apply_power_whitening(x, model: WhiteningModel, normalize: bool = True) -> np.ndarray:
    return model.transform(x, normalize=normalize)


def variance_report(samples, model: WhiteningModel, alphas: Sequence[float]) -> list[dict]:
    """Per-dimension variance of the un-normalized transform for each alpha.

    On the fitting set the variance of dimension i is lambda_i ** (1 - alpha).
    """
    rows = []
    for alpha in alphas:
        y = model.transform(samples, normalize=False, alpha=alpha)
        var = y.var(axis=0, ddof=1)
        for i, v in enumerate(var):
            rows.append({"alpha": float(alpha), "dim": i, "variance": float(v),
                         "eigenvalue": float(model.eigenvalues[i])})
    return rows


def write_variance_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["alpha", "dim", "variance", "eigenvalue"])
        writer.writeheader()
        for r in rows:
            writer.writerow({**r, "variance": repr(r["variance"]), "eigenvalue": repr(r["eigenvalue"])})


def sample_rows(x, max_rows: int, rng) -> np.ndarray:
    """Random subset of at most ``max_rows`` rows, kept in original order."""
    x = np.asarray(x)
    if x.shape[0] <= max_rows:
        return x
    keep = np.sort(rng.choice(x.shape[0], size=max_rows, replace=False))
    return x[keep]


def save_whitening(path, model: WhiteningModel) -> None:
    d = model.dim
    with open(path, "wb") as f:
        f.write(WHITENING_MAGIC)
        f.write(struct.pack("<2I", d, model.out_dim))
        f.write(struct.pack("<d", model.alpha))
        f.write(model.mean.astype("<f8").tobytes())
        f.write(model.eigenvalues.astype("<f8").tobytes())
        f.write(model.rotation.astype("<f8").tobytes())


def load_whitening(path) -> WhiteningModel:
    buf = Path(path).read_bytes()
    if len(buf) < 20 or buf[:4] != WHITENING_MAGIC:
        raise FormatError(f"{path}: expected magic 'APAW', found {buf[:4]!r}")
    d, out_dim = struct.unpack("<2I", buf[4:12])
    (alpha,) = struct.unpack("<d", buf[12:20])
    expected = 20 + 8 * (2 * d + d * d)
    if len(buf) != expected:
        raise FormatError(f"{path}: {len(buf)} bytes, expected {expected} for dim {d}")
    body = np.frombuffer(buf[20:], dtype="<f8").astype(np.float64)
    return WhiteningModel(
        mean=body[:d].copy(),
        eigenvalues=body[d:2 * d].copy(),
        rotation=body[2 * d:].reshape(d, d).copy(),
        alpha=alpha,
        out_dim=out_dim,
    )
