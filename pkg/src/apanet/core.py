"""Shared containers, normalization helpers, seeded randomness and file formats.

Tensors use the (H, W, D) layout with channels fastest. Arithmetic is done in
float64; the binary formats store float32.
"""

from __future__ import annotations

import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

NORM_EPS = 1e-12

FEATUREMAP_MAGIC = b"APAF"
DESCRIPTORS_MAGIC = b"APAD"

ROLES = ("database", "query")


class FormatError(ValueError):
    """Raised when a file does not carry the expected magic bytes or layout."""


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator; the stream for a given seed is stable across platforms."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def parallel_map(fn, items, threads: int = 1) -> list:
    """``[fn(x) for x in items]`` on up to ``threads`` worker threads, order kept."""
    if threads < 1:
        raise ValueError("threads must be >= 1")
    items = list(items)
    if threads == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def l2_normalize(v) -> tuple[np.ndarray, bool]:
    """Return ``(v / ||v||, False)``, or ``(v, True)`` when the norm is below 1e-12."""
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("l2_normalize: input contains non-finite values")
    norm = float(np.sqrt(np.dot(v, v)))
    if norm < NORM_EPS:
        return v.copy(), True
    return v / norm, False


def l2_normalize_rows(x) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise l2_normalize. Returns the normalized matrix and the row norms.

    Rows with norm below 1e-12 are returned as zeros and keep their tiny norm,
    so callers can detect them with ``norms < NORM_EPS``.
    """
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("l2_normalize_rows: input contains non-finite values")
    norms = np.sqrt(np.einsum("ij,ij->i", x, x))
    out = np.zeros_like(x)
    ok = norms >= NORM_EPS
    out[ok] = x[ok] / norms[ok, None]
    return out, norms


@dataclass(frozen=True)
class FeatureMap:
    """Dense activation tensor of one image, stored as (H, W, D)."""

    data: np.ndarray

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"FeatureMap needs a non-empty (H, W, D) array, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("FeatureMap contains non-finite values")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def depth(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class RegionalFeatureSet:
    """N x D regional features, rows grouped by scale in list order."""

    data: np.ndarray
    scales: tuple[int, ...]

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        scales = tuple(int(s) for s in self.scales)
        if data.ndim != 2:
            raise ValueError("RegionalFeatureSet data must be 2-D")
        if not scales or min(scales) < 1:
            raise ValueError("scales must be a non-empty list of positive integers")
        if data.shape[0] != sum(s * s for s in scales):
            raise ValueError(
                f"{data.shape[0]} rows do not match scales {scales} "
                f"({sum(s * s for s in scales)} regions expected)"
            )
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "scales", scales)

    @property
    def num_regions(self) -> int:
        return self.data.shape[0]

    @property
    def depth(self) -> int:
        return self.data.shape[1]

    def region_labels(self) -> list[tuple[int, int, int]]:
        """(scale, row, col) for every region, in row order."""
        return [(s, r, c) for s in self.scales for r in range(s) for c in range(s)]


@dataclass(frozen=True)
class Descriptor:
    """Global image vector. ``degenerate`` marks an all-zero result."""

    values: np.ndarray
    normalized: bool = False
    degenerate: bool = False

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    @classmethod
    def from_vector(cls, v, normalize: bool = True) -> "Descriptor":
        v = np.asarray(v, dtype=np.float64)
        if not normalize:
            return cls(v, False, bool(np.sqrt(np.dot(v, v)) < NORM_EPS))
        out, degenerate = l2_normalize(v)
        return cls(out, not degenerate, degenerate)


@dataclass(frozen=True)
class GeoImageRecord:
    id: str
    x: float
    y: float
    featuremap_path: str
    role: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"record {self.id!r}: role must be one of {ROLES}, got {self.role!r}")
        if not (np.isfinite(self.x) and np.isfinite(self.y)):
            raise ValueError(f"record {self.id!r}: coordinates must be finite")


# --- binary formats -------------------------------------------------------


def _read_header(buf: bytes, magic: bytes, n_u32: int, path) -> tuple[int, ...]:
    size = 4 + 4 * n_u32
    if len(buf) < size or buf[:4] != magic:
        raise FormatError(f"{path}: expected magic {magic.decode()!r}, found {buf[:4]!r}")
    return struct.unpack(f"<{n_u32}I", buf[4:size])


def write_featuremap(path, fm: FeatureMap) -> None:
    h, w, d = fm.data.shape
    with open(path, "wb") as f:
        f.write(FEATUREMAP_MAGIC)
        f.write(struct.pack("<3I", w, h, d))
        f.write(fm.data.astype("<f4").tobytes())


def read_featuremap(path) -> FeatureMap:
    buf = Path(path).read_bytes()
    w, h, d = _read_header(buf, FEATUREMAP_MAGIC, 3, path)
    body = buf[16:]
    if len(body) != 4 * w * h * d:
        raise FormatError(f"{path}: payload has {len(body)} bytes, expected {4 * w * h * d}")
    data = np.frombuffer(body, dtype="<f4").reshape(h, w, d)
    return FeatureMap(data.astype(np.float64))


def write_descriptors(path, matrix) -> None:
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2:
        raise ValueError("descriptor matrix must be 2-D")
    rows, dim = matrix.shape
    with open(path, "wb") as f:
        f.write(DESCRIPTORS_MAGIC)
        f.write(struct.pack("<2I", rows, dim))
        f.write(matrix.astype("<f4").tobytes())


def read_descriptors(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    rows, dim = _read_header(buf, DESCRIPTORS_MAGIC, 2, path)
    body = buf[12:]
    if len(body) != 4 * rows * dim:
        raise FormatError(f"{path}: payload has {len(body)} bytes, expected {4 * rows * dim}")
    return np.frombuffer(body, dtype="<f4").reshape(rows, dim).astype(np.float64)


def ids_path(descriptor_path) -> Path:
    """Sidecar listing the record id of each descriptor row."""
    p = Path(descriptor_path)
    return p.with_name(p.name + ".ids")


def write_ids(path, ids: Iterable[str]) -> None:
    Path(path).write_text("".join(f"{i}\n" for i in ids))


def read_ids(path) -> list[str]:
    return [line for line in Path(path).read_text().splitlines() if line]


def load_descriptor_table(path) -> tuple[list[str], np.ndarray]:
    matrix = read_descriptors(path)
    ids = read_ids(ids_path(path))
    if len(ids) != matrix.shape[0]:
        raise FormatError(f"{path}: {matrix.shape[0]} rows but {len(ids)} ids in sidecar")
    return ids, matrix


def save_descriptor_table(path, ids: Sequence[str], matrix) -> None:
    write_descriptors(path, matrix)
    write_ids(ids_path(path), ids)


# --- manifests ------------------------------------------------------------


def write_manifest(path, records: Sequence[GeoImageRecord]) -> None:
    Path(path).write_text(json.dumps([asdict(r) for r in records], indent=1) + "\n")


def read_manifest(path) -> list[GeoImageRecord]:
    raw = json.loads(Path(path).read_text())
    if not isinstance(raw, list):
        raise FormatError(f"{path}: manifest must be a JSON array")
    records = [
        GeoImageRecord(str(r["id"]), float(r["x"]), float(r["y"]), str(r["featuremap_path"]), str(r["role"]))
        for r in raw
    ]
    seen = set()
    for r in records:
        if r.id in seen:
            raise ValueError(f"{path}: duplicate record id {r.id!r}")
        seen.add(r.id)
    return records


def resolve_featuremap(manifest_path, record: GeoImageRecord) -> Path:
    p = Path(record.featuremap_path)
    return p if p.is_absolute() else Path(manifest_path).parent / p
