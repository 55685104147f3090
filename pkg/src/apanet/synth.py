"""Deterministic synthetic geo-tagged feature-map worlds.

Each place is a scene of "buildings": rectangles whose activations live on
the signal channels with a place-specific channel signature. Views of a
place are crops of that scene shifted by up to ``shift_cells`` with per-view
gain jitter and background noise. Clutter ("cars/trees") is drawn from a small
world-wide vocabulary on separate clutter channels, placed at random
independently of the place. With ``burst_repeat_rate`` > 0 buildings are
tiled several times within a scene, producing repetitive structure.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .core import FeatureMap, GeoImageRecord, make_rng, write_featuremap, write_manifest


@dataclass(frozen=True)
class WorldConfig:
    num_places: int = 30
    database_views_per_place: int = 4
    query_views_per_place: int = 4
    width: int = 16
    height: int = 16
    depth: int = 32
    num_signal_channels: int = 16
    num_clutter_channels: int = 12
    clutter_rate: float = 0.5
    burst_repeat_rate: float = 0.0
    shift_cells: int = 1
    gain_jitter: float = 0.2
    noise_level: float = 0.05
    extent_m: float = 1000.0
    view_jitter_m: float = 4.0
    pos_radius_m: float = 10.0
    neg_radius_m: float = 25.0
    buildings_per_place: int = 3
    building_channels: int = 4
    clutter_slots: int = 6
    clutter_types: int = 4
    clutter_gain: float = 2.0
    feature_scale: float = 1.0
    seed: int = 42

    def validate(self) -> None:
        if min(self.num_places, self.database_views_per_place, self.width, self.height, self.depth) < 1:
            raise ValueError("places, database views and map sizes must be positive")
        if self.query_views_per_place < 0:
            raise ValueError("query_views_per_place must be >= 0")
        if self.num_signal_channels < 1 or self.num_clutter_channels < 0:
            raise ValueError("need at least one signal channel")
        if self.num_signal_channels + self.num_clutter_channels > self.depth:
            raise ValueError("signal and clutter channels exceed depth")
        if not 1 <= self.building_channels <= self.num_signal_channels:
            raise ValueError("building_channels must be in [1, num_signal_channels]")
        for name in ("clutter_rate", "burst_repeat_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.clutter_rate > 0 and (self.num_clutter_channels < 1 or self.clutter_types < 1):
            raise ValueError("clutter requires clutter channels and at least one clutter type")
        if min(self.shift_cells, self.gain_jitter, self.noise_level, self.view_jitter_m) < 0:
            raise ValueError("perturbation magnitudes must be non-negative")
        if self.feature_scale <= 0:
            raise ValueError("feature_scale must be positive")
        if self.gain_jitter >= 1:
            raise ValueError("gain_jitter must be < 1")
        if 2 * self.view_jitter_m > self.pos_radius_m:
            raise ValueError("views of one place could fall outside the positive radius")
        if self.place_spacing() - 2 * self.view_jitter_m <= self.neg_radius_m:
            raise ValueError(
                f"place spacing {self.place_spacing():.1f} m is too small for the negative radius; "
                "raise extent_m or lower num_places"
            )

    def place_spacing(self) -> float:
        return self.extent_m / math.ceil(math.sqrt(self.num_places))


def _rect(rng, canvas_h: int, canvas_w: int, lo: int, hi: int):
    h = int(rng.integers(lo, hi + 1))
    w = int(rng.integers(lo, hi + 1))
    h, w = min(h, canvas_h), min(w, canvas_w)
    r = int(rng.integers(0, canvas_h - h + 1))
    c = int(rng.integers(0, canvas_w - w + 1))
    return r, r + h, c, c + w


def _place_scene(cfg: WorldConfig, rng) -> np.ndarray:
    s = cfg.shift_cells
    ch, cw = cfg.height + 2 * s, cfg.width + 2 * s
    scene = np.zeros((ch, cw, cfg.depth))
    lo, hi = max(2, min(ch, cw) // 6), max(3, min(ch, cw) // 3)
    for _ in range(cfg.buildings_per_place):
        signature = np.zeros(cfg.depth)
        chans = rng.choice(cfg.num_signal_channels, size=cfg.building_channels, replace=False)
        signature[chans] = rng.uniform(0.5, 1.5, size=cfg.building_channels)
        r0, r1, c0, c1 = _rect(rng, ch, cw, lo, hi)
        texture = rng.uniform(0.7, 1.0, size=(r1 - r0, c1 - c0, 1))
        patch = texture * signature
        copies = [(r0, c0)]
        if rng.random() < cfg.burst_repeat_rate:
            for _ in range(int(rng.integers(2, 5))):
                copies.append((int(rng.integers(0, ch - (r1 - r0) + 1)), int(rng.integers(0, cw - (c1 - c0) + 1))))
        for r, c in copies:
            view = scene[r:r + r1 - r0, c:c + c1 - c0]
            np.maximum(view, patch, out=view)
    return scene


def _clutter_vocabulary(cfg: WorldConfig, rng) -> np.ndarray:
    vocab = np.zeros((cfg.clutter_types, cfg.depth))
    if cfg.num_clutter_channels == 0:
        return vocab
    base = cfg.num_signal_channels
    k = min(3, cfg.num_clutter_channels)
    for t in range(cfg.clutter_types):
        chans = base + rng.choice(cfg.num_clutter_channels, size=k, replace=False)
        vocab[t, chans] = cfg.clutter_gain * rng.uniform(1.0, 2.0, size=k)
    return vocab


def _render_view(cfg: WorldConfig, scene: np.ndarray, vocab: np.ndarray, rng) -> np.ndarray:
    s = cfg.shift_cells
    dr, dc = (int(v) for v in rng.integers(-s, s + 1, size=2)) if s else (0, 0)
    view = scene[s + dr:s + dr + cfg.height, s + dc:s + dc + cfg.width].copy()
    if cfg.gain_jitter:
        view *= rng.uniform(1 - cfg.gain_jitter, 1 + cfg.gain_jitter, size=cfg.depth)
    if cfg.noise_level:
        np.maximum(view, np.abs(rng.normal(0.0, cfg.noise_level, size=view.shape)), out=view)
    lo, hi = 2, max(2, min(cfg.height, cfg.width) // 3)
    for _ in range(cfg.clutter_slots):
        if rng.random() >= cfg.clutter_rate:
            continue
        vec = vocab[int(rng.integers(cfg.clutter_types))]
        r0, r1, c0, c1 = _rect(rng, cfg.height, cfg.width, lo, hi)
        block = view[r0:r1, c0:c1]
        np.maximum(block, vec * rng.uniform(0.8, 1.0, size=(r1 - r0, c1 - c0, 1)), out=block)
    return view


def build_world(cfg: WorldConfig) -> tuple[list[GeoImageRecord], dict[str, FeatureMap]]:
    """Generate the world in memory. Records come in place order, database views first."""
    cfg.validate()
    rng = make_rng(cfg.seed)
    side = math.ceil(math.sqrt(cfg.num_places))
    spacing = cfg.place_spacing()
    cells = rng.permutation(side * side)[:cfg.num_places]
    vocab = _clutter_vocabulary(cfg, rng)
    records, maps = [], {}
    for p, cell in enumerate(cells):
        cx, cy = (cell % side + 0.5) * spacing, (cell // side + 0.5) * spacing
        scene = _place_scene(cfg, rng)
        views = [("database", f"p{p:03d}_db{v}") for v in range(cfg.database_views_per_place)]
        views += [("query", f"p{p:03d}_q{v}") for v in range(cfg.query_views_per_place)]
        for role, rid in views:
            angle = rng.uniform(0, 2 * math.pi)
            radius = cfg.view_jitter_m * math.sqrt(rng.random())
            x, y = cx + radius * math.cos(angle), cy + radius * math.sin(angle)
            view = cfg.feature_scale * _render_view(cfg, scene, vocab, rng)
            maps[rid] = FeatureMap(view.astype(np.float32))
            records.append(GeoImageRecord(rid, round(x, 6), round(y, 6), f"maps/{rid}.apaf", role))
    return records, maps


def generate_world(cfg: WorldConfig, out_dir) -> Path:
    """Write ``manifest.json``, ``world.json`` and ``maps/*.apaf`` under ``out_dir``."""
    records, maps = build_world(cfg)
    out = Path(out_dir)
    (out / "maps").mkdir(parents=True, exist_ok=True)
    for r in records:
        write_featuremap(out / r.featuremap_path, maps[r.id])
    manifest = out / "manifest.json"
    write_manifest(manifest, records)
    (out / "world.json").write_text(_dump_config(cfg))
    return manifest


def _dump_config(cfg: WorldConfig) -> str:
    return json.dumps(asdict(cfg), indent=1, sort_keys=True) + "\n"


def channel_groups(cfg: WorldConfig) -> tuple[np.ndarray, np.ndarray]:
    """Indices of the signal and clutter channels."""
    signal = np.arange(cfg.num_signal_channels)
    clutter = np.arange(cfg.num_signal_channels, cfg.num_signal_channels + cfg.num_clutter_channels)
    return signal, clutter
