import itertools

import numpy as np
import pytest

from apanet.aggregate import apanet_forward
from apanet.attention import HeadParams
from apanet.core import read_featuremap, read_manifest
from apanet.evaluate import geo_distance, recall_at_n
from apanet.synth import WorldConfig, build_world, channel_groups, generate_world

QUIET = dict(clutter_rate=0.0, shift_cells=0, gain_jitter=0.0, noise_level=0.0)


def test_generation_is_byte_identical(tmp_path):
    cfg = WorldConfig(num_places=4)
    generate_world(cfg, tmp_path / "a")
    generate_world(cfg, tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len(files) == 4 * 8 + 2
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_seed_changes_world():
    a = build_world(WorldConfig(num_places=3, seed=1))[1]
    b = build_world(WorldConfig(num_places=3, seed=2))[1]
    assert not np.array_equal(a["p000_db0"].data, b["p000_db0"].data)


def test_noise_free_views_identical():
    _, maps = build_world(WorldConfig(num_places=3, **QUIET))
    for p in range(3):
        views = [m.data for k, m in maps.items() if k.startswith(f"p{p:03d}_")]
        assert len(views) == 8
        assert all(np.array_equal(v, views[0]) for v in views)


def test_two_place_world_is_separable():
    cfg = WorldConfig(num_places=2, database_views_per_place=1, query_views_per_place=1, **QUIET)
    records, maps = build_world(cfg)
    desc = {r.id: apanet_forward(maps[r.id], HeadParams("none")).values for r in records}
    t = recall_at_n([r for r in records if r.role == "query"], [r for r in records if r.role == "database"],
                    desc, ns=[1])
    assert t.recalls == (1.0,)


def test_geo_consistency():
    cfg = WorldConfig()
    records, _ = build_world(cfg)
    for a, b in itertools.combinations(records, 2):
        d = geo_distance(a, b)
        if a.id[:4] == b.id[:4]:
            assert d <= cfg.pos_radius_m
        else:
            assert d > cfg.neg_radius_m


def test_channel_partitions():
    cfg = WorldConfig()
    sig, clut = channel_groups(cfg)
    assert not set(sig) & set(clut) and len(sig) + len(clut) <= cfg.depth
    _, maps = build_world(WorldConfig(num_places=3, clutter_rate=0.0, noise_level=0.0))
    for m in maps.values():
        assert not m.data[:, :, clut].any()


def test_clutter_independent_of_place():
    cfg = WorldConfig(num_places=200, database_views_per_place=2, query_views_per_place=0, noise_level=0.0,
                      width=8, height=8, extent_m=3000.0)
    _, maps = build_world(cfg)
    _, clut = channel_groups(cfg)
    energy = np.array([[maps[f"p{p:03d}_db{v}"].data[:, :, clut].sum() for v in range(2)] for p in range(200)])
    r = np.corrcoef(energy[:, 0], energy[:, 1])[0, 1]
    assert abs(r) < 0.2


def test_bursts_repeat_structures():
    calm = build_world(WorldConfig(num_places=10, burst_repeat_rate=0.0, **QUIET))[1]
    bursty = build_world(WorldConfig(num_places=10, burst_repeat_rate=1.0, **QUIET))[1]
    sig, _ = channel_groups(WorldConfig())

    def active(maps):
        return np.mean([(m.data[:, :, sig] > 0).mean() for m in maps.values()])

    assert active(bursty) > active(calm)


@pytest.mark.parametrize("kw", [
    dict(clutter_rate=1.5),
    dict(num_signal_channels=30, num_clutter_channels=10),
    dict(building_channels=20),
    dict(num_places=2000),  # places too dense for the negative radius
    dict(view_jitter_m=6.0),
    dict(gain_jitter=1.0),
])
def test_invalid_config_writes_nothing(tmp_path, kw):
    with pytest.raises(ValueError):
        generate_world(WorldConfig(**kw), tmp_path / "w")
    assert not (tmp_path / "w").exists()


def test_manifest_points_at_maps(tmp_path):
    manifest = generate_world(WorldConfig(num_places=2), tmp_path)
    records = read_manifest(manifest)
    assert [r.role for r in records[:8]] == ["database"] * 4 + ["query"] * 4
    fm = read_featuremap(tmp_path / records[0].featuremap_path)
    assert (fm.height, fm.width, fm.depth) == (16, 16, 32)
