import numpy as np
import pytest

from fstmatch.synthworld import (CompositionError, CompressionStateError, ImageSample, WorldConfig, WorldConfigError,
                                 build_paired_unpaired, compose_fake, compress, export_samples, gen_world,
                                 import_samples, quantize, signature_separation)


@pytest.fixture(scope="module")
def world():
    return gen_world(WorldConfig())


def test_default_regions_partition_the_grid():
    cfg = WorldConfig()
    face, boundary, bg = map(set, (cfg.face_region, cfg.boundary_region, cfg.background_region))
    assert len(face) == 16 and len(boundary) == 20 and len(bg) == 28
    assert face | boundary | bg == set(range(64))
    assert not (face & boundary or face & bg or boundary & bg)


def test_config_validation():
    with pytest.raises(WorldConfigError):
        WorldConfig(face_region=[0, 1], boundary_region=[1, 2]).validate()
    with pytest.raises(WorldConfigError):
        WorldConfig(artifact_amplitude=0.3).validate()
    with pytest.raises(WorldConfigError):
        WorldConfig(n_identities=3).validate()
    with pytest.raises(WorldConfigError):
        WorldConfig(face_from="neither").validate()


def test_pair_count_and_groups():
    cfg = WorldConfig(n_identities=4, L=6)
    w = gen_world(cfg)
    pairs = {(tr.fake.source_id, tr.fake.target_id) for tr in w.train_triples}
    assert len(pairs) == 4 * 3
    assert len(w.train_triples) == 12 * cfg.fake_train_clips * cfg.frames_per_clip
    for tr in w.train_triples:
        assert tr.fake.source_id == tr.source.own_id and tr.fake.target_id == tr.target.own_id
    groups = {}
    for s in w.samples("train") + w.samples("test"):
        groups.setdefault(s.video_group, set()).add((s.role, s.source_id, s.target_id))
    assert all(len(v) == 1 for v in groups.values())
    assert len(gen_world(WorldConfig(n_identities=4, L=6, max_pairs=5)).train_triples) == 5 * 2


def test_deterministic(world):
    again = gen_world(WorldConfig())
    for a, b in zip(world.samples("train") + world.samples("test"), again.samples("train") + again.samples("test")):
        assert np.array_equal(a.grids, b.grids) and a.sample_id == b.sample_id


def test_signature_separation(world):
    mean_dist, floor = signature_separation(world)
    assert mean_dist > floor


def test_compose_fake_regions(world):
    cfg = world.config
    tr = world.train_triples[0]
    f, s, t = tr.fake, tr.source, tr.target
    assert np.array_equal(f.grids[cfg.face_region], t.grids[cfg.face_region])
    assert np.array_equal(f.grids[cfg.background_region], s.grids[cfg.background_region])
    b = cfg.boundary_region
    assert np.all(f.grids[b] != s.grids[b]) and np.all(f.grids[b] != t.grids[b])
    clean = compose_fake(s, t, cfg, np.zeros_like(world.artifact))
    np.testing.assert_array_equal(clean.grids[b], 0.5 * (s.grids[b] + t.grids[b]))
    with pytest.raises(CompositionError):
        compose_fake(s, s, cfg, world.artifact)


def test_face_from_source_mirror(world):
    cfg = WorldConfig(face_from="source")
    tr = world.train_triples[0]
    f = compose_fake(tr.source, tr.target, cfg, world.artifact)
    assert np.array_equal(f.grids[cfg.face_region], tr.source.grids[cfg.face_region])
    assert f.own_id == tr.source.own_id


def test_sample_invariants():
    with pytest.raises(ValueError):
        ImageSample(np.zeros((4, 1)), "real", 0, 1, 0)
    with pytest.raises(ValueError):
        ImageSample(np.zeros((4, 1)), "fake", 2, 2, 2)


def test_quantize_examples():
    assert quantize(np.array([0.5]), 0.4)[0] == pytest.approx(0.4)
    assert quantize(np.array([0.05]), 0.4)[0] == 0.0
    assert quantize(np.array([2.0]), 0.4)[0] == pytest.approx(2.0)
    x = np.random.default_rng(0).normal(size=50)
    np.testing.assert_array_equal(quantize(quantize(x, 0.2), 0.2), quantize(x, 0.2))


def test_compress_state(world):
    s = world.fakes("test")[0]
    c = compress(s, "c40", world.config)
    assert c.compression == "c40" and s.compression == "raw"
    with pytest.raises(CompressionStateError):
        compress(c, "c23", world.config)


def test_compression_erases_artifact_keeps_identity(world):
    cfg = world.config
    b = cfg.boundary_region
    residue = np.mean([np.abs(compress(f, "c40", cfg).grids[b]).mean() for f in world.fakes("test")])
    assert residue < 1e-9
    reals = world.test_reals
    hits = [world.nearest_signature(compress(r, lv, cfg)) == r.own_id for r in reals for lv in ("c23", "c40")]
    assert np.mean(hits) >= 0.99


def test_paired_unpaired():
    w = gen_world(WorldConfig(n_identities=8, L=6, fake_train_clips=1, frames_per_clip=1))
    paired, unpaired = build_paired_unpaired(w, 4)
    assert len(paired.fakes) == 12
    assert len(paired.reals) == len(unpaired.reals) == 12
    fake_ids = {i for f in paired.fakes for i in (f.source_id, f.target_id)}
    assert {r.own_id for r in paired.reals} <= fake_ids
    assert not {r.own_id for r in unpaired.reals} & fake_ids
    half, _ = build_paired_unpaired(w, 4, real_ratio=0.5)
    assert len(half.reals) == 6
    with pytest.raises(WorldConfigError):
        build_paired_unpaired(w, 5)


def test_export_import_roundtrip(tmp_path, small_world):
    samples = small_world.samples("test")[:5] + [compress(small_world.fakes("test")[0], "c23", small_world.config)]
    export_samples(samples, tmp_path, small_world.config)
    back = import_samples(tmp_path)
    assert len(back) == len(samples)
    for a, b in zip(samples, back):
        assert np.array_equal(a.grids, b.grids)
        assert (a.role, a.source_id, a.target_id, a.compression, a.video_group) == \
            (b.role, b.source_id, b.target_id, b.compression, b.video_group)
    assert (tmp_path / "world.json").exists()
