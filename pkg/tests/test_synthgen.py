import hashlib

import numpy as np
import pytest

from otop.errors import ArgumentError, GenerationError
from otop.synthgen import (SceneSpec, SpectralTemplate, WATER, gen_dataset, gen_scene, gen_scenes,
                           load_tiles, scene_files, write_scenes)

SMALL = SceneSpec(height=128, width=128, n_lakes=2, n_rivers=1, n_buildings=15)


def test_deterministic():
    a, b = gen_scene(SMALL), gen_scene(SMALL)
    assert a.image == b.image and a.mask == b.mask
    assert gen_scene(SMALL.replace(seed=1)).image != a.image


def test_value_ranges_and_fraction():
    for seed in range(4):
        s = gen_scene(SMALL.replace(seed=seed))
        assert s.image.shape == (6, 128, 128)
        assert s.image.data.min() >= 0 and s.image.data.max() <= 1
        assert set(np.unique(s.mask.data)) <= {0.0, 1.0}
        lo, hi = SMALL.water_fraction
        assert lo <= s.water_fraction <= hi
        assert s.water_fraction == s.mask.data.mean()


def test_noise_free_water_pixels():
    s = gen_scene(SMALL.replace(noise_scale=0.0))
    water = s.classes == WATER
    expect = np.array(SpectralTemplate().water, np.float32)
    np.testing.assert_array_equal(s.image.data[:, water].T, np.broadcast_to(expect, (water.sum(), 6)))


def test_template_margin():
    assert SpectralTemplate().mndwi_margin() > 0
    bad = SpectralTemplate(shadow=(0.05, 0.5, 0.05, 0.04, 0.01, 0.03))
    with pytest.raises(GenerationError):
        gen_scene(SMALL, bad)


def test_spec_validation():
    with pytest.raises(ArgumentError):
        SceneSpec(water_fraction=(0.5, 0.2))
    with pytest.raises(ArgumentError):
        SceneSpec.from_dict({"height": 128, "colour": 3})


def test_dataset_tile_count():
    tiles = gen_dataset(SceneSpec(), 10, 0)
    assert len(tiles) == 40
    assert all(set(np.unique(t.mask.data)) <= {0.0, 1.0} for t in tiles)


def test_disjoint_seeds_distinct():
    a = gen_scenes(SMALL, 4, 0)
    b = gen_scenes(SMALL, 4, 100)
    hashes = [hashlib.sha256(s.image.data.tobytes()).hexdigest() for s in a + b]
    assert len(set(hashes)) == 8


def test_write_and_load(tmp_path):
    scenes = gen_scenes(SceneSpec(height=256, width=256), 2, 5)
    write_scenes(scenes, tmp_path)
    files = scene_files(tmp_path)
    assert [p.name for p, _ in files] == ["image_0000.bsqf", "image_0001.bsqf"]
    tiles = load_tiles(tmp_path)
    assert len(tiles) == 2 and tiles[1].image == scenes[1].image
