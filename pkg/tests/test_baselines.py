import numpy as np
import pytest

from otop.baselines import (Forest, TreeNode, forest_proba, mndwi, pixel_samples, rf_predict, rf_train,
                            sweep_threshold, threshold_mask)
from otop.errors import ArgumentError, FormatError
from otop.metrics import confusion, metrics_report
from otop.raster import Raster, TilePair


def _img(green, swir):
    data = np.zeros((6, 1, len(green)), np.float32)
    data[1, 0], data[4, 0] = green, swir
    return Raster(data)


def test_mndwi_values():
    out = mndwi(_img([0.10, 0.3, 0.0, np.nan], [0.02, 0.3, 0.0, 0.1])).data[0, 0]
    assert abs(out[0] - 0.08 / 0.12) < 1e-6
    assert out[1] == 0 and out[2] == 0 and np.isnan(out[3])


def test_threshold_mask():
    idx = Raster(np.array([[[0.5, 0.2, np.nan]]]))
    np.testing.assert_array_equal(threshold_mask(idx, 0).data[0, 0], [1, 1, 0])
    np.testing.assert_array_equal(threshold_mask(idx, 0.2).data[0, 0], [1, 0, 0])
    assert threshold_mask(Raster(np.full((1, 3, 3), np.nan)), -5).data.sum() == 0


def test_sweep_perfect_separator(rng):
    ref = Raster((rng.random((1, 32, 32)) < 0.3).astype(np.float32))
    res = sweep_threshold(ref, ref, "kappa")
    assert res.best_score == 1.0
    # strict > makes t = 0 the smallest separating grid value
    assert res.best_t == 0.0
    assert len(res.curve) == len(res.curve_csv().splitlines()) - 1


def test_sweep_matches_brute_force(rng):
    idx = Raster(rng.uniform(-1, 1, (1, 20, 20)))
    ref = Raster((rng.random((1, 20, 20)) < 0.4).astype(np.float32))
    res = sweep_threshold(idx, ref, "f1")
    for t, score in res.curve[::37]:
        assert abs(metrics_report(confusion(threshold_mask(idx, t), ref)).f1 - score) < 1e-12
    assert res.best_score < 1
    assert res.best_score == max(s for _, s in res.curve)


def test_sweep_errors(rng):
    with pytest.raises(ArgumentError):
        sweep_threshold(Raster(np.zeros((1, 2, 2))), Raster(np.zeros((1, 2, 2))), "accuracy")


def test_rf_separable():
    rng = np.random.default_rng(0)
    X = rng.uniform(0, 1, (400, 6))
    y = (X[:, 3] < 0.4).astype(float)
    forest = rf_train(X, y, n_trees=8, seed=1)
    acc = ((forest_proba(forest, X) > 0.5) == y).mean()
    assert acc == 1.0


def test_rf_deterministic():
    rng = np.random.default_rng(1)
    X = rng.uniform(0, 1, (300, 6))
    y = (X[:, 1] + 0.2 * rng.normal(size=300) > 0.5).astype(float)
    a, b = rf_train(X, y, n_trees=5, seed=7), rf_train(X, y, n_trees=5, seed=7)
    assert a.to_json() == b.to_json()
    probe = rng.uniform(0, 1, (100, 6))
    np.testing.assert_array_equal(forest_proba(a, probe), forest_proba(b, probe))


def test_rf_rejects_single_class():
    with pytest.raises(ArgumentError):
        rf_train(np.zeros((10, 6)), np.ones(10))


def _stump_forest(votes):
    trees = [TreeNode(3, 0.05, TreeNode(water_probability=float(v)), TreeNode(water_probability=0.0))
             for v in votes]
    return Forest(trees, len(trees), 0)


def test_rf_predict_votes():
    img = Raster(np.full((6, 1, 1), 0.01, np.float32))
    assert rf_predict(_stump_forest([1, 1, 1]), img).data[0, 0, 0] == 1
    assert rf_predict(_stump_forest([1, 0, 1, 0]), img).data[0, 0, 0] == 0


def test_forest_json_roundtrip():
    f = _stump_forest([1, 0, 1])
    g = Forest.from_json(f.to_json())
    assert g.to_json() == f.to_json()
    with pytest.raises(FormatError):
        Forest.from_json('{"trees": []}')


def test_pixel_samples_cap(rng):
    tiles = [TilePair(Raster(rng.random((6, 8, 8))), Raster((rng.random((1, 8, 8)) > 0.5).astype(float)), (0, 0))
             for _ in range(3)]
    X, y = pixel_samples(tiles, max_pixels=100, seed=0)
    assert X.shape == (100, 6) and y.shape == (100,)
    X2, _ = pixel_samples(tiles, max_pixels=100, seed=0)
    np.testing.assert_array_equal(X, X2)
