import numpy as np
import pytest

from otop import trainer
from otop.errors import ArgumentError
from otop.mscnn import NetworkConfig, init_params
from otop.raster import Raster, TilePair
from otop.synthgen import SpectralTemplate
from otop.trainer import (TrainConfig, TrainingBatch, backward, batch_loss, grad_check, loss_bce,
                          poly_lr, sgd_step, train)


def test_loss_values():
    assert loss_bce([1.0], [1]) <= 1e-6
    assert abs(loss_bce([0.8], [1]) - 0.22314355131420976) < 1e-9
    assert abs(loss_bce([0.8, 0.2], [1, 0]) - 0.22314355131420976) < 1e-9
    with pytest.raises(ArgumentError):
        loss_bce([0.5, 0.5], [1])


def test_poly_lr():
    cfg = TrainConfig(max_iters=1000)
    assert poly_lr(0, cfg) == 0.1
    assert poly_lr(1000, cfg) == 0.0
    assert abs(poly_lr(500, cfg) - 0.05) < 1e-15
    with pytest.raises(ArgumentError):
        poly_lr(1001, cfg)


def test_config_from_dict():
    assert TrainConfig.from_dict({"max_iters": 5}).max_iters == 5
    with pytest.raises(ArgumentError):
        TrainConfig.from_dict({"learning_rate": 0.1})
    with pytest.raises(ArgumentError):
        TrainConfig(batch_size=0)


def _batch(rng, n=2, size=8, dtype=np.float64):
    return TrainingBatch(rng.uniform(0, 1, (n, 6, size, size)).astype(dtype),
                         (rng.uniform(0, 1, (n, size, size)) > 0.5).astype(dtype))


def test_zero_gradient_at_saturated_optimum(rng):
    p = init_params(NetworkConfig.tiny(2, 3), 0, training=True, dtype=np.float64)
    p.tensors["fusion.weight"][:] = 0
    p.tensors["fusion.bias"][:] = [-30.0, 30.0]
    b = _batch(rng)
    b = TrainingBatch(b.images, np.ones_like(b.targets))
    grads, loss, _ = backward(p, b)
    assert loss <= 1e-6
    assert np.sqrt(sum((g ** 2).sum() for g in grads.values())) <= 1e-6


def test_duplicated_batch_same_gradient(rng):
    p = init_params(NetworkConfig.tiny(2, 3), 0, training=True, dtype=np.float64)
    b = _batch(rng, n=1)
    # BN statistics are per batch; a single image duplicated keeps them identical
    b2 = TrainingBatch(np.concatenate([b.images] * 2), np.concatenate([b.targets] * 2))
    g1, l1, _ = backward(p, b)
    g2, l2, _ = backward(p, b2)
    assert abs(l1 - l2) < 1e-12
    for k in g1:
        np.testing.assert_allclose(g1[k], g2[k], atol=1e-12)


def test_backward_requires_training_mode(rng):
    with pytest.raises(ArgumentError):
        backward(init_params(NetworkConfig.tiny(2, 3), 0), _batch(rng))


def test_sgd_step():
    p = init_params(NetworkConfig.tiny(1, 2), 0, training=True)
    g = {k: np.full_like(p[k], 0.5) for k in p.trainable_names()}
    assert sgd_step(p, g, 0.0) == p
    q = sgd_step(p, g, 0.1)
    w0 = p["s1.m1.weight"].copy()
    w0.flat[0] = 1.0
    p.tensors["s1.m1.weight"] = w0
    assert abs(sgd_step(p, g, 0.1)["s1.m1.weight"].flat[0] - 0.95) < 1e-7
    neg = {k: -v for k, v in g.items()}
    back = sgd_step(sgd_step(p, g, 0.1), neg, 0.1)
    for k in p.trainable_names():
        np.testing.assert_allclose(back[k], p[k], atol=1e-7)
    assert q is not p


def _toy_tiles(n=6, size=32, seed=0):
    """Water blobs with the water template on a built-up background, no noise."""
    t = SpectralTemplate()
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[:size, :size]
    tiles = []
    for _ in range(n):
        cy, cx, r = rng.uniform(6, size - 6, 2).tolist() + [rng.uniform(4, 9)]
        m = ((yy - cy) ** 2 + (xx - cx) ** 2 < r * r).astype(np.float32)
        img = np.where(m[None] > 0, np.array(t.water)[:, None, None], np.array(t.builtup)[:, None, None])
        tiles.append(TilePair(Raster(img), Raster(m[None]), (0, 0)))
    return tiles


def test_train_deterministic_and_history():
    cfg = TrainConfig(max_iters=6, batch_size=2, seed=3)
    net = NetworkConfig.tiny(2, 3)
    tiles = _toy_tiles(4, 16)
    p1, h1 = train(cfg, tiles, net)
    p2, h2 = train(cfg, tiles, net)
    assert p1 == p2 and not p1.training
    assert h1.records == h2.records
    assert [lr for _, lr, _ in h1.records] == [poly_lr(i, cfg) for i in range(6)]
    assert h1.to_csv().splitlines()[0] == "iter,lr,loss"


def test_train_rejects_empty_and_nodata():
    with pytest.raises(ArgumentError):
        train(TrainConfig(max_iters=1), [])
    t = _toy_tiles(1, 16)[0]
    bad = t.image.data.copy()
    bad[0, 0, 0] = np.nan
    with pytest.raises(ArgumentError):
        train(TrainConfig(max_iters=1), [TilePair(Raster(bad), t.mask, (0, 0))], NetworkConfig.tiny(2, 3))


def test_training_reduces_loss():
    tiles = _toy_tiles(8, 32)
    net = NetworkConfig.tiny(2, 4)
    cfg = TrainConfig(max_iters=2000, batch_size=4, seed=0)
    params, hist = train(cfg, tiles, net)
    batch = TrainingBatch.from_tiles(tiles)
    init = init_params(net, cfg.seed, training=True)
    assert batch_loss(params.with_mode(True), batch) < batch_loss(init, batch)
    assert np.mean([l for *_, l in hist.records[-50:]]) < np.mean([l for *_, l in hist.records[:50]])


def test_grad_check_passes():
    assert grad_check(NetworkConfig.tiny(2, 4), 0, 1e-6) <= 1e-5


def test_grad_check_large_eps_worse():
    cfg = NetworkConfig.tiny(2, 4)
    assert grad_check(cfg, 0, 1e-2) > grad_check(cfg, 0, 1e-6)


def test_grad_check_zero_fusion():
    assert grad_check(NetworkConfig.tiny(2, 4), 0, 1e-6, zero_fusion=True) <= 1e-5
