import math

import numpy as np
import pytest

from otop import mscnn
from otop.errors import ArgumentError, FormatError
from otop.mscnn import (NetworkConfig, forward, init_params, load_params, predict_mask,
                        predict_tiled, receptive_field, save_params, softmax2)
from otop.raster import Raster

from conftest import random_image, random_params


def test_config_validation():
    with pytest.raises(ArgumentError):
        NetworkConfig(num_scales=2, widths=(4,))
    with pytest.raises(ArgumentError):
        NetworkConfig(num_scales=0, widths=())
    assert NetworkConfig().widths == (16, 24, 32, 48, 64, 96)


def test_init_deterministic_and_bn_defaults():
    cfg = NetworkConfig.tiny(2, 4)
    a, b = init_params(cfg, 7), init_params(cfg, 7)
    assert a == b
    assert a != init_params(cfg, 8)
    for name, _, _ in cfg.layer_names():
        assert (a[f"{name}.gamma"] == 1).all() and (a[f"{name}.beta"] == 0).all()


def test_init_he_variance():
    # 6 -> 24 first layer has 24*6*9 = 1296 coefficients
    cfg = NetworkConfig(num_scales=1, widths=(24,))
    w = init_params(cfg, 3)["s1.m1.weight"]
    assert abs(w.var() / (2 / 54) - 1) < 0.2


def test_softmax_hand_values():
    p = softmax2(np.array([[[0.0]], [[math.log(3)]]]))
    np.testing.assert_allclose(p[:, 0, 0], [0.25, 0.75], atol=1e-6)
    np.testing.assert_array_equal(softmax2(np.array([[[2.0]], [[2.0]]]))[:, 0, 0], [0.5, 0.5])


def test_forward_prob_normalized(rng):
    cfg = NetworkConfig(3, (4, 5, 6))
    res = forward(random_params(cfg, 0), random_image(rng, 37, 29))
    p = res.prob.data
    assert res.logits.shape == (2, 37, 29)
    assert (p >= 0).all()
    np.testing.assert_allclose(p.sum(axis=0), 1, atol=1e-6)


def test_forward_capture(rng):
    cfg = NetworkConfig(2, (3, 3))
    res = forward(random_params(cfg, 0), random_image(rng, 16, 16), capture=True)
    assert res.intermediates["s2.single"].shape == (1, 8, 8)
    assert res.intermediates["fusion_in"].shape == (2, 16, 16)


def test_forward_rejects_bad_input(rng):
    p = random_params(NetworkConfig(3, (2, 2, 2)), 0)
    with pytest.raises(ArgumentError):
        forward(p, random_image(rng, 16, 16, bands=5))
    with pytest.raises(ArgumentError):
        forward(p, random_image(rng, 3, 16))


def test_constant_input_constant_interior():
    cfg = NetworkConfig(2, (3, 3))
    p = random_params(cfg, 5)
    rf = receptive_field(cfg)["rf"]
    img = Raster(np.full((6, 96, 96), 0.3, np.float32))
    logits = forward(p, img).logits.data
    r = rf // 2 + 4
    core = logits[:, r:96 - r, r:96 - r]
    assert np.ptp(core[0]) < 1e-5 and np.ptp(core[1]) < 1e-5


def test_predict_mask_rule():
    prob = Raster(np.array([[[0.3, 0.5, 0.7]], [[0.7, 0.5, 0.3]]], np.float32))
    np.testing.assert_array_equal(predict_mask(prob).data[0, 0], [1, 0, 0])


def test_receptive_field():
    assert receptive_field(NetworkConfig(1, (4,))) == {"rf": 11, "halo": 8}
    assert receptive_field(NetworkConfig(1, (8,))) == receptive_field(NetworkConfig(1, (4,)))
    assert receptive_field(NetworkConfig(3, (8, 12, 16)))["rf"] == 56


def test_msnw_roundtrip(rng):
    p = random_params(NetworkConfig(2, (3, 5)), 2)
    buf = save_params(p)
    assert save_params(p) == buf
    q = load_params(buf)
    assert q == p and save_params(q) == buf


def test_msnw_file_roundtrip(tmp_path):
    p = init_params(NetworkConfig.tiny(2, 3), 1)
    mscnn.save_params_file(p, tmp_path / "w.msnw")
    assert mscnn.load_params_file(tmp_path / "w.msnw") == p


def test_msnw_rejects_tampering():
    buf = save_params(init_params(NetworkConfig.tiny(2, 3), 1))
    with pytest.raises(FormatError):
        load_params(b"XXXX" + buf[4:])
    with pytest.raises(FormatError):
        load_params(buf.replace(b'"widths":[3,3]', b'"widths":[3,4]'))
    with pytest.raises(FormatError):
        load_params(buf[:-4])


def test_tiled_prediction_matches(rng):
    cfg = NetworkConfig(2, (3, 3))
    p = random_params(cfg, 4)
    img = random_image(rng, 70, 53)
    np.testing.assert_array_equal(predict_tiled(p, img, 16).data, forward(p, img).prob.data)
    with pytest.raises(ArgumentError):
        predict_tiled(p, img, 15)
