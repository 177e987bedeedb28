import numpy as np
import pytest
from hypothesis import given, strategies as st

from otop.errors import ArgumentError
from otop.metrics import CSV_HEADER, ConfusionMatrix, confusion, evaluate, metrics_report
from otop.raster import Raster


def test_hand_values():
    r = metrics_report(ConfusionMatrix(40, 10, 10, 40))
    for got, want in [(r.oe, 0.2), (r.ce, 0.2), (r.kappa, 0.6), (r.f1, 0.8), (r.iou, 2 / 3)]:
        assert abs(got - want) <= 1e-12


def test_perfect_and_total_miss():
    r = metrics_report(ConfusionMatrix(5, 0, 0, 7))
    assert (r.kappa, r.f1, r.iou, r.oe, r.ce) == (1, 1, 1, 0, 0)
    r = metrics_report(ConfusionMatrix(0, 0, 4, 9))
    assert (r.f1, r.iou, r.ce, r.oe) == (0, 0, 0, 1)


def test_degenerate_cases():
    r = metrics_report(ConfusionMatrix(0, 0, 0, 10))
    assert (r.f1, r.iou, r.kappa, r.oe, r.ce) == (1, 1, 1, 0, 0)
    with pytest.raises(ArgumentError):
        metrics_report(ConfusionMatrix(0, 0, 0, 0))
    with pytest.raises(ArgumentError):
        ConfusionMatrix(-1, 0, 0, 0)


@given(st.integers(0, 500), st.integers(0, 500), st.integers(0, 500), st.integers(0, 500))
def test_f1_iou_identity(tp, fp, fn, tn):
    if tp + fp + fn + tn == 0:
        return
    r = metrics_report(ConfusionMatrix(tp, fp, fn, tn))
    assert abs(r.f1 - 2 * r.iou / (1 + r.iou)) <= 1e-12
    assert -1 <= r.kappa <= 1


def test_confusion_brute_force(rng):
    for _ in range(20):
        p = (rng.random((1, 128, 128)) < rng.random()).astype(np.float32)
        r = (rng.random((1, 128, 128)) < rng.random()).astype(np.float32)
        counts = [0, 0, 0, 0]
        for a, b in zip(p.ravel().tolist(), r.ravel().tolist()):
            counts[{(1, 1): 0, (1, 0): 1, (0, 1): 2, (0, 0): 3}[(int(a), int(b))]] += 1
        cm = confusion(Raster(p), Raster(r))
        assert [cm.tp, cm.fp, cm.fn, cm.tn] == counts


def test_confusion_agreement_extremes(rng):
    m = (rng.random((1, 16, 16)) < 0.5).astype(np.float32)
    cm = confusion(m, m)
    assert cm.fp == cm.fn == 0
    cm = confusion(1 - m, m)
    assert cm.tp == cm.tn == 0


def test_confusion_nan_excluded():
    p = np.array([[[1, np.nan, 0]]], np.float32)
    r = np.array([[[1, 1, np.nan]]], np.float32)
    assert confusion(p, r) == ConfusionMatrix(1, 0, 0, 0)


def test_confusion_errors():
    with pytest.raises(ArgumentError):
        confusion(np.zeros((1, 2, 2)), np.zeros((1, 2, 3)))
    with pytest.raises(ArgumentError):
        confusion(np.full((1, 2, 2), 0.5), np.zeros((1, 2, 2)))


def test_report_serialization():
    r = evaluate(np.array([[[1, 0]]]), np.array([[[1, 1]]]))
    assert r.to_csv().split(",")[:4] == ["1", "0", "1", "0"]
    assert len(CSV_HEADER.split(",")) == len(r.to_csv().split(","))
    assert '"kappa"' in r.to_json()
