"""Pixelwise accuracy assessment with water as the positive class."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ArgumentError
from .raster import Raster

CSV_HEADER = "tp,fp,fn,tn,oe,ce,kappa,f1,iou"


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ArgumentError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other):
        return ConfusionMatrix(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)


@dataclass(frozen=True)
class MetricsReport:
    oe: float
    ce: float
    kappa: float
    f1: float
    iou: float
    counts: ConfusionMatrix

    def to_csv(self) -> str:
        c = self.counts
        return (f"{c.tp},{c.fp},{c.fn},{c.tn},{self.oe!r},{self.ce!r},"
                f"{self.kappa!r},{self.f1!r},{self.iou!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _as_array(m):
    return m.data if isinstance(m, Raster) else np.asarray(m)


def confusion(pred, ref) -> ConfusionMatrix:
    """Pixel counts; NaN in either input removes the pixel from every count."""
    p, r = _as_array(pred), _as_array(ref)
    if p.shape != r.shape:
        raise ArgumentError(f"prediction {p.shape} and reference {r.shape} differ in shape")
    valid = ~(np.isnan(p) | np.isnan(r))
    p, r = p[valid], r[valid]
    if not (np.isin(p, (0, 1)).all() and np.isin(r, (0, 1)).all()):
        raise ArgumentError("masks must contain only 0 and 1")
    p, r = p.astype(bool), r.astype(bool)
    tp = int(np.count_nonzero(p & r))
    fp = int(np.count_nonzero(p & ~r))
    fn = int(np.count_nonzero(~p & r))
    tn = int(p.size - tp - fp - fn)
    return ConfusionMatrix(tp, fp, fn, tn)


def metrics_report(cm: ConfusionMatrix) -> MetricsReport:
    tp, fp, fn, tn = cm.tp, cm.fp, cm.fn, cm.tn
    n = cm.total
    if n == 0:
        raise ArgumentError("confusion matrix is empty")
    oe = fn / (tp + fn) if tp + fn else 0.0
    ce = fp / (tp + fp) if tp + fp else 0.0
    if tp + fp + fn:
        f1 = 2 * tp / (2 * tp + fp + fn)
        iou = tp / (tp + fp + fn)
    else:
        f1 = iou = 1.0
    p_o = (tp + tn) / n
    p_e = ((tp + fp) * (tp + fn) + (fn + tn) * (fp + tn)) / (n * n)
    if p_e == 1:
        kappa = 1.0 if p_o == 1 else 0.0
    else:
        kappa = (p_o - p_e) / (1 - p_e)
    return MetricsReport(float(oe), float(ce), float(kappa), float(f1), float(iou), cm)


def evaluate(pred, ref) -> MetricsReport:
    return metrics_report(confusion(pred, ref))
