"""Comparison methods: MNDWI thresholding and a bagged CART random forest."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, FormatError
from .metrics import confusion, metrics_report
from .raster import BandSemantics, Raster

# --- MNDWI -------------------------------------------------------------------------


def mndwi(image: Raster, bands: BandSemantics = BandSemantics()) -> Raster:
    """(green - swir1) / (green + swir1); zero where the denominator is zero."""
    if not (0 <= bands.green_idx < image.bands and 0 <= bands.swir1_idx < image.bands):
        raise ArgumentError(f"green/swir1 indices ({bands.green_idx}, {bands.swir1_idx}) "
                            f"out of range for {image.bands} bands")
    g = image.data[bands.green_idx].astype(np.float64)
    m = image.data[bands.swir1_idx].astype(np.float64)
    den = g + m
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(den == 0, 0.0, (g - m) / den)
    out[np.isnan(g) | np.isnan(m)] = np.nan
    return Raster(out[None])


def threshold_mask(index: Raster, t: float) -> Raster:
    """1.0 where index > t (strict); NaN becomes 0."""
    if index.bands != 1:
        raise ArgumentError("threshold_mask needs a single-band index")
    with np.errstate(invalid="ignore"):
        return Raster((index.data > t).astype(np.float32))


@dataclass
class SweepResult:
    best_t: float
    best_score: float
    curve: list            # (t, score) pairs in ascending t
    degenerate: bool = False

    def curve_csv(self) -> str:
        return "t,score\n" + "".join(f"{t!r},{s!r}\n" for t, s in self.curve)


def _metric_from_counts(tp, fp, fn, tn, metric):
    from .metrics import ConfusionMatrix
    rep = metrics_report(ConfusionMatrix(int(tp), int(fp), int(fn), int(tn)))
    return getattr(rep, metric)


def sweep_threshold(index: Raster, reference: Raster, metric: str = "kappa") -> SweepResult:
    """Score every threshold on a 0.01 grid over [-1, 1] (plus the distinct index
    values when there are fewer than 10,000) and keep the best, smallest t on ties."""
    if metric not in ("kappa", "f1", "iou"):
        raise ArgumentError(f"unknown metric {metric!r}")
    if index.shape[1:] != reference.shape[1:]:
        raise ArgumentError("index and reference differ in size")
    idx = index.data[0]
    ref = reference.data[0]
    valid = ~np.isnan(ref)
    if not np.isin(ref[valid], (0, 1)).all():
        raise ArgumentError("reference must be binary")
    v = idx[valid].astype(np.float64)
    r = ref[valid].astype(bool)
    v = np.where(np.isnan(v), -np.inf, v)  # NaN index pixels always map to 0
    grid = np.round(np.linspace(-1.0, 1.0, 201), 10)
    distinct = np.unique(v[np.isfinite(v)])
    ts = np.union1d(grid, distinct) if distinct.size < 10000 else grid
    # counts of predicted water (v > t) via sorted cumulative sums
    order = np.argsort(v, kind="stable")
    vs, rs = v[order], r[order]
    pos_total = int(rs.sum())
    n = vs.size
    water_above = np.concatenate([[0], np.cumsum(rs[::-1])])[::-1]  # water among vs[k:]
    k = np.searchsorted(vs, ts, side="right")
    tp = water_above[k]
    pred_pos = n - k
    fp = pred_pos - tp
    fn = pos_total - tp
    tn = n - tp - fp - fn
    scores = [_metric_from_counts(*c, metric) for c in zip(tp, fp, fn, tn)]
    scores = np.asarray(scores)
    best = int(np.argmax(scores))  # first max = smallest t
    degenerate = pos_total == 0 or pos_total == n
    return SweepResult(float(ts[best]), float(scores[best]),
                       list(zip(ts.tolist(), scores.tolist())), degenerate)


# --- random forest ---------------------------------------------------------------

@dataclass
class TreeNode:
    feature_idx: int = -1
    threshold: float = 0.0
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None
    water_probability: float = 0.0

    @property
    def is_leaf(self) -> bool:
        return self.left is None

    def to_dict(self) -> dict:
        if self.is_leaf:
            return {"leaf": self.water_probability}
        return {"feature": self.feature_idx, "threshold": self.threshold,
                "left": self.left.to_dict(), "right": self.right.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "TreeNode":
        if "leaf" in d:
            p = float(d["leaf"])
            if not 0 <= p <= 1:
                raise FormatError(f"leaf probability {p} outside [0, 1]")
            return cls(water_probability=p)
        return cls(int(d["feature"]), float(d["threshold"]),
                   cls.from_dict(d["left"]), cls.from_dict(d["right"]))


@dataclass
class Forest:
    trees: list
    n_trees: int
    seed: int
    n_features: int = 6
    params: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({"n_trees": self.n_trees, "seed": self.seed, "n_features": self.n_features,
                           "params": self.params, "trees": [t.to_dict() for t in self.trees]},
                          sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Forest":
        try:
            d = json.loads(text)
            trees = [TreeNode.from_dict(t) for t in d["trees"]]
            forest = cls(trees, int(d["n_trees"]), int(d["seed"]), int(d["n_features"]), d.get("params", {}))
        except (ValueError, KeyError, TypeError) as exc:
            raise FormatError(f"bad forest document: {exc}") from exc
        if len(forest.trees) != forest.n_trees or forest.n_trees < 1:
            raise FormatError("forest tree count does not match n_trees")
        return forest


def _gini_best_split(X, y, features, min_leaf):
    """Best (gain, feature, threshold) over candidate features; None when no split."""
    n = y.size
    total_pos = y.sum()
    parent = 1.0 - (total_pos / n) ** 2 - (1 - total_pos / n) ** 2
    best = None
    for f in features:
        order = np.argsort(X[:, f], kind="stable")
        xs = X[order, f]
        ys = y[order]
        left_n = np.arange(1, n)
        left_pos = np.cumsum(ys)[:-1]
        right_n = n - left_n
        right_pos = total_pos - left_pos
        ok = (xs[1:] > xs[:-1]) & (left_n >= min_leaf) & (right_n >= min_leaf)
        if not ok.any():
            continue
        pl = left_pos / left_n
        pr = right_pos / right_n
        gini = (left_n * (2 * pl * (1 - pl)) + right_n * (2 * pr * (1 - pr))) / n
        gini = np.where(ok, gini, np.inf)
        k = int(np.argmin(gini))
        gain = parent - gini[k]
        if best is None or gain > best[0]:
            best = (gain, f, 0.5 * (xs[k] + xs[k + 1]))
    return best


def _grow(X, y, rng, depth, max_depth, min_leaf, n_sub):
    p = float(y.mean())
    if depth >= max_depth or y.size < 2 * min_leaf or p in (0.0, 1.0):
        return TreeNode(water_probability=p)
    features = np.sort(rng.choice(X.shape[1], size=n_sub, replace=False))
    split = _gini_best_split(X, y, features, min_leaf)
    if split is None or split[0] <= 0:
        return TreeNode(water_probability=p)
    _, f, thr = split
    go_left = X[:, f] <= thr
    return TreeNode(int(f), float(thr),
                    _grow(X[go_left], y[go_left], rng, depth + 1, max_depth, min_leaf, n_sub),
                    _grow(X[~go_left], y[~go_left], rng, depth + 1, max_depth, min_leaf, n_sub))


def rf_train(features, labels, n_trees: int = 40, seed: int = 0, max_depth: int = 12,
             min_leaf: int = 2, max_features: int | None = None) -> Forest:
    """Bagged CART forest with Gini splits; tree t is seeded with seed + t."""
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if X.ndim != 2 or X.shape[0] != y.size:
        raise ArgumentError("features must be (n, d) matching labels")
    if y.size < 2 or not np.isin(y, (0, 1)).all():
        raise ArgumentError("need >= 2 binary labels")
    if y.min() == y.max():
        raise ArgumentError("training labels contain a single class")
    if n_trees < 1:
        raise ArgumentError("n_trees must be >= 1")
    d = X.shape[1]
    n_sub = max_features or max(1, int(math.sqrt(d)))
    trees = []
    for t in range(n_trees):
        rng = np.random.default_rng(seed + t)
        boot = rng.integers(0, y.size, size=y.size)
        trees.append(_grow(X[boot], y[boot], rng, 0, max_depth, min_leaf, n_sub))
    return Forest(trees, n_trees, seed, d,
                  {"max_depth": max_depth, "min_leaf": min_leaf, "max_features": n_sub})


def _flatten(tree: TreeNode):
    feat, thr, left, right, val = [], [], [], [], []

    def visit(node):
        i = len(feat)
        feat.append(node.feature_idx)
        thr.append(node.threshold)
        left.append(-1)
        right.append(-1)
        val.append(node.water_probability)
        if not node.is_leaf:
            left[i] = visit(node.left)
            right[i] = visit(node.right)
        return i

    visit(tree)
    return (np.array(feat), np.array(thr), np.array(left), np.array(right), np.array(val))


def tree_predict_proba(tree: TreeNode, X: np.ndarray) -> np.ndarray:
    feat, thr, left, right, val = _flatten(tree)
    node = np.zeros(X.shape[0], dtype=np.intp)
    rows = np.arange(X.shape[0])
    while True:
        inner = left[node] >= 0
        if not inner.any():
            break
        f = feat[node]
        go_left = X[rows, np.maximum(f, 0)] <= thr[node]
        node = np.where(inner, np.where(go_left, left[node], right[node]), node)
    return val[node]


def forest_proba(forest: Forest, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.shape[1] != forest.n_features:
        raise ArgumentError(f"{X.shape[1]} features given, forest expects {forest.n_features}")
    acc = np.zeros(X.shape[0])
    for tree in forest.trees:
        acc += tree_predict_proba(tree, X)
    return acc / forest.n_trees


def rf_predict(forest: Forest, image: Raster) -> Raster:
    """Water where the mean leaf probability exceeds 0.5; NaN pixels become 0."""
    if image.bands != forest.n_features:
        raise ArgumentError(f"image has {image.bands} bands, forest expects {forest.n_features}")
    X = image.data.reshape(image.bands, -1).T.astype(np.float64)
    nan = np.isnan(X).any(axis=1)
    prob = forest_proba(forest, np.where(np.isnan(X), 0.0, X))
    out = (prob > 0.5) & ~nan
    return Raster(out.reshape(1, image.height, image.width).astype(np.float32))


def pixel_samples(tiles, max_pixels: int = 200_000, seed: int = 0):
    """Stack (features, labels) from tiles, uniformly subsampled to ``max_pixels``."""
    X = np.concatenate([t.image.data.reshape(t.image.bands, -1).T for t in tiles])
    y = np.concatenate([t.mask.data.reshape(-1) for t in tiles])
    keep = ~(np.isnan(X).any(axis=1) | np.isnan(y))
    X, y = X[keep], y[keep]
    if y.size > max_pixels:
        pick = np.sort(np.random.default_rng(seed).choice(y.size, size=max_pixels, replace=False))
        X, y = X[pick], y[pick]
    return X, y
