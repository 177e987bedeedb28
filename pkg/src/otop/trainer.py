"""Offline training: cross-entropy loss, hand-written backprop, SGD with poly decay.

The training pass works on batches shaped (N, C, H, W).  Convolutions go through
im2col + BLAS; pooling and upsampling reuse the raster kernels.  BN always uses
batch statistics here and updates the running statistics with momentum.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import kernels
from .errors import ArgumentError
from .mscnn import NetworkConfig, NetworkParams, check_input, init_params, softmax2

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 0.1
    max_iters: int = 2000
    poly_power: float = 1.0
    batch_size: int = 8
    seed: int = 0
    bn_momentum: float = 0.9

    def __post_init__(self):
        if not self.base_lr > 0:
            raise ArgumentError("base_lr must be positive")
        if self.max_iters < 1:
            raise ArgumentError("max_iters must be >= 1")
        if not self.poly_power > 0:
            raise ArgumentError("poly_power must be positive")
        if self.batch_size < 1:
            raise ArgumentError("batch_size must be >= 1")
        if not 0 <= self.bn_momentum < 1:
            raise ArgumentError("bn_momentum must lie in [0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ArgumentError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainingBatch:
    images: np.ndarray   # (N, bands, T, T)
    targets: np.ndarray  # (N, T, T), values 0/1

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[0] < 1:
            raise ArgumentError("images must be a non-empty (N, bands, H, W) array")
        n, _, h, w = self.images.shape
        if self.targets.ndim == 4 and self.targets.shape[1] == 1:
            self.targets = self.targets[:, 0]
        if self.targets.shape != (n, h, w):
            raise ArgumentError(f"targets shape {self.targets.shape} != {(n, h, w)}")
        if not np.isin(self.targets, (0, 1)).all():
            raise ArgumentError("targets must be binary")

    @classmethod
    def from_tiles(cls, tiles) -> "TrainingBatch":
        images = np.stack([t.image.data for t in tiles])
        targets = np.stack([t.mask.data[0] for t in tiles])
        return cls(images, targets)


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)  # (iter, lr, loss)

    def to_csv(self) -> str:
        lines = ["iter,lr,loss"]
        lines += [f"{i},{lr!r},{loss!r}" for i, lr, loss in self.records]
        return "\n".join(lines) + "\n"


def loss_bce(prob_water, target) -> float:
    """Mean binary cross-entropy with probabilities clamped to [1e-7, 1 - 1e-7]."""
    p = np.asarray(prob_water, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    if p.shape != y.shape:
        raise ArgumentError(f"prob shape {p.shape} != target shape {y.shape}")
    p = np.clip(p, PROB_CLAMP, 1 - PROB_CLAMP)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))


def poly_lr(iteration: int, config: TrainConfig) -> float:
    if not 0 <= iteration <= config.max_iters:
        raise ArgumentError(f"iteration {iteration} outside [0, {config.max_iters}]")
    return config.base_lr * (1 - iteration / config.max_iters) ** config.poly_power


# --- training-mode forward / backward ------------------------------------------

def _layer_forward(x, params, name, eps):
    w = params[f"{name}.weight"]
    raw, cols = kernels.conv_gemm(x, w)
    M = raw.shape[0] * raw.shape[2] * raw.shape[3]
    mu = raw.mean(axis=(0, 2, 3), keepdims=True)
    cen = raw - mu
    var = (cen * cen).mean(axis=(0, 2, 3), keepdims=True)
    inv = 1 / np.sqrt(var + x.dtype.type(eps))
    xhat = cen * inv
    y = xhat * params[f"{name}.gamma"][None, :, None, None] + params[f"{name}.beta"][None, :, None, None]
    active = y > 0
    cache = (x.shape, cols, xhat, inv, active, M, mu, var)
    return np.where(active, y, 0), cache


def _layer_backward(da, params, name, cache, need_input_grad, grads):
    x_shape, cols, xhat, inv, active, M, _, _ = cache
    dy = np.where(active, da, 0)
    grads[f"{name}.gamma"] = (dy * xhat).sum(axis=(0, 2, 3))
    grads[f"{name}.beta"] = dy.sum(axis=(0, 2, 3))
    dxhat = dy * params[f"{name}.gamma"][None, :, None, None]
    s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
    s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
    draw = inv / M * (M * dxhat - s1 - xhat * s2)
    grads[f"{name}.bias"] = draw.sum(axis=(0, 2, 3))
    gw, gx = kernels.conv_gemm_backward(draw, cols, params[f"{name}.weight"], x_shape, need_input_grad)
    grads[f"{name}.weight"] = gw
    return gx


def _pool(h):
    N, C, H, W = h.shape
    out, idx = kernels.block_max2(h.reshape(N * C, H, W), with_index=True)
    return out.reshape(N, C, *out.shape[1:]), idx


def _unpool(g, idx, shape):
    N, C, H, W = shape
    return kernels.block_max2_grad(g.reshape(N * C, *g.shape[2:]), idx, H, W).reshape(shape)


def forward_train(params: NetworkParams, images: np.ndarray, keep_cache: bool = True):
    """Training-mode forward on (N, bands, H, W); returns (logits, prob, cache)."""
    cfg = params.config
    check_input(cfg, images.shape[1:])
    x = np.ascontiguousarray(images, dtype=params.dtype)
    N, _, H, W = x.shape
    eps = cfg.bn_eps
    caches = {}
    ups = []
    h = x
    for s in range(1, cfg.num_scales + 1):
        for k in (1, 2, 3):
            name = f"s{s}.m{k}"
            h, caches[name] = _layer_forward(h, params, name, eps)
        name = f"s{s}.single"
        f, caches[name] = _layer_forward(h, params, name, eps)
        hs, ws = f.shape[2:]
        up = kernels.bilinear_up(f.reshape(N, hs, ws), 2 ** (s - 1), H, W)
        ups.append(up.reshape(N, 1, H, W))
        caches[f"s{s}.upshape"] = (hs, ws)
        if s < cfg.num_scales:
            caches[f"s{s}.poolshape"] = h.shape
            h, caches[f"s{s}.pool"] = _pool(h)
    stack = np.concatenate(ups, axis=1)
    raw, cols = kernels.conv_gemm(stack, params["fusion.weight"])
    logits = raw + params["fusion.bias"][None, :, None, None]
    prob = softmax2(logits.transpose(1, 0, 2, 3)).transpose(1, 0, 2, 3)
    caches["fusion"] = (stack.shape, cols)
    return logits, prob, (caches if keep_cache else None)


def _loss_grad_logits(prob, targets):
    p = prob[:, 1]
    n = p.size
    inside = (p >= PROB_CLAMP) & (p <= 1 - PROB_CLAMP)
    d1 = np.where(inside, (p - targets) / n, 0).astype(prob.dtype)
    return np.stack([-d1, d1], axis=1)


def backward(params: NetworkParams, batch: TrainingBatch, update_stats: bool = True):
    """Loss and exact gradients for every trainable tensor.

    Returns (grads, loss, stats) where ``stats`` maps layer names to the batch
    (mean, var) used to update running statistics.
    """
    if not params.training:
        raise ArgumentError("backward needs params in training mode")
    cfg = params.config
    if batch.images.shape[1] != cfg.in_bands:
        raise ArgumentError(f"batch has {batch.images.shape[1]} bands, network expects {cfg.in_bands}")
    _, prob, caches = forward_train(params, batch.images)
    targets = batch.targets.astype(prob.dtype)
    loss = loss_bce(prob[:, 1], targets)
    grads = {}
    dlogits = _loss_grad_logits(prob, targets)
    stack_shape, cols = caches["fusion"]
    grads["fusion.bias"] = dlogits.sum(axis=(0, 2, 3))
    gw, dstack = kernels.conv_gemm_backward(dlogits, cols, params["fusion.weight"], stack_shape)
    grads["fusion.weight"] = gw
    N = stack_shape[0]
    dh_from_below = None
    for s in range(cfg.num_scales, 0, -1):
        hs, ws = caches[f"s{s}.upshape"]
        dup = dstack[:, s - 1]
        df = kernels.bilinear_up_adjoint(dup, 2 ** (s - 1), hs, ws).reshape(N, 1, hs, ws)
        dh = _layer_backward(df, params, f"s{s}.single", caches[f"s{s}.single"], True, grads)
        if dh_from_below is not None:
            dh = dh + dh_from_below
        for k in (3, 2, 1):
            name = f"s{s}.m{k}"
            need = not (s == 1 and k == 1)
            dh = _layer_backward(dh, params, name, caches[name], need, grads)
        if s > 1:
            dh_from_below = _unpool(dh, caches[f"s{s - 1}.pool"], caches[f"s{s - 1}.poolshape"])
    stats = {}
    if update_stats:
        for name, _, _ in cfg.layer_names():
            *_, M, mu, var = caches[name]
            mean = mu.reshape(-1) + params[f"{name}.bias"]
            unbiased = var.reshape(-1) * (M / max(M - 1, 1))
            stats[name] = (mean, unbiased)
    grads = {k: np.ascontiguousarray(v, dtype=params.dtype) for k, v in grads.items()}
    return grads, loss, stats


def batch_loss(params: NetworkParams, batch: TrainingBatch) -> float:
    _, prob, _ = forward_train(params, batch.images, keep_cache=False)
    return loss_bce(prob[:, 1], batch.targets)


def sgd_step(params: NetworkParams, grads: dict, lr: float) -> NetworkParams:
    """Return new params with w <- w - lr * g for every trainable tensor."""
    if lr < 0:
        raise ArgumentError("lr must be non-negative")
    tensors = dict(params.tensors)
    for name in params.trainable_names():
        g = grads.get(name)
        if g is None:
            continue
        w = params[name]
        if g.shape != w.shape:
            raise ArgumentError(f"gradient {name}: shape {g.shape} != {w.shape}")
        tensors[name] = w - w.dtype.type(lr) * g.astype(w.dtype, copy=False)
    return NetworkParams(params.config, tensors, params.training)


def update_running_stats(params: NetworkParams, stats: dict, momentum: float) -> NetworkParams:
    tensors = dict(params.tensors)
    m = params.dtype.type(momentum)
    for name, (mean, var) in stats.items():
        tensors[f"{name}.mean"] = m * params[f"{name}.mean"] + (1 - m) * mean.astype(params.dtype)
        tensors[f"{name}.var"] = m * params[f"{name}.var"] + (1 - m) * var.astype(params.dtype)
    return NetworkParams(params.config, tensors, params.training)


def train(config: TrainConfig, dataset, network: NetworkConfig | None = None,
          params: NetworkParams | None = None, callback=None):
    """Train from scratch (or from ``params``); returns (inference params, history)."""
    if not dataset:
        raise ArgumentError("training dataset is empty")
    network = network or (params.config if params is not None else NetworkConfig())
    images = np.stack([t.image.data for t in dataset])
    targets = np.stack([t.mask.data[0] for t in dataset])
    if np.isnan(images).any() or np.isnan(targets).any():
        raise ArgumentError("training tiles contain nodata; filter them first")
    if params is None:
        params = init_params(network, config.seed, training=True)
    else:
        params = params.copy(training=True, dtype=np.float32)
    rng = np.random.default_rng(config.seed)
    history = TrainHistory()
    for it in range(config.max_iters):
        pick = rng.integers(0, len(dataset), size=config.batch_size)
        batch = TrainingBatch(images[pick], targets[pick])
        grads, loss, stats = backward(params, batch)
        lr = poly_lr(it, config)
        params = sgd_step(params, grads, lr)
        params = update_running_stats(params, stats, config.bn_momentum)
        if not np.isfinite(loss) or not all(np.isfinite(t).all() for t in params.tensors.values()):
            raise ArithmeticError(f"non-finite loss or parameters at iteration {it}")
        history.records.append((it, lr, loss))
        if callback is not None:
            callback(it, lr, loss)
        if it % 100 == 0:
            log.info("iter %d lr %.5f loss %.5f", it, lr, loss)
    return params.with_mode(False), history


# --- finite-difference gradient check ------------------------------------------

def grad_check(config: NetworkConfig, seed: int, eps: float = 1e-6, batch_size: int = 2,
               size: int = 12, zero_fusion: bool = False, return_details: bool = False):
    """Max relative error between backprop and central differences, in float64.

    Relative error per coefficient is |a - n| / max(1e-8, |a| + |n|).
    """
    rng = np.random.default_rng(seed)
    params = init_params(config, seed, training=True, dtype=np.float64)
    t = params.tensors
    for name, _, cout in config.layer_names():
        t[f"{name}.bias"] = rng.normal(0, 0.1, cout)
        t[f"{name}.gamma"] = rng.uniform(0.5, 1.5, cout)
        t[f"{name}.beta"] = rng.normal(0, 0.2, cout)
    t["fusion.bias"] = rng.normal(0, 0.1, config.num_classes)
    if zero_fusion:
        t["fusion.weight"] = np.zeros_like(t["fusion.weight"])
    images = rng.uniform(0, 1, (batch_size, config.in_bands, size, size))
    targets = (rng.uniform(0, 1, (batch_size, size, size)) > 0.5).astype(np.float64)
    batch = TrainingBatch(images, targets)
    grads, _, _ = backward(params, batch, update_stats=False)
    worst = 0.0
    details = {}
    for name in params.trainable_names():
        w = t[name]
        num = np.empty_like(w)
        flat = w.reshape(-1)
        nflat = num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = batch_loss(params, batch)
            flat[i] = orig - eps
            fm = batch_loss(params, batch)
            flat[i] = orig
            nflat[i] = (fp - fm) / (2 * eps)
        a = grads[name]
        rel = np.abs(a - num) / np.maximum(1e-8, np.abs(a) + np.abs(num))
        details[name] = float(rel.max())
        worst = max(worst, details[name])
    return (worst, details) if return_details else worst
