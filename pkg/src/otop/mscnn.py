"""Multiscale CNN: parameters, inference forward pass and MSNW weights container.

Architecture, per scale s = 1..S::

    h <- relu(bn(conv3x3(h)))   x3            (width(s) channels)
    f_s <- relu(bn(conv3x3(h) -> 1 channel))  (single-feature map)
    h <- blockmax2(h)                         (if s < S)

Every f_s is bilinearly upsampled by 2^(s-1) to the input size, the S maps are
stacked in scale order and a bare 3x3 fusion convolution produces two logits
(band 0 non-water, band 1 water), followed by a softmax.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ArgumentError, FormatError
from .raster import Raster

DEFAULT_WIDTHS = (16, 24, 32, 48, 64, 96)
MSNW_MAGIC = b"MSNW"
MSNW_VERSION = 1
TRAINABLE = ("weight", "bias", "gamma", "beta")
_BN_SUFFIXES = ("gamma", "beta", "mean", "var")


@dataclass(frozen=True)
class NetworkConfig:
    num_scales: int = 6
    widths: tuple = DEFAULT_WIDTHS
    in_bands: int = 6
    num_classes: int = 2
    bn_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.num_scales < 1:
            raise ArgumentError("num_scales must be >= 1")
        if len(self.widths) != self.num_scales or min(self.widths) < 1:
            raise ArgumentError(f"need {self.num_scales} positive widths, got {self.widths}")
        if self.in_bands < 1:
            raise ArgumentError("in_bands must be >= 1")
        if self.num_classes != 2:
            raise ArgumentError("only two-class networks are supported")
        if not self.bn_eps > 0:
            raise ArgumentError("bn_eps must be positive")

    @classmethod
    def tiny(cls, num_scales=2, width=4, **kw):
        return cls(num_scales=num_scales, widths=(width,) * num_scales, **kw)

    def layer_names(self):
        """(name, in_ch, out_ch) for every conv+BN layer in container order."""
        out = []
        prev = self.in_bands
        for s in range(1, self.num_scales + 1):
            w = self.widths[s - 1]
            for k in range(1, 4):
                out.append((f"s{s}.m{k}", prev if k == 1 else w, w))
            out.append((f"s{s}.single", w, 1))
            prev = w
        return out

    def to_header(self) -> dict:
        return {
            "num_scales": self.num_scales,
            "widths": list(self.widths),
            "in_bands": self.in_bands,
            "num_classes": self.num_classes,
            "bn_eps": self.bn_eps,
        }


@dataclass
class ConvParams:
    weights: np.ndarray  # (out, in, 3, 3)
    bias: np.ndarray     # (out,)

    @property
    def out_ch(self):
        return self.weights.shape[0]

    @property
    def in_ch(self):
        return self.weights.shape[1]


@dataclass
class BnParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5

    def scale(self):
        return self.gamma / np.sqrt(self.running_var + self.gamma.dtype.type(self.eps))


def tensor_layout(config: NetworkConfig):
    """Ordered (name, shape) pairs; this is also the MSNW payload order."""
    spec = []
    for name, cin, cout in config.layer_names():
        spec.append((f"{name}.weight", (cout, cin, 3, 3)))
        spec.append((f"{name}.bias", (cout,)))
        for suffix in _BN_SUFFIXES:
            spec.append((f"{name}.{suffix}", (cout,)))
    spec.append(("fusion.weight", (config.num_classes, config.num_scales, 3, 3)))
    spec.append(("fusion.bias", (config.num_classes,)))
    return spec


@dataclass
class NetworkParams:
    """All network tensors keyed by name, plus the BN statistics mode.

    ``training=True`` means BN normalizes with batch statistics; otherwise the
    running statistics are used.
    """

    config: NetworkConfig
    tensors: dict
    training: bool = False

    def __post_init__(self):
        for name, shape in tensor_layout(self.config):
            t = self.tensors.get(name)
            if t is None:
                raise ArgumentError(f"missing tensor {name}")
            if t.shape != shape:
                raise ArgumentError(f"{name}: shape {t.shape} != {shape}")
        extra = set(self.tensors) - {n for n, _ in tensor_layout(self.config)}
        if extra:
            raise ArgumentError(f"unexpected tensors {sorted(extra)}")

    def __getitem__(self, name):
        return self.tensors[name]

    @property
    def dtype(self):
        return self.tensors["fusion.weight"].dtype

    def conv(self, layer: str) -> ConvParams:
        return ConvParams(self.tensors[f"{layer}.weight"], self.tensors[f"{layer}.bias"])

    def bn(self, layer: str) -> BnParams:
        t = self.tensors
        return BnParams(t[f"{layer}.gamma"], t[f"{layer}.beta"],
                        t[f"{layer}.mean"], t[f"{layer}.var"], self.config.bn_eps)

    @property
    def fusion(self) -> ConvParams:
        return self.conv("fusion")

    def trainable_names(self):
        return [n for n, _ in tensor_layout(self.config) if n.rsplit(".", 1)[1] in TRAINABLE]

    def copy(self, training=None, dtype=None) -> "NetworkParams":
        tensors = {k: np.array(v, dtype=dtype or v.dtype) for k, v in self.tensors.items()}
        return NetworkParams(self.config, tensors, self.training if training is None else training)

    def with_mode(self, training: bool) -> "NetworkParams":
        return NetworkParams(self.config, self.tensors, training)

    def __eq__(self, other):
        if not isinstance(other, NetworkParams):
            return NotImplemented
        return (self.config == other.config and self.training == other.training
                and all(self.tensors[k].dtype == other.tensors[k].dtype
                        and self.tensors[k].tobytes() == other.tensors[k].tobytes()
                        for k in self.tensors))


def init_params(config: NetworkConfig, seed: int, training: bool = False,
                dtype=np.float32) -> NetworkParams:
    """He-normal conv weights, zero biases, identity BN statistics."""
    if not isinstance(config, NetworkConfig):
        raise ArgumentError("config must be a NetworkConfig")
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in tensor_layout(config):
        suffix = name.rsplit(".", 1)[1]
        if suffix == "weight":
            std = math.sqrt(2.0 / (shape[1] * 9))
            tensors[name] = rng.normal(0.0, std, size=shape).astype(dtype)
        elif suffix in ("gamma", "var"):
            tensors[name] = np.ones(shape, dtype=dtype)
        else:
            tensors[name] = np.zeros(shape, dtype=dtype)
    return NetworkParams(config, tensors, training)


# --- forward -----------------------------------------------------------------

@dataclass
class ForwardResult:
    logits: Raster
    prob: Raster
    intermediates: dict | None = field(default=None, repr=False)


def check_input(config: NetworkConfig, shape) -> None:
    bands, H, W = shape
    if bands != config.in_bands:
        raise ArgumentError(f"image has {bands} bands, network expects {config.in_bands}")
    need = 2 ** (config.num_scales - 1)
    if H < need or W < need:
        raise ArgumentError(f"image {H}x{W} too small for {config.num_scales} scales (need >= {need})")


def _conv_bn_relu(h, conv: ConvParams, bn: BnParams, training: bool):
    if training:
        # batch statistics over the grid; the conv bias cancels in the centring
        z = kernels.conv3x3(h, conv.weights, np.zeros_like(conv.bias))
        mu = z.mean(axis=(1, 2), keepdims=True)
        var = ((z - mu) ** 2).mean(axis=(1, 2), keepdims=True)
        y = (z - mu) / np.sqrt(var + z.dtype.type(bn.eps)) * bn.gamma[:, None, None] + bn.beta[:, None, None]
    else:
        z = kernels.conv3x3(h, conv.weights, conv.bias)
        y = (z - bn.running_mean[:, None, None]) * bn.scale()[:, None, None] + bn.beta[:, None, None]
    return np.maximum(y, 0)


def softmax2(logits):
    """Per-pixel softmax over the band axis with max subtraction."""
    m = logits.max(axis=0, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=0, keepdims=True)


def forward_array(params: NetworkParams, x: np.ndarray, capture: bool = False):
    """Forward pass on a (bands, H, W) array; returns (logits, prob, intermediates)."""
    cfg = params.config
    check_input(cfg, x.shape)
    x = np.ascontiguousarray(x, dtype=params.dtype)
    _, H, W = x.shape
    inter = {} if capture else None
    h = x
    singles = []
    for s in range(1, cfg.num_scales + 1):
        for layer in (f"s{s}.m1", f"s{s}.m2", f"s{s}.m3"):
            h = _conv_bn_relu(h, params.conv(layer), params.bn(layer), params.training)
            if capture:
                inter[layer] = h
        single = f"s{s}.single"
        f = _conv_bn_relu(h, params.conv(single), params.bn(single), params.training)
        up = kernels.bilinear_up(f, 2 ** (s - 1), H, W)
        singles.append(up)
        if capture:
            inter[f"s{s}.single"] = f
            inter[f"s{s}.up"] = up
        if s < cfg.num_scales:
            h = kernels.block_max2(h)
            if capture:
                inter[f"s{s}.pool"] = h
    stack = np.concatenate(singles, axis=0)
    fusion = params.fusion
    logits = kernels.conv3x3(stack, fusion.weights, fusion.bias)
    prob = softmax2(logits)
    if capture:
        inter["fusion_in"] = stack
    return logits, prob, inter


def forward(params: NetworkParams, image: Raster, capture: bool = False) -> ForwardResult:
    logits, prob, inter = forward_array(params, image.data, capture)
    return ForwardResult(Raster(logits), Raster(prob), inter)


def predict_mask(prob: Raster) -> Raster:
    """Water (1.0) where p_water > p_nonwater; exact ties are non-water."""
    p = prob.data
    return Raster((p[1] > p[0]).astype(np.float32))


def receptive_field(config: NetworkConfig) -> dict:
    """Receptive field of the deepest branch and the matching tiling halo."""
    r, j = 1, 1
    for s in range(1, config.num_scales + 1):
        r += 3 * 2 * j
        if s < config.num_scales:
            r += j
            j *= 2
    r += 2 * j  # single-feature conv at the coarsest scale
    r += 2      # fusion conv at full resolution
    halo = math.ceil(r / 2) + 2 * 2 ** (config.num_scales - 1)
    return {"rf": r, "halo": halo}


def predict_tiled(params: NetworkParams, image: Raster, tile: int = 512) -> Raster:
    """Probability map computed tile by tile with a receptive-field halo.

    Windows start on multiples of the coarsest pooling stride, so each tile's
    interior reproduces the whole-image forward pass exactly.
    """
    step = 2 ** (params.config.num_scales - 1)
    if tile < step or tile % step:
        raise ArgumentError(f"tile {tile} must be a positive multiple of {step}")
    halo = -(-receptive_field(params.config)["halo"] // step) * step
    _, H, W = image.shape
    out = np.empty((2, H, W), dtype=params.dtype)
    for y0 in range(0, H, tile):
        for x0 in range(0, W, tile):
            y1, x1 = min(y0 + tile, H), min(x0 + tile, W)
            ay, ax = max(0, y0 - halo), max(0, x0 - halo)
            by, bx = min(H, y1 + halo), min(W, x1 + halo)
            _, prob, _ = forward_array(params, image.data[:, ay:by, ax:bx])
            out[:, y0:y1, x0:x1] = prob[:, y0 - ay:y1 - ay, x0 - ax:x1 - ax]
    return Raster(out)


# --- MSNW container ------------------------------------------------------------

def save_params(params: NetworkParams) -> bytes:
    header = json.dumps(params.config.to_header(), sort_keys=True, separators=(",", ":")).encode()
    parts = [MSNW_MAGIC, struct.pack("<II", MSNW_VERSION, len(header)), header]
    for name, _ in tensor_layout(params.config):
        parts.append(np.ascontiguousarray(params.tensors[name], dtype="<f4").tobytes())
    return b"".join(parts)


def load_params(buf: bytes) -> NetworkParams:
    if len(buf) < 12 or buf[:4] != MSNW_MAGIC:
        raise FormatError(f"bad MSNW magic {bytes(buf[:4])!r}")
    version, hlen = struct.unpack_from("<II", buf, 4)
    if version != MSNW_VERSION:
        raise FormatError(f"unsupported MSNW version {version}")
    if 12 + hlen > len(buf):
        raise FormatError("MSNW header runs past end of data")
    try:
        header = json.loads(buf[12:12 + hlen].decode("utf-8"))
        config = NetworkConfig(
            num_scales=int(header["num_scales"]),
            widths=tuple(header["widths"]),
            in_bands=int(header["in_bands"]),
            num_classes=int(header["num_classes"]),
            bn_eps=float(header["bn_eps"]),
        )
    except (ValueError, KeyError, TypeError, UnicodeDecodeError) as exc:
        raise FormatError(f"bad MSNW header: {exc}") from exc
    layout = tensor_layout(config)
    expected = sum(math.prod(shape) for _, shape in layout) * 4
    payload = memoryview(buf)[12 + hlen:]
    if len(payload) != expected:
        raise FormatError(f"MSNW payload is {len(payload)} bytes, config implies {expected}")
    tensors, off = {}, 0
    for name, shape in layout:
        n = math.prod(shape)
        tensors[name] = np.frombuffer(payload, dtype="<f4", count=n, offset=off).astype(np.float32).reshape(shape)
        off += 4 * n
    return NetworkParams(config, tensors, training=False)


def save_params_file(params: NetworkParams, path) -> None:
    with open(path, "wb") as fh:
        fh.write(save_params(params))


def load_params_file(path) -> NetworkParams:
    with open(path, "rb") as fh:
        return load_params(fh.read())
