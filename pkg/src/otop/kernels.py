"""Raster kernels with compiled/pure-Python backend selection.

The compiled extension ``otop._core`` is used when importable; set
``OTOP_PURE_PYTHON=1`` to force the numpy fallback.  Both backends produce
bitwise-identical results for the fixed-order kernels below.

The training path (``conv_gemm*``) goes through BLAS instead: it is much faster
for batched float32/float64 work and does not need size-independent rounding.
"""

import os

import numpy as np

from . import _kernels_py

_core = None
if not os.environ.get("OTOP_PURE_PYTHON"):
    try:
        from . import _core
    except ImportError:  # extension not built
        _core = None

BACKEND = "compiled" if _core is not None else "python"
_impl = _core if _core is not None else _kernels_py


def backend_module(name=None):
    """Return the kernel module for ``name`` ('compiled', 'python' or current)."""
    if name is None:
        return _impl
    if name == "python":
        return _kernels_py
    if name == "compiled":
        if _core is None:
            raise ImportError("otop._core is not built")
        return _core
    raise ValueError(f"unknown backend {name!r}")


def set_backend(name):
    """Switch the active kernel backend; returns the previous name."""
    global _impl, BACKEND
    prev = BACKEND
    _impl = backend_module(name)
    BACKEND = name
    return prev


def _c(a, dtype=None):
    return np.ascontiguousarray(a, dtype=dtype)


def conv3x3(x, w, b):
    """Zero-padded 3x3 convolution (C,H,W) -> (O,H,W), fixed accumulation order."""
    x = _c(x)
    return _impl.conv3x3(x, _c(w, x.dtype), _c(b, x.dtype))


def block_max2(x, with_index=False):
    out, idx = _impl.block_max2(_c(x))
    return (out, idx) if with_index else out


def block_max2_grad(g, idx, H, W):
    return _impl.block_max2_grad(_c(g), _c(idx, np.int8), int(H), int(W))


def upsample_coords(n_in, factor, n_out=None):
    """Half-pixel-centre source indices and weights along one axis.

    Output index o samples source coordinate (o + 0.5)/factor - 0.5, clamped
    to [0, n_in - 1].  Returns (i0, i1, frac).
    """
    if n_out is None:
        n_out = n_in * factor
    o = np.arange(n_out, dtype=np.float64)
    src = np.clip((o + 0.5) / factor - 0.5, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def bilinear_up(x, factor, out_h=None, out_w=None):
    """Bilinear upsampling by a power-of-two factor, optionally cropped to (out_h, out_w)."""
    x = _c(x)
    _, h, w = x.shape
    out_h = h * factor if out_h is None else out_h
    out_w = w * factor if out_w is None else out_w
    y0, y1, wy = upsample_coords(h, factor, out_h)
    x0, x1, wx = upsample_coords(w, factor, out_w)
    return _impl.bilinear_gather(x, y0, y1, wy.astype(x.dtype), x0, x1, wx.astype(x.dtype))


def upsample_matrix(n_in, factor, n_out, dtype=np.float64):
    """Dense (n_out, n_in) interpolation matrix for one axis."""
    i0, i1, frac = upsample_coords(n_in, factor, n_out)
    m = np.zeros((n_out, n_in), dtype=dtype)
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), (1 - frac).astype(dtype))
    np.add.at(m, (rows, i1), frac.astype(dtype))
    return m


def bilinear_up_adjoint(g, factor, h, w):
    """Adjoint of ``bilinear_up``: g (..., OH, OW) -> (..., h, w)."""
    OH, OW = g.shape[-2:]
    my = upsample_matrix(h, factor, OH, g.dtype)
    mx = upsample_matrix(w, factor, OW, g.dtype)
    return my.T @ g @ mx


# --- batched BLAS convolution used by the trainer -------------------------

def im2col(x):
    """(N,C,H,W) -> (C*9, N*H*W) columns of zero-padded 3x3 neighbourhoods."""
    N, C, H, W = x.shape
    pad = np.zeros((N, C, H + 2, W + 2), dtype=x.dtype)
    pad[:, :, 1:H + 1, 1:W + 1] = x
    cols = np.empty((C, 3, 3, N, H, W), dtype=x.dtype)
    for ky in range(3):
        for kx in range(3):
            cols[:, ky, kx] = pad[:, :, ky:ky + H, kx:kx + W].transpose(1, 0, 2, 3)
    return cols.reshape(C * 9, N * H * W)


def col2im(cols, shape):
    N, C, H, W = shape
    cols = cols.reshape(C, 3, 3, N, H, W)
    pad = np.zeros((N, C, H + 2, W + 2), dtype=cols.dtype)
    for ky in range(3):
        for kx in range(3):
            pad[:, :, ky:ky + H, kx:kx + W] += cols[:, ky, kx].transpose(1, 0, 2, 3)
    return pad[:, :, 1:H + 1, 1:W + 1]


def conv_gemm(x, w):
    """Batched 3x3 convolution without bias: returns (out (N,O,H,W), cols)."""
    N, C, H, W = x.shape
    O = w.shape[0]
    cols = im2col(x)
    out = w.reshape(O, C * 9) @ cols
    return out.reshape(O, N, H, W).transpose(1, 0, 2, 3), cols


def conv_gemm_backward(gout, cols, w, x_shape, need_input_grad=True):
    """Gradients of ``conv_gemm`` w.r.t. weights and (optionally) input."""
    N, C, H, W = x_shape
    O = w.shape[0]
    g = gout.transpose(1, 0, 2, 3).reshape(O, N * H * W)
    gw = (g @ cols.T).reshape(w.shape)
    gx = None
    if need_input_grad:
        gx = col2im(w.reshape(O, C * 9).T @ g, x_shape)
    return gw, gx
