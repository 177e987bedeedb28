"""Pure-numpy kernels, bitwise twins of the compiled ``_core`` routines."""

import numpy as np


def conv3x3(x, w, b):
    C, H, W = x.shape
    O = w.shape[0]
    if w.shape != (O, C, 3, 3) or b.shape != (O,):
        raise ValueError("conv3x3: weight/bias shape mismatch")
    pad = np.zeros((C, H + 2, W + 2), dtype=x.dtype)
    pad[:, 1:H + 1, 1:W + 1] = x
    out = np.zeros((O, H, W), dtype=x.dtype)
    for c in range(C):
        for ky in range(3):
            for kx in range(3):
                out += w[:, c, ky, kx, None, None] * pad[c, ky:ky + H, kx:kx + W]
    out += b[:, None, None]
    return out


def block_max2(x):
    C, H, W = x.shape
    h, w = (H + 1) // 2, (W + 1) // 2
    pad = np.full((C, 2 * h, 2 * w), -np.inf, dtype=x.dtype)
    pad[:, :H, :W] = x
    best = pad[:, 0::2, 0::2].copy()
    idx = np.zeros((C, h, w), dtype=np.int8)
    for k, (dy, dx) in enumerate(((0, 1), (1, 0), (1, 1)), start=1):
        v = pad[:, dy::2, dx::2]
        m = v > best
        best[m] = v[m]
        idx[m] = k
    return best, idx


def block_max2_grad(g, idx, H, W):
    C, h, w = g.shape
    out = np.zeros((C, 2 * h, 2 * w), dtype=g.dtype)
    for k in range(4):
        dy, dx = divmod(k, 2)
        out[:, dy::2, dx::2] = np.where(idx == k, g, 0)
    return np.ascontiguousarray(out[:, :H, :W])


def bilinear_gather(x, y0, y1, wy, x0, x1, wx):
    t = x[:, :, x0] * (1 - wx) + x[:, :, x1] * wx
    return t[:, y0, :] * (1 - wy)[:, None] + t[:, y1, :] * wy[:, None]
