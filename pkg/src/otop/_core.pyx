# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled raster kernels.

Every routine here has a numpy twin in ``_kernels_py`` that performs the same
IEEE operations in the same order, so both backends agree bit for bit.  The
extension must be compiled with ``-ffp-contract=off`` (no fused multiply-add).
"""

import numpy as np
from cython cimport floating


def conv3x3(const floating[:, :, ::1] x, const floating[:, :, :, ::1] w, const floating[::1] b):
    """Zero-padded 3x3 correlation, (C,H,W) -> (O,H,W).

    Per output value the accumulation order is input channel, kernel row,
    kernel column; the bias is added last.
    """
    cdef Py_ssize_t C = x.shape[0], H = x.shape[1], W = x.shape[2]
    cdef Py_ssize_t O = w.shape[0]
    if w.shape[1] != C or w.shape[2] != 3 or w.shape[3] != 3 or b.shape[0] != O:
        raise ValueError("conv3x3: weight/bias shape mismatch")
    dtype = np.float32 if floating is float else np.float64
    pad = np.zeros((C, H + 2, W + 2), dtype=dtype)
    pad[:, 1:H + 1, 1:W + 1] = np.asarray(x)
    out = np.zeros((O, H, W), dtype=dtype)
    cdef floating[:, :, ::1] xp = pad
    cdef floating[:, :, ::1] res = out
    cdef Py_ssize_t o, c, ky, kx, yy, xx
    cdef floating wv, bv
    cdef floating* orow
    cdef const floating* irow
    with nogil:
        for o in range(O):
            for c in range(C):
                for ky in range(3):
                    for kx in range(3):
                        wv = w[o, c, ky, kx]
                        for yy in range(H):
                            orow = &res[o, yy, 0]
                            irow = &xp[c, yy + ky, kx]
                            for xx in range(W):
                                orow[xx] = orow[xx] + wv * irow[xx]
            bv = b[o]
            for yy in range(H):
                orow = &res[o, yy, 0]
                for xx in range(W):
                    orow[xx] = orow[xx] + bv
    return out


def block_max2(const floating[:, :, ::1] x):
    """2x2 stride-2 max with ceil-sized edge blocks.

    Returns (out, idx) where idx in {0,1,2,3} is the row-major position of the
    first maximum inside each block.
    """
    cdef Py_ssize_t C = x.shape[0], H = x.shape[1], W = x.shape[2]
    cdef Py_ssize_t h = (H + 1) // 2, w = (W + 1) // 2
    dtype = np.float32 if floating is float else np.float64
    out = np.empty((C, h, w), dtype=dtype)
    idx = np.empty((C, h, w), dtype=np.int8)
    cdef floating[:, :, ::1] res = out
    cdef signed char[:, :, ::1] ix = idx
    cdef Py_ssize_t c, i, j, dy, dx, y, xx
    cdef floating best, v
    cdef signed char k
    with nogil:
        for c in range(C):
            for i in range(h):
                for j in range(w):
                    best = x[c, 2 * i, 2 * j]
                    k = 0
                    for dy in range(2):
                        y = 2 * i + dy
                        if y >= H:
                            break
                        for dx in range(2):
                            xx = 2 * j + dx
                            if (dy == 0 and dx == 0) or xx >= W:
                                continue
                            v = x[c, y, xx]
                            if v > best:
                                best = v
                                k = <signed char>(2 * dy + dx)
                    res[c, i, j] = best
                    ix[c, i, j] = k
    return out, idx


def block_max2_grad(const floating[:, :, ::1] g, const signed char[:, :, ::1] idx, Py_ssize_t H, Py_ssize_t W):
    """Route each pooled gradient to the recorded argmax pixel."""
    cdef Py_ssize_t C = g.shape[0], h = g.shape[1], w = g.shape[2]
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((C, H, W), dtype=dtype)
    cdef floating[:, :, ::1] res = out
    cdef Py_ssize_t c, i, j
    cdef signed char k
    with nogil:
        for c in range(C):
            for i in range(h):
                for j in range(w):
                    k = idx[c, i, j]
                    res[c, 2 * i + k // 2, 2 * j + k % 2] = g[c, i, j]
    return out


def bilinear_gather(const floating[:, :, ::1] x,
                    const Py_ssize_t[::1] y0, const Py_ssize_t[::1] y1, const floating[::1] wy,
                    const Py_ssize_t[::1] x0, const Py_ssize_t[::1] x1, const floating[::1] wx):
    """Separable bilinear blend: columns first, then rows."""
    cdef Py_ssize_t C = x.shape[0], h = x.shape[1]
    cdef Py_ssize_t OH = y0.shape[0], OW = x0.shape[0]
    dtype = np.float32 if floating is float else np.float64
    tmp = np.empty((C, h, OW), dtype=dtype)
    out = np.empty((C, OH, OW), dtype=dtype)
    cdef floating[:, :, ::1] t = tmp
    cdef floating[:, :, ::1] res = out
    cdef Py_ssize_t c, r, q
    cdef floating a, bw
    with nogil:
        for c in range(C):
            for r in range(h):
                for q in range(OW):
                    bw = wx[q]
                    a = 1 - bw
                    t[c, r, q] = x[c, r, x0[q]] * a + x[c, r, x1[q]] * bw
            for r in range(OH):
                bw = wy[r]
                a = 1 - bw
                for q in range(OW):
                    res[c, r, q] = t[c, y0[r], q] * a + t[c, y1[r], q] * bw
    return out
