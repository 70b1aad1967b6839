"""Pure-numpy implementations of the hot kernels.

Used when the compiled extension is unavailable (or when
``SEGCOMPRESS_PURE_PYTHON=1``).  Accumulation order matches the Cython
loop nest so both backends produce bit-identical results.
"""
import numpy as np


def im2col(x, kh, kw, stride, pad_lo, pad_hi):
    n, c, h, w = x.shape
    ho = (h + pad_lo + pad_hi - kh) // stride + 1
    wo = (w + pad_lo + pad_hi - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad_lo, pad_hi), (pad_lo, pad_hi)))
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(n, c * kh * kw, ho * wo)


def col2im(cols, shape, kh, kw, stride, pad_lo, pad_hi):
    n, c, h, w = shape
    ho = (h + pad_lo + pad_hi - kh) // stride + 1
    wo = (w + pad_lo + pad_hi - kw) // stride + 1
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    xp = np.zeros((n, c, h + pad_lo + pad_hi, w + pad_lo + pad_hi), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    return np.ascontiguousarray(xp[:, :, pad_lo:pad_lo + h, pad_lo:pad_lo + w])


def int_matmul_u8(a, zp_a, b, zp_b):
    a32 = a.astype(np.int32) - np.int32(zp_a)
    b32 = b.astype(np.int32) - np.int32(zp_b)
    return a32 @ b32
