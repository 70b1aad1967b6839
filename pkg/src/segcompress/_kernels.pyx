# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: patch extraction, patch scatter-add, uint8 matmul."""
import numpy as np
cimport numpy as cnp
from cython cimport floating

cnp.import_array()


cdef inline void _valid_range(Py_ssize_t j, Py_ssize_t stride, Py_ssize_t pad_lo, Py_ssize_t w,
                              Py_ssize_t wo, Py_ssize_t* lo, Py_ssize_t* hi) nogil:
    # output columns ox whose source ox * stride + j - pad_lo lies in [0, w)
    cdef Py_ssize_t a = pad_lo - j
    lo[0] = 0 if a <= 0 else (a + stride - 1) // stride
    a = w - 1 + pad_lo - j
    hi[0] = 0 if a < 0 else a // stride + 1
    if hi[0] > wo:
        hi[0] = wo
    if lo[0] > hi[0]:
        lo[0] = hi[0]


def im2col(floating[:, :, :, ::1] x, int kh, int kw, int stride, int pad_lo, int pad_hi):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = (h + pad_lo + pad_hi - kh) // stride + 1
    cdef Py_ssize_t wo = (w + pad_lo + pad_hi - kw) // stride + 1
    dtype = np.float32 if floating is float else np.float64
    out = np.empty((n, c * kh * kw, ho * wo), dtype=dtype)
    cdef floating[:, :, ::1] cols = out
    cdef Py_ssize_t b, ch, i, j, oy, ox, iy, row, lo, hi, off
    cdef floating* dst
    cdef const floating* src
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        row = (ch * kh + i) * kw + j
                        _valid_range(j, stride, pad_lo, w, wo, &lo, &hi)
                        for oy in range(ho):
                            dst = &cols[b, row, oy * wo]
                            iy = oy * stride + i - pad_lo
                            if iy < 0 or iy >= h:
                                for ox in range(wo):
                                    dst[ox] = 0
                                continue
                            src = &x[b, ch, iy, 0]
                            off = j - pad_lo
                            for ox in range(lo):
                                dst[ox] = 0
                            if stride == 1:
                                for ox in range(lo, hi):
                                    dst[ox] = src[ox + off]
                            else:
                                for ox in range(lo, hi):
                                    dst[ox] = src[ox * stride + off]
                            for ox in range(hi, wo):
                                dst[ox] = 0
    return out


def col2im(floating[:, :, ::1] cols, shape, int kh, int kw, int stride, int pad_lo, int pad_hi):
    cdef Py_ssize_t n = shape[0], c = shape[1], h = shape[2], w = shape[3]
    cdef Py_ssize_t ho = (h + pad_lo + pad_hi - kh) // stride + 1
    cdef Py_ssize_t wo = (w + pad_lo + pad_hi - kw) // stride + 1
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((n, c, h, w), dtype=dtype)
    cdef floating[:, :, :, ::1] dx = out
    cdef Py_ssize_t b, ch, i, j, oy, ox, iy, ix, row
    # (i, j) outermost per element: same accumulation order as the numpy path
    for b in range(n):
        for ch in range(c):
            for i in range(kh):
                for j in range(kw):
                    row = (ch * kh + i) * kw + j
                    for oy in range(ho):
                        iy = oy * stride + i - pad_lo
                        if iy < 0 or iy >= h:
                            continue
                        for ox in range(wo):
                            ix = ox * stride + j - pad_lo
                            if ix >= 0 and ix < w:
                                dx[b, ch, iy, ix] += cols[b, row, oy * wo + ox]
    return out


def int_matmul_u8(const unsigned char[:, ::1] a, int zp_a, const unsigned char[:, ::1] b, int zp_b):
    cdef Py_ssize_t m = a.shape[0], k = a.shape[1], n = b.shape[1]
    out = np.zeros((m, n), dtype=np.int32)
    cdef int[:, ::1] acc = out
    cdef Py_ssize_t i, j, p
    cdef int av
    for i in range(m):
        for p in range(k):
            av = <int>a[i, p] - zp_a
            for j in range(n):
                acc[i, j] += av * (<int>b[p, j] - zp_b)
    return out
