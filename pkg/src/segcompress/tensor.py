"""Dense tensors: the binary tensor file format and the numeric kernels.

Tensors are plain ``numpy.ndarray`` objects restricted to the dtypes the
file format can encode.  Forward/backward kernels work in whatever float
dtype they are given, so the float64 gradient checks run exactly the same
code as float32 training.
"""
import struct

import numpy as np

from . import kernels

MAGIC = b"CSGT"
VERSION = 1

DTYPE_CODES = {
    np.dtype(np.float32): 0,
    np.dtype(np.float64): 1,
    np.dtype(np.uint8): 2,
    np.dtype(np.int32): 3,
    np.dtype(np.int64): 4,
}
CODE_DTYPES = {code: dt for dt, code in DTYPE_CODES.items()}


class TensorFormatError(ValueError):
    """Base class for malformed tensor files."""


class BadMagicError(TensorFormatError):
    pass


class VersionMismatchError(TensorFormatError):
    pass


class TruncatedPayloadError(TensorFormatError):
    pass


class ShapeError(ValueError):
    pass


# ---------------------------------------------------------------------------
# serialization


def tensor_to_bytes(t):
    t = np.asarray(t)
    if t.dtype not in DTYPE_CODES:
        raise TypeError(f"unsupported dtype {t.dtype}")
    if t.ndim > 255:
        raise ShapeError("too many dimensions")
    if any(e < 1 for e in t.shape):
        raise ShapeError(f"extents must be >= 1, got {t.shape}")
    header = MAGIC + struct.pack("<BBBx", VERSION, DTYPE_CODES[t.dtype], t.ndim)
    header += struct.pack(f"<{t.ndim}Q", *t.shape)
    payload = np.ascontiguousarray(t, dtype=t.dtype.newbyteorder("<")).tobytes()
    return header + payload


def tensor_from_bytes(buf, offset=0):
    """Decode one tensor starting at ``offset``; return ``(tensor, end_offset)``."""
    buf = memoryview(buf)
    if len(buf) - offset < 8:
        raise TruncatedPayloadError("truncated header")
    if bytes(buf[offset:offset + 4]) != MAGIC:
        raise BadMagicError(f"bad magic {bytes(buf[offset:offset + 4])!r}")
    version, code, ndim = struct.unpack_from("<BBBx", buf, offset + 4)
    if version != VERSION:
        raise VersionMismatchError(f"tensor file version {version}, expected {VERSION}")
    if code not in CODE_DTYPES:
        raise TensorFormatError(f"unknown dtype code {code}")
    pos = offset + 8
    if len(buf) - pos < 8 * ndim:
        raise TruncatedPayloadError("truncated extents")
    shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
    pos += 8 * ndim
    dtype = CODE_DTYPES[code]
    count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
    nbytes = count * dtype.itemsize
    if len(buf) - pos < nbytes:
        raise TruncatedPayloadError(f"payload has {len(buf) - pos} bytes, expected {nbytes}")
    data = np.frombuffer(buf[pos:pos + nbytes], dtype=dtype.newbyteorder("<"))
    return data.astype(dtype).reshape(shape), pos + nbytes


def save_tensor(t, path):
    with open(path, "wb") as f:
        f.write(tensor_to_bytes(t))


def load_tensor(path):
    with open(path, "rb") as f:
        buf = f.read()
    t, end = tensor_from_bytes(buf)
    if end != len(buf):
        raise TensorFormatError(f"{len(buf) - end} trailing bytes")
    return t


# ---------------------------------------------------------------------------
# convolution


def _pads(pad):
    if isinstance(pad, (tuple, list)):
        lo, hi = pad
        return int(lo), int(hi)
    return int(pad), int(pad)


def conv_output_size(size, k, stride, pad):
    lo, hi = _pads(pad)
    span = size + lo + hi - k
    if span < 0 or span % stride:
        raise ShapeError(
            f"non-integral output extent: ({size}+{lo}+{hi}-{k})/{stride} + 1"
        )
    return span // stride + 1


def _check_conv(x, w, stride):
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"expected 4-d input and weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"input has {x.shape[1]} channels, weight expects {w.shape[1]}")
    if w.shape[2] % 2 == 0 or w.shape[3] % 2 == 0:
        raise ShapeError(f"kernel extents must be odd, got {w.shape[2:]}")
    if stride < 1:
        raise ShapeError("stride must be >= 1")


def conv2d_forward(x, w, b, stride=1, pad=0):
    """Cross-correlation of ``x`` [N,Cin,H,W] with ``w`` [Cout,Cin,kh,kw].

    ``pad`` is either an int (same on every side) or a ``(lo, hi)`` pair
    applied to both spatial axes.
    """
    _check_conv(x, w, stride)
    cout, cin, kh, kw = w.shape
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"bias shape {b.shape} != ({cout},)")
    n, _, h, wd = x.shape
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(wd, kw, stride, pad)
    lo, hi = _pads(pad)
    cols = kernels.im2col(np.ascontiguousarray(x), kh, kw, stride, lo, hi)
    out = np.matmul(w.reshape(cout, cin * kh * kw), cols)
    if b is not None:
        out += b[None, :, None]
    return out.reshape(n, cout, ho, wo)


def conv2d_backward(x, w, grad_out, stride=1, pad=0):
    """Gradients of ``sum(grad_out * conv2d_forward(x, w, b))``.

    Returns ``(grad_x, grad_w, grad_b)``.
    """
    _check_conv(x, w, stride)
    cout, cin, kh, kw = w.shape
    n, _, h, wd = x.shape
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(wd, kw, stride, pad)
    if grad_out.shape != (n, cout, ho, wo):
        raise ShapeError(f"grad_out shape {grad_out.shape} != {(n, cout, ho, wo)}")
    lo, hi = _pads(pad)
    g = np.ascontiguousarray(grad_out).reshape(n, cout, ho * wo)
    cols = kernels.im2col(np.ascontiguousarray(x), kh, kw, stride, lo, hi)
    grad_w = np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    grad_b = g.sum(axis=(0, 2))
    dcols = np.matmul(w.reshape(cout, cin * kh * kw).T, g)
    grad_x = kernels.col2im(np.ascontiguousarray(dcols), x.shape, kh, kw, stride, lo, hi)
    return grad_x, grad_w.astype(w.dtype, copy=False), grad_b


# ---------------------------------------------------------------------------
# elementwise / resampling


def relu(x):
    return np.maximum(x, 0)


def relu_backward(x, grad_out):
    return grad_out * (x > 0)


def upsample_nearest(x, factor=2):
    return x.repeat(factor, axis=2).repeat(factor, axis=3)


def upsample_nearest_backward(grad_out, factor=2):
    n, c, h, w = grad_out.shape
    return grad_out.reshape(n, c, h // factor, factor, w // factor, factor).sum(axis=(3, 5))


def softmax_channels(x):
    """Softmax over axis 1 of an [N,K,H,W] tensor, max-subtracted."""
    if x.ndim != 4 or x.shape[1] < 2:
        raise ShapeError(f"expected [N,K,H,W] with K >= 2, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("softmax input contains non-finite values")
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax_channels_backward(p, grad_p):
    """Pull a gradient w.r.t. probabilities back to the logits."""
    return p * (grad_p - (p * grad_p).sum(axis=1, keepdims=True))
