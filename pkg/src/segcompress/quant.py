"""Post-training affine (asymmetric, per-tensor) uint8 quantization."""
import fnmatch
from dataclasses import dataclass

import numpy as np

from . import kernels

QMIN, QMAX = 0, 255
MAX_INNER_DIM = 2**15


def round_half_away(x):
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int

    def __post_init__(self):
        s = float(np.float32(self.scale))
        object.__setattr__(self, "scale", s)
        if not (np.isfinite(s) and s > 0):
            raise ValueError(f"scale must be a positive finite float32, got {self.scale}")
        if not QMIN <= int(self.zero_point) <= QMAX:
            raise ValueError(f"zero_point {self.zero_point} outside [0, 255]")
        object.__setattr__(self, "zero_point", int(self.zero_point))


@dataclass
class QuantizedTensor:
    payload: np.ndarray
    params: QuantParams

    @property
    def shape(self):
        return self.payload.shape


def _float32_at_least(x):
    f = np.float32(x)
    if float(f) < x:
        f = np.nextafter(f, np.float32(np.inf))
    return float(f)


def calibrate_minmax(w):
    """Min-max calibration over a range widened to include zero.

    The float32 scale is rounded up so 255 steps always cover the range,
    which keeps every in-range value within half a step of the grid.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.size == 0:
        raise ValueError("cannot calibrate an empty tensor")
    if not np.all(np.isfinite(w)):
        raise ValueError("cannot calibrate non-finite values")
    lo = min(float(w.min()), 0.0)
    hi = max(float(w.max()), 0.0)
    if hi == lo:
        return QuantParams(1.0, 0)
    exact = (hi - lo) / (QMAX - QMIN)
    zp = int(np.clip(round_half_away(-lo / exact), QMIN, QMAX))
    return QuantParams(_float32_at_least(exact), zp)


def quantize(w, params):
    w = np.asarray(w, dtype=np.float64)
    q = round_half_away(w / params.scale) + params.zero_point
    return QuantizedTensor(np.clip(q, QMIN, QMAX).astype(np.uint8), params)


def dequantize(qt, dtype=np.float32):
    """``(q - zero_point) * scale``."""
    q = qt.payload.astype(np.float64) - qt.params.zero_point
    return (q * qt.params.scale).astype(dtype)


def quantized_matmul(a, b):
    """Integer-accumulated product of two quantized matrices, returned as float32."""
    if a.payload.ndim != 2 or b.payload.ndim != 2:
        raise ValueError("quantized_matmul expects 2-d operands")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    if a.shape[1] > MAX_INNER_DIM:
        raise OverflowError(f"inner dimension {a.shape[1]} risks int32 accumulator overflow")
    acc = kernels.int_matmul_u8(
        np.ascontiguousarray(a.payload), a.params.zero_point,
        np.ascontiguousarray(b.payload), b.params.zero_point,
    )
    return (acc.astype(np.float64) * (a.params.scale * b.params.scale)).astype(np.float32)


def matches_filter(name, layer_filter):
    return any(fnmatch.fnmatchcase(name, pat) for pat in layer_filter)


def ptq_checkpoint(ckpt, layer_filter=("*.weight",)):
    """Quantize every float entry whose name matches one of the glob patterns."""
    from .checkpoint import Checkpoint, Entry

    out = Checkpoint()
    for name, entry in ckpt.items():
        if matches_filter(name, layer_filter):
            if entry.kind != "float":
                raise ValueError(f"entry {name!r} is already {entry.kind}; refusing to re-quantize")
            params = calibrate_minmax(entry.array)
            out[name] = Entry.quantized(quantize(entry.array, params))
        else:
            out[name] = entry
    return out


def quant_size_mb(ckpt):
    return ckpt.size_mb()
