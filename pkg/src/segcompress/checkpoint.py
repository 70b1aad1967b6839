"""Named tensor collections and their binary container format.

Layout (little-endian)::

    "CSGC" | version u8 | entry count u32 | entries...

    entry := name_len u16 | name utf-8 | flag u8 | body
      flag 0 (float):     TensorFile blob
      flag 1 (quantized): scale f32 | zero_point i32 | TensorFile blob (uint8)
      flag 2 (sparse):    count u64 | count x (index u32, value f32) | ndim u8 | ndim x extent u64
"""
import struct
from dataclasses import dataclass

import numpy as np

from .quant import QuantizedTensor, QuantParams, dequantize
from .tensor import TensorFormatError, TruncatedPayloadError, tensor_from_bytes, tensor_to_bytes

MAGIC = b"CSGC"
VERSION = 1
FLAG_FLOAT, FLAG_QUANT, FLAG_SPARSE = 0, 1, 2
QUANT_META_BYTES = 8


class CheckpointFormatError(TensorFormatError):
    pass


@dataclass
class Entry:
    kind: str
    array: np.ndarray | None = None
    qt: QuantizedTensor | None = None
    indices: np.ndarray | None = None
    values: np.ndarray | None = None
    shape: tuple = ()

    @classmethod
    def dense(cls, array):
        return cls("float", array=np.asarray(array), shape=tuple(np.shape(array)))

    @classmethod
    def quantized(cls, qt):
        return cls("quantized", qt=qt, shape=tuple(qt.payload.shape))

    @classmethod
    def sparse(cls, array):
        array = np.asarray(array, dtype=np.float32)
        flat = array.reshape(-1)
        if flat.size > 2**32:
            raise ValueError("tensor too large for u32 sparse indices")
        idx = np.flatnonzero(flat).astype(np.uint32)
        return cls("sparse", indices=idx, values=flat[idx].copy(), shape=array.shape)

    @property
    def numel(self):
        return int(np.prod(self.shape, dtype=np.int64))

    def to_float(self, dtype=np.float32):
        if self.kind == "float":
            return self.array.astype(dtype, copy=False)
        if self.kind == "quantized":
            return dequantize(self.qt, dtype)
        out = np.zeros(self.numel, dtype=dtype)
        out[self.indices] = self.values
        return out.reshape(self.shape)

    def nbytes_accounted(self):
        """Bytes charged to this entry by the size model."""
        if self.kind == "float":
            return 4 * self.numel
        if self.kind == "quantized":
            return self.numel + QUANT_META_BYTES
        return 8 * len(self.indices)


class Checkpoint(dict):
    """Ordered mapping ``name -> Entry``."""

    @classmethod
    def from_arrays(cls, arrays):
        return cls((name, Entry.dense(a)) for name, a in arrays.items())

    def to_arrays(self, dtype=np.float32):
        return {name: e.to_float(dtype) for name, e in self.items()}

    def count_params(self):
        return sum(e.numel for e in self.values())

    def size_bytes(self):
        return sum(e.nbytes_accounted() for e in self.values())

    def size_mb(self):
        return self.size_bytes() / 1e6

    # -- serialization -----------------------------------------------------

    def to_bytes(self):
        parts = [MAGIC, struct.pack("<BI", VERSION, len(self))]
        for name, e in self.items():
            raw = name.encode("utf-8")
            if len(raw) > 0xFFFF:
                raise ValueError(f"entry name too long: {name[:40]}...")
            parts.append(struct.pack("<H", len(raw)) + raw)
            if e.kind == "float":
                parts.append(struct.pack("<B", FLAG_FLOAT) + tensor_to_bytes(e.array))
            elif e.kind == "quantized":
                p = e.qt.params
                parts.append(struct.pack("<Bfi", FLAG_QUANT, p.scale, p.zero_point))
                parts.append(tensor_to_bytes(e.qt.payload.astype(np.uint8)))
            else:
                pairs = np.empty(len(e.indices), dtype=[("i", "<u4"), ("v", "<f4")])
                pairs["i"] = e.indices
                pairs["v"] = e.values
                parts.append(struct.pack("<BQ", FLAG_SPARSE, len(e.indices)) + pairs.tobytes())
                parts.append(struct.pack("<B", len(e.shape)) + struct.pack(f"<{len(e.shape)}Q", *e.shape))
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf):
        buf = memoryview(buf)
        if bytes(buf[:4]) != MAGIC:
            raise CheckpointFormatError(f"bad checkpoint magic {bytes(buf[:4])!r}")
        try:
            version, count = struct.unpack_from("<BI", buf, 4)
            if version != VERSION:
                raise CheckpointFormatError(f"checkpoint version {version}, expected {VERSION}")
            pos = 9
            ckpt = cls()
            for _ in range(count):
                (n,) = struct.unpack_from("<H", buf, pos)
                name = bytes(buf[pos + 2:pos + 2 + n]).decode("utf-8")
                pos += 2 + n
                if name in ckpt:
                    raise CheckpointFormatError(f"duplicate entry {name!r}")
                (flag,) = struct.unpack_from("<B", buf, pos)
                pos += 1
                if flag == FLAG_FLOAT:
                    arr, pos = tensor_from_bytes(buf, pos)
                    ckpt[name] = Entry.dense(arr)
                elif flag == FLAG_QUANT:
                    scale, zp = struct.unpack_from("<fi", buf, pos)
                    payload, pos = tensor_from_bytes(buf, pos + 8)
                    if payload.dtype != np.uint8:
                        raise CheckpointFormatError(f"quantized entry {name!r} has {payload.dtype} payload")
                    ckpt[name] = Entry.quantized(QuantizedTensor(payload, QuantParams(scale, zp)))
                elif flag == FLAG_SPARSE:
                    (nnz,) = struct.unpack_from("<Q", buf, pos)
                    pos += 8
                    if len(buf) - pos < 8 * nnz:
                        raise TruncatedPayloadError("truncated sparse pairs")
                    pairs = np.frombuffer(buf[pos:pos + 8 * nnz], dtype=[("i", "<u4"), ("v", "<f4")])
                    pos += 8 * nnz
                    (ndim,) = struct.unpack_from("<B", buf, pos)
                    shape = struct.unpack_from(f"<{ndim}Q", buf, pos + 1)
                    pos += 1 + 8 * ndim
                    ckpt[name] = Entry(
                        "sparse",
                        indices=pairs["i"].astype(np.uint32),
                        values=pairs["v"].astype(np.float32),
                        shape=tuple(shape),
                    )
                else:
                    raise CheckpointFormatError(f"unknown entry flag {flag}")
        except struct.error as exc:
            raise TruncatedPayloadError(f"truncated checkpoint: {exc}") from None
        if pos != len(buf):
            raise CheckpointFormatError(f"{len(buf) - pos} trailing bytes")
        return ckpt

    def save(self, path):
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())


def count_params(ckpt):
    return ckpt.count_params()


def model_size_mb(ckpt):
    """Accounted size: 4 B per float element, N + 8 B per quantized entry."""
    return ckpt.size_mb()


def params_size_mb(n_params, bytes_per_param=4):
    return n_params * bytes_per_param / 1e6
