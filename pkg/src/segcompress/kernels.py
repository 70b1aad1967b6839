"""Backend selection for the hot kernels.

The compiled extension is preferred; the numpy implementation is used when
it is missing or when ``SEGCOMPRESS_PURE_PYTHON`` is set to a non-empty
value other than ``0``.
"""
import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("SEGCOMPRESS_PURE_PYTHON", "0") in ("", "0"):
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py

im2col = _impl.im2col
col2im = _impl.col2im
int_matmul_u8 = _impl.int_matmul_u8

__all__ = ["BACKEND", "im2col", "col2im", "int_matmul_u8"]
