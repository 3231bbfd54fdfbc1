"""Dense array primitives.

Tensors are plain ``numpy.ndarray`` objects (row-major, float32 or float64).
Activations are laid out N x C x H x W, filter banks K x C x H x W. This module
adds the few operations the layers need on top of numpy: a fixed-order matrix
product, patch unrolling with stride and dilation, and explicit zero padding.
"""

import os
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import DimensionError, DTypeError

DTYPES = (np.float32, np.float64)


def _threads_from_env():
    raw = os.environ.get("EPINET_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        n = 1
    return _kernels.set_threads(max(1, n))


_threads_from_env()


def check_dtype(*arrays):
    """Raise DTypeError unless all arrays share one supported float dtype."""
    dt = arrays[0].dtype
    if dt.type not in DTYPES:
        raise DTypeError(f"unsupported dtype {dt}", module="tensor")
    for a in arrays[1:]:
        if a.dtype != dt:
            raise DTypeError(f"dtype mismatch: {dt} vs {a.dtype}", module="tensor")
    return dt


def matmul(a, b):
    """Matrix product with a fixed summation order.

    Each output entry is accumulated left to right over the shared axis, which
    is exactly what a naive triple loop does, so results are bit-identical to
    that loop and across runs.
    """
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}",
                             module="tensor")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}", module="tensor")
    dt = check_dtype(a, b)
    out = np.empty((a.shape[0], b.shape[1]), dtype=dt)
    if out.size:
        _kernels.matmul_kernel(np.ascontiguousarray(a), np.ascontiguousarray(b), out)
    return out


def effective_window(window, dilation=1):
    return (window - 1) * dilation + 1


def output_extent(size, window, stride=1, dilation=1):
    span = effective_window(window, dilation)
    if span > size:
        return 0
    return (size - span) // stride + 1


def _hw(window):
    if isinstance(window, (tuple, list)):
        return int(window[0]), int(window[1])
    return int(window), int(window)


@dataclass
class PatchMatrix:
    """Unrolled patches of one C x H x W input.

    ``rows`` has one row per sampling position, each of length W*W*C in
    channel-major order; ``origins[r]`` is the (y, x) top-left input coordinate
    of row r.
    """

    rows: np.ndarray
    origins: list
    window: int
    stride: int = 1
    dilation: int = 1
    grid: tuple = field(default=(0, 0))

    @property
    def cols(self):
        return self.rows.shape[1]


def im2col(x, window, stride=1, dilation=1):
    """Unroll an N x C x H x W batch into (N*Ho*Wo) x (C*kh*kw) rows.

    ``window`` is an int or a (kh, kw) pair. Rows run over (n, oy, ox), columns
    over (c, dy, dx). Only windows that fit entirely inside the input are
    produced.
    """
    kh, kw = _hw(window)
    if min(kh, kw) < 1 or stride < 1 or dilation < 1:
        raise DimensionError(
            f"window/stride/dilation must be >= 1, got {window}/{stride}/{dilation}",
            module="tensor")
    n, c, h, w = x.shape
    ho = output_extent(h, kh, stride, dilation)
    wo = output_extent(w, kw, stride, dilation)
    if ho == 0 or wo == 0:
        raise DimensionError(
            f"effective window {effective_window(kh, dilation)}x{effective_window(kw, dilation)}"
            f" exceeds input {h}x{w}", module="tensor", code="empty")
    span = (effective_window(kh, dilation), effective_window(kw, dilation))
    views = np.lib.stride_tricks.sliding_window_view(x, span, axis=(2, 3))
    views = views[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride,
                  ::dilation, ::dilation]
    cols = views.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return np.ascontiguousarray(cols), (ho, wo)


def col2im(cols, shape, window, stride=1, dilation=1):
    """Scatter-add unrolled rows back into an N x C x H x W array (adjoint of im2col)."""
    kh, kw = _hw(window)
    n, c, h, w = shape
    ho = output_extent(h, kh, stride, dilation)
    wo = output_extent(w, kw, stride, dilation)
    out = np.zeros(shape, dtype=cols.dtype)
    blocks = cols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    for dy in range(kh):
        y0 = dy * dilation
        ys = slice(y0, y0 + (ho - 1) * stride + 1, stride)
        for dx in range(kw):
            x0 = dx * dilation
            xs = slice(x0, x0 + (wo - 1) * stride + 1, stride)
            out[:, :, ys, xs] += blocks[:, :, dy, dx]
    return out


def unroll_patches(x, window, stride=1, dilation=1):
    """Unroll a single C x H x W input into a PatchMatrix."""
    if x.ndim != 3:
        raise DimensionError(f"unroll_patches expects C x H x W, got shape {x.shape}",
                             module="tensor")
    rows, (ho, wo) = im2col(x[None], window, stride, dilation)
    origins = [(oy * stride, ox * stride) for oy in range(ho) for ox in range(wo)]
    return PatchMatrix(rows, origins, window, stride, dilation, (ho, wo))


def zero_pad(x, pad):
    """Pad the two trailing (spatial) axes with ``pad`` zeros per side."""
    if pad < 0:
        raise DimensionError(f"pad must be >= 0, got {pad}", module="tensor")
    if pad == 0:
        return x.copy()
    widths = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (pad, pad)]
    return np.pad(x, widths, mode="constant")
