"""Channel-axis upsampling of modulation grids, with its exact adjoint.

Upsampling along one axis is a sparse linear map: each destination index reads
a fixed set of source taps with fixed weights. The forward pass gathers and
accumulates taps in a fixed order, the adjoint scatter-adds with the same
weights, so ``<up(x), y> == <x, up_T(y)>`` holds to roundoff.

Coordinate conventions (scale = S / D):

* nearest:        src index = min(S-1, floor(d * scale))
* nearest_exact:  src index = min(S-1, floor((d + 0.5) * scale))
* bicubic:        x = (d + 0.5) * scale - 0.5, cubic convolution with
                  a = -0.75 over floor(x)-1 .. floor(x)+2, indices clamped.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .autodiff import Tensor
from .errors import InterpError, ShapeError

BICUBIC_A = -0.75


class InterpMethod(str, enum.Enum):
    NEAREST = "nearest"
    NEAREST_EXACT = "nearest_exact"
    BICUBIC = "bicubic"

    @classmethod
    def parse(cls, value: "str | InterpMethod") -> "InterpMethod":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower().replace("-", "_"))
        except ValueError:
            names = ", ".join(m.value for m in cls)
            raise InterpError(f"unknown interpolation method {value!r}; expected one of {names}") from None


def cubic_kernel(x: float, a: float = BICUBIC_A) -> float:
    x = abs(x)
    if x <= 1.0:
        return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    if x < 2.0:
        return ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    return 0.0


@lru_cache(maxsize=512)
def _taps(src: int, dst: int, method: InterpMethod, dtype: str) -> tuple[np.ndarray, np.ndarray]:
    """Index and weight tables of shape (dst, n_taps)."""
    scale = src / dst
    d = np.arange(dst)
    if method is InterpMethod.NEAREST:
        idx = np.minimum(src - 1, np.floor(d * scale).astype(np.int64))[:, None]
        return idx, np.ones((dst, 1), dtype=dtype)
    if method is InterpMethod.NEAREST_EXACT:
        idx = np.minimum(src - 1, np.floor((d + 0.5) * scale).astype(np.int64))[:, None]
        return idx, np.ones((dst, 1), dtype=dtype)

    idx = np.empty((dst, 4), dtype=np.int64)
    w = np.empty((dst, 4), dtype=dtype)
    one = np.dtype(dtype).type(1)
    for i in range(dst):
        x = (i + 0.5) * scale - 0.5
        base = math.floor(x)
        t = x - base
        for k, off in enumerate((-1, 0, 1, 2)):
            idx[i, k] = min(max(base + off, 0), src - 1)
        w0, w1, w2 = (np.dtype(dtype).type(cubic_kernel(t - off)) for off in (-1, 0, 1))
        # last tap closes the partition of unity exactly: w0..w2 sum lies in
        # [1, 1.11], so 1 - s is exact and gather of a constant returns it bit-exactly
        w[i] = (w0, w1, w2, one - ((w0 + w1) + w2))
    idx.setflags(write=False)
    w.setflags(write=False)
    return idx, w


def _check_sizes(src: int, dst: int) -> None:
    if src < 1:
        raise InterpError(f"source length must be >= 1, got {src}")
    if dst < src:
        raise InterpError(f"downsampling {src} -> {dst} is not supported")


def upsample_axis(arr: np.ndarray, dst: int, method, axis: int = 0) -> np.ndarray:
    """Upsample ``arr`` along ``axis`` to length ``dst``."""
    method = InterpMethod.parse(method)
    src = arr.shape[axis]
    _check_sizes(src, dst)
    if src == dst:
        return arr.copy()
    idx, w = _taps(src, dst, method, arr.dtype.str)
    moved = np.moveaxis(arr, axis, 0)
    wshape = (dst,) + (1,) * (moved.ndim - 1)
    if idx.shape[1] == 1:
        out = moved[idx[:, 0]]
    else:
        out = moved[idx[:, 0]] * w[:, 0].reshape(wshape)
        for k in range(1, idx.shape[1]):
            out = out + moved[idx[:, k]] * w[:, k].reshape(wshape)
    return np.ascontiguousarray(np.moveaxis(out, 0, axis))


def upsample_axis_adjoint(cot: np.ndarray, src: int, method, axis: int = 0) -> np.ndarray:
    """Transpose of :func:`upsample_axis`: scatter-add cotangents onto the source."""
    method = InterpMethod.parse(method)
    dst = cot.shape[axis]
    _check_sizes(src, dst)
    if src == dst:
        return cot.copy()
    idx, w = _taps(src, dst, method, cot.dtype.str)
    moved = np.moveaxis(cot, axis, 0)
    out = np.zeros((src,) + moved.shape[1:], dtype=cot.dtype)
    wshape = (dst,) + (1,) * (moved.ndim - 1)
    for k in range(idx.shape[1]):
        np.add.at(out, idx[:, k], moved * w[:, k].reshape(wshape))
    return np.ascontiguousarray(np.moveaxis(out, 0, axis))


def upsample1d(src, dst: int, method) -> np.ndarray:
    arr = np.asarray(src)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    return upsample_axis(arr, dst, method)


def grid_dims(cout: int, cin_per_group: int, m1: int, m2: int) -> tuple[int, int]:
    """(g_out, g_in): ceil of each channel count over its factor, clamped to [1, dim]."""
    if m1 < 1 or m2 < 1:
        raise InterpError(f"modulation factors must be positive, got ({m1}, {m2})")
    g_out = min(cout, max(1, math.ceil(cout / m2)))
    g_in = min(cin_per_group, max(1, math.ceil(cin_per_group / m1)))
    return g_out, g_in


@dataclass
class ModGrid:
    """Low-resolution modulation values for one weight tensor.

    ``values`` has shape (g_out, g_in, *kernel) where kernel dims are kept at
    full resolution; a linear layer uses a 2-D grid.
    """

    values: np.ndarray | Tensor
    target_out: int
    target_in: int
    method: InterpMethod = InterpMethod.BICUBIC

    def __post_init__(self):
        self.method = InterpMethod.parse(self.method)
        g_out, g_in = self.values.shape[:2]
        if not (1 <= g_out <= self.target_out and 1 <= g_in <= self.target_in):
            raise ShapeError(
                f"grid {self.values.shape[:2]} incompatible with target ({self.target_out}, {self.target_in})"
            )

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.values.shape)

    @property
    def target_shape(self) -> tuple[int, ...]:
        return (self.target_out, self.target_in) + tuple(self.values.shape[2:])


def _up2(arr: np.ndarray, target_out: int, target_in: int, method) -> np.ndarray:
    # rows (out-channels) first, then columns (in-channels)
    return upsample_axis(upsample_axis(arr, target_out, method, axis=0), target_in, method, axis=1)


def _up2_adjoint(cot: np.ndarray, g_out: int, g_in: int, method) -> np.ndarray:
    return upsample_axis_adjoint(upsample_axis_adjoint(cot, g_in, method, axis=1), g_out, method, axis=0)


def upsample_mod(grid: ModGrid):
    """Expand a grid to its weight shape; differentiable when values is a Tensor."""
    vals = grid.values
    if isinstance(vals, Tensor):
        g_out, g_in = vals.shape[:2]
        out = _up2(vals.data, grid.target_out, grid.target_in, grid.method)
        return Tensor._make(out, (vals,), lambda g: (_up2_adjoint(g, g_out, g_in, grid.method),))
    return _up2(np.asarray(vals), grid.target_out, grid.target_in, grid.method)


def upsample_adjoint(cotangent: np.ndarray, grid_shape: tuple[int, ...], method) -> np.ndarray:
    """Transpose of :func:`upsample_mod` for a grid of shape ``grid_shape``."""
    cotangent = np.asarray(cotangent)
    if tuple(cotangent.shape[2:]) != tuple(grid_shape[2:]) or cotangent.ndim != len(grid_shape):
        raise ShapeError(f"cotangent {cotangent.shape} does not match grid {tuple(grid_shape)}")
    if cotangent.shape[0] < grid_shape[0] or cotangent.shape[1] < grid_shape[1]:
        raise ShapeError(f"cotangent {cotangent.shape} smaller than grid {tuple(grid_shape)}")
    return _up2_adjoint(cotangent, grid_shape[0], grid_shape[1], method)
