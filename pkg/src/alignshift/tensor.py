"""Dense (C, D, H, W) float64 volumes, thickness metadata and the V4D file format."""

from __future__ import annotations

import os
import sys
from dataclasses import dataclass

import numpy as np

_MAX_ELEMENTS = 2**40


class DimensionError(ValueError):
    pass


class VolumeFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ThicknessMeta:
    """Physical spacing between adjacent depth slices, in millimeters."""

    spacing_mm: float

    def __post_init__(self):
        s = float(self.spacing_mm)
        if not np.isfinite(s) or s <= 0:
            raise ValueError(f"spacing must be positive and finite, got {self.spacing_mm!r}")
        object.__setattr__(self, "spacing_mm", s)


class Volume4D:
    """Row-major (C, D, H, W) volume of 64-bit floats.

    ``data`` is a plain C-contiguous ndarray; every operator in the library
    accepts either a ``Volume4D`` or such an array.
    """

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if arr.ndim != 4:
            raise DimensionError(f"expected a rank-4 array, got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise DimensionError(f"all dimensions must be >= 1, got {arr.shape}")
        self.data = arr

    @property
    def shape(self):
        return self.data.shape

    @property
    def channels(self):
        return self.data.shape[0]

    @property
    def depth(self):
        return self.data.shape[1]

    @property
    def height(self):
        return self.data.shape[2]

    @property
    def width(self):
        return self.data.shape[3]

    def flat_index(self, c, d, h, w):
        _, D, H, W = self.data.shape
        return ((c * D + d) * H + h) * W + w

    def __getitem__(self, idx):
        return self.data[idx]

    def __setitem__(self, idx, value):
        self.data[idx] = value

    def copy(self):
        return Volume4D(self.data.copy())

    def __eq__(self, other):
        if not isinstance(other, Volume4D):
            return NotImplemented
        return self.data.shape == other.data.shape and np.array_equal(self.data, other.data)

    def __repr__(self):
        return f"Volume4D(shape={self.data.shape})"


def as_array(x):
    """Return the backing ndarray of a volume (no copy)."""
    if isinstance(x, Volume4D):
        return x.data
    if not isinstance(x, np.ndarray):
        raise TypeError(f"expected Volume4D or ndarray, got {type(x).__name__}")
    return x


def new_volume(C, D, H, W, fill=0.0):
    dims = (C, D, H, W)
    for n in dims:
        if int(n) != n or n < 1:
            raise DimensionError(f"dimensions must be positive integers, got {dims}")
    total = 1
    for n in dims:
        total *= int(n)
    if total > _MAX_ELEMENTS:
        raise DimensionError(f"volume of {total} elements is too large")
    return Volume4D(np.full(tuple(int(n) for n in dims), float(fill)))


def slice_depth(v, d):
    """Axial slice ``d`` as a (C, H, W) view."""
    arr = as_array(v)
    D = arr.shape[-3]
    if not 0 <= d < D:
        raise IndexError(f"depth index {d} out of range [0, {D})")
    return arr[..., d, :, :]


def sum_channel_slice(v, c, d):
    arr = as_array(v)
    C, D = arr.shape[-4], arr.shape[-3]
    if not 0 <= c < C:
        raise IndexError(f"channel index {c} out of range [0, {C})")
    if not 0 <= d < D:
        raise IndexError(f"depth index {d} out of range [0, {D})")
    return float(arr[..., c, d, :, :].sum())


def write_v4d(path, v, spacing):
    """Write ``V4D <C> <D> <H> <W> <spacing_mm>\\n`` then little-endian float64 payload."""
    arr = as_array(v)
    if arr.ndim != 4:
        raise DimensionError(f"expected a rank-4 volume, got shape {arr.shape}")
    if isinstance(spacing, ThicknessMeta):
        spacing = spacing.spacing_mm
    spacing = ThicknessMeta(spacing).spacing_mm
    header = "V4D {} {} {} {} {}\n".format(*arr.shape, repr(spacing))
    payload = np.ascontiguousarray(arr, dtype="<f8").tobytes()
    with open(os.fspath(path), "wb") as fh:
        fh.write(header.encode("utf-8"))
        fh.write(payload)


def read_v4d(path):
    """Read a V4D file, returning ``(Volume4D, ThicknessMeta)``."""
    with open(os.fspath(path), "rb") as fh:
        raw = fh.read()
    nl = raw.find(b"\n")
    if nl < 0:
        raise VolumeFormatError("missing header line")
    parts = raw[:nl].decode("utf-8").split()
    if len(parts) != 6 or parts[0] != "V4D":
        raise VolumeFormatError(f"malformed header: {raw[:nl]!r}")
    try:
        dims = tuple(int(p) for p in parts[1:5])
        spacing = ThicknessMeta(float(parts[5]))
    except ValueError as exc:
        raise VolumeFormatError(f"malformed header: {raw[:nl]!r}") from exc
    if min(dims) < 1:
        raise VolumeFormatError(f"non-positive dimension in header: {dims}")
    payload = raw[nl + 1:]
    expected = int(np.prod(dims, dtype=np.int64)) * 8
    if len(payload) != expected:
        raise VolumeFormatError(
            f"payload is {len(payload)} bytes, header implies {expected}")
    arr = np.frombuffer(payload, dtype="<f8").reshape(dims)
    if sys.byteorder != "little":
        arr = arr.astype(np.float64)
    return Volume4D(arr.copy()), spacing
