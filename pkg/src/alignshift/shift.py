"""Depth shift operators: discrete TSM shift and thickness-aware AlignShift.

Both operators act in place on arrays shaped ``(..., C, D, H, W)``. Channels
``[0, C+)`` shift up (slice ``d`` receives slice ``d + 1``), channels
``[C+, C+ + C-)`` shift down, the rest are left alone. Missing border slices
are zeros.

AlignShift moves by a fractional step ``alpha = r / s`` slices, producing
"virtual slices" by linear interpolation between a slice and its neighbour,
so the shift is always ``r`` millimeters regardless of the acquisition
spacing ``s``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import ThicknessMeta, as_array


class ShiftConfigError(ValueError):
    pass


class AlignFactorError(ValueError):
    pass


@dataclass(frozen=True)
class ShiftConfig:
    shift_up: int
    shift_down: int
    reference_mm: float = 2.0

    def __post_init__(self):
        if int(self.shift_up) != self.shift_up or self.shift_up < 0:
            raise ShiftConfigError(f"shift_up must be a non-negative integer, got {self.shift_up!r}")
        if int(self.shift_down) != self.shift_down or self.shift_down < 0:
            raise ShiftConfigError(f"shift_down must be a non-negative integer, got {self.shift_down!r}")
        r = float(self.reference_mm)
        if not math.isfinite(r) or r <= 0:
            raise ShiftConfigError(f"reference_mm must be positive, got {self.reference_mm!r}")
        object.__setattr__(self, "shift_up", int(self.shift_up))
        object.__setattr__(self, "shift_down", int(self.shift_down))
        object.__setattr__(self, "reference_mm", r)

    @classmethod
    def for_channels(cls, channels, reference_mm=2.0):
        """Default partition: ceil(C/8) channels each way."""
        fold = math.ceil(channels / 8)
        cfg = cls(fold, fold, reference_mm)
        cfg.check(channels)
        return cfg

    def check(self, channels):
        if self.shift_up + self.shift_down >= channels:
            raise ShiftConfigError(
                f"shift_up + shift_down must be < C: {self.shift_up} + {self.shift_down} >= {channels}")


def align_factor(spacing, reference_mm):
    """``alpha = r / s``; thinner-than-reference inputs are rejected."""
    s = spacing.spacing_mm if isinstance(spacing, ThicknessMeta) else float(spacing)
    r = float(reference_mm)
    if not (s > 0 and r > 0):
        raise AlignFactorError(f"spacing and reference must be positive, got s={s}, r={r}")
    if s < r:
        raise AlignFactorError(
            f"spacing {s} mm is thinner than the reference {r} mm; resample to the reference first")
    return r / s


def _blocks(x, cfg):
    arr = as_array(x)
    if arr.ndim < 4:
        raise ValueError(f"expected (..., C, D, H, W), got shape {arr.shape}")
    cfg.check(arr.shape[-4])
    up = arr[..., :cfg.shift_up, :, :, :]
    down = arr[..., cfg.shift_up:cfg.shift_up + cfg.shift_down, :, :, :]
    return up, down


def _pull_next(block, alpha):
    # block[d] <- alpha * block[d + 1] + (1 - alpha) * block[d], block[D] = 0
    if block.shape[-4] == 0:
        return
    nxt = np.zeros_like(block)
    nxt[..., :-1, :, :] = block[..., 1:, :, :]
    if alpha == 1.0:
        block[...] = nxt
    else:
        block[...] = alpha * nxt + (1.0 - alpha) * block


def _pull_prev(block, alpha):
    # block[d] <- alpha * block[d - 1] + (1 - alpha) * block[d], block[-1] = 0
    if block.shape[-4] == 0:
        return
    prev = np.zeros_like(block)
    prev[..., 1:, :, :] = block[..., :-1, :, :]
    if alpha == 1.0:
        block[...] = prev
    else:
        block[...] = alpha * prev + (1.0 - alpha) * block


def tsm_shift(x, cfg):
    up, down = _blocks(x, cfg)
    _pull_next(up, 1.0)
    _pull_prev(down, 1.0)
    return x


def tsm_shift_adjoint(g, cfg):
    up, down = _blocks(g, cfg)
    _pull_prev(up, 1.0)
    _pull_next(down, 1.0)
    return g


def align_shift(x, spacing, cfg):
    """In-place AlignShift with zero padding.

    >>> import numpy as np
    >>> v = np.array([1., 2., 3., 4., 5., 6., 7., 8., 9.]).reshape(3, 3, 1, 1)
    >>> align_shift(v, ThicknessMeta(4.0), ShiftConfig(1, 1, 2.0))[:, :, 0, 0].tolist()
    [[1.5, 2.5, 1.5], [2.0, 4.5, 5.5], [7.0, 8.0, 9.0]]
    """
    alpha = align_factor(spacing, cfg.reference_mm)
    up, down = _blocks(x, cfg)
    _pull_next(up, alpha)
    _pull_prev(down, alpha)
    return x


def align_shift_adjoint(g, spacing, cfg):
    """Exact transpose of :func:`align_shift` (up and down swap roles)."""
    alpha = align_factor(spacing, cfg.reference_mm)
    up, down = _blocks(g, cfg)
    _pull_prev(up, alpha)
    _pull_next(down, alpha)
    return g
