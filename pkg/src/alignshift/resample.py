"""Depth-axis spatial normalization and the thin/thick routing rule."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .tensor import ThicknessMeta, Volume4D, as_array

# positions this close to a grid index are snapped onto it, so commensurate
# grids (4mm -> 2mm, 5mm -> 2.5mm) hit input slices exactly
_SNAP = 1e-9


class ResampleError(ValueError):
    pass


class Action(enum.Enum):
    NORMALIZE = "normalize"
    KEEP_ORIGINAL = "keep_original"


@dataclass(frozen=True)
class ThicknessPolicyDecision:
    action: Action
    target_mm: Optional[float] = None

    @property
    def is_thin(self):
        return self.action is Action.NORMALIZE


def _spacing(s):
    return s.spacing_mm if isinstance(s, ThicknessMeta) else float(s)


def thickness_policy(spacing, reference_mm=2.0):
    """Thin volumes (s <= r) are resampled to r, thick ones keep their spacing."""
    s, r = _spacing(spacing), float(reference_mm)
    if not (s > 0 and r > 0) or not (math.isfinite(s) and math.isfinite(r)):
        raise ValueError(f"thickness and reference must be positive, got s={s}, r={r}")
    if s <= r:
        return ThicknessPolicyDecision(Action.NORMALIZE, r)
    return ThicknessPolicyDecision(Action.KEEP_ORIGINAL)


def output_depth(depth, spacing_mm, target_mm):
    # round half up; Python's round() would send 2.5 -> 2
    return int(math.floor((depth - 1) * spacing_mm / target_mm + 0.5)) + 1


def sample_positions(depth, spacing_mm, target_mm):
    """Continuous input-slice coordinates of every output slice."""
    n = output_depth(depth, spacing_mm, target_mm)
    pos = np.arange(n) * (target_mm / spacing_mm)
    nearest = np.round(pos)
    pos = np.where(np.abs(pos - nearest) < _SNAP, nearest, pos)
    return np.clip(pos, 0.0, depth - 1)


def resample_depth(v, spacing, target_mm):
    """Linearly interpolate a volume along depth onto a ``target_mm`` grid.

    The output grid starts at input slice 0 and has
    ``round((D - 1) * s / target) + 1`` slices. Returns ``(Volume4D, ThicknessMeta)``.
    """
    arr = as_array(v)
    s, t = _spacing(spacing), float(target_mm)
    if not (s > 0 and t > 0):
        raise ResampleError(f"spacing and target must be positive, got s={s}, target={t}")
    D = arr.shape[-3]
    if t == s:
        return Volume4D(arr.copy()), ThicknessMeta(t)
    if D < 2:
        raise ResampleError("cannot interpolate a single-slice volume to a new spacing")

    pos = sample_positions(D, s, t)
    lo = np.minimum(np.floor(pos).astype(np.int64), D - 2)
    frac = pos - lo
    a = arr[..., lo, :, :]
    b = arr[..., lo + 1, :, :]
    w = frac[:, None, None]
    out = (1.0 - w) * a + w * b
    # exact hits keep the input value bit-for-bit
    on_grid = frac == 0.0
    out[..., on_grid, :, :] = a[..., on_grid, :, :]
    at_end = frac == 1.0
    out[..., at_end, :, :] = b[..., at_end, :, :]
    return Volume4D(out), ThicknessMeta(t)


def normalize_for_policy(v, spacing, reference_mm=2.0):
    """Apply :func:`thickness_policy`: resample thin volumes, pass thick ones through."""
    decision = thickness_policy(spacing, reference_mm)
    if decision.is_thin:
        return resample_depth(v, spacing, decision.target_mm)
    s = spacing if isinstance(spacing, ThicknessMeta) else ThicknessMeta(spacing)
    return Volume4D(as_array(v).copy()), s
