"""Synthetic anisotropy phantoms and a slice-averaging acquisition model.

A phantom is a finely sampled volume (0.5mm slices, 1mm pixels) holding two
kinds of bright ellipsoids that look identical on any single axial slice:

* lesions, short along depth (the positives), and
* vessel-like distractors, long along depth (the negatives).

Telling them apart needs depth context, which thick acquisitions blur.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from ..tensor import ThicknessMeta, Volume4D

FINE_MM = 0.5


class GenerationError(RuntimeError):
    pass


class AcquisitionError(ValueError):
    pass


@dataclass(frozen=True)
class Blob:
    """Ellipsoid; ``center_mm`` is physical depth from the centre of fine slice 0."""

    center_mm: float
    center_y: float
    center_x: float
    radius_mm: float  # in-plane radius (pixels are 1mm)
    depth_radius_mm: float
    amplitude: float
    key_index: int  # nearest fine slice


@dataclass
class Phantom:
    volume: Volume4D
    fine_mm: float
    lesions: list
    distractors: list = field(default_factory=list)
    seed: int = 0

    @property
    def depth_mm(self):
        return self.volume.depth * self.fine_mm


@dataclass(frozen=True)
class PhantomSettings:
    depth_mm: float = 96.0
    size: int = 24
    lesion_radius_mm: tuple = (2.0, 3.5)
    lesion_depth_mm: tuple = (1.5, 3.5)
    distractor_depth_mm: tuple = (10.0, 30.0)
    amplitude: tuple = (0.8, 1.2)
    n_distractors: int = 4
    # lesion centres keep this far from the top/bottom so every context window fits
    depth_margin_mm: float = 22.0
    # extra depth gap between lesions so no lesion shows on another's key slice
    lesion_gap_mm: float = 10.0
    background: float = 0.25
    noise_sigma: float = 0.6
    max_tries: int = 200
    max_restarts: int = 50


def _paint(vol, blob, fine_mm):
    D, H, W = vol.shape
    z = np.arange(D)[:, None, None] * fine_mm
    y = np.arange(H)[None, :, None]
    x = np.arange(W)[None, None, :]
    rho2 = (((z - blob.center_mm) / blob.depth_radius_mm) ** 2
            + ((y - blob.center_y) ** 2 + (x - blob.center_x) ** 2) / blob.radius_mm ** 2)
    vol += blob.amplitude * np.clip(1.0 - rho2, 0.0, None)


def _overlaps(a, b):
    plane = math.hypot(a.center_y - b.center_y, a.center_x - b.center_x)
    if plane > a.radius_mm + b.radius_mm + 1.0:
        return False
    return abs(a.center_mm - b.center_mm) <= a.depth_radius_mm + b.depth_radius_mm + 1.0


def generate_phantom(seed, size=None, n_blobs=2, settings=None):
    """Deterministic phantom from ``seed``; ``size`` overrides ``(depth_mm, pixels)``."""
    if n_blobs < 1:
        raise GenerationError("a phantom needs at least one lesion")
    st = settings or PhantomSettings()
    if size is not None:
        depth_mm, pixels = size
        st = PhantomSettings(**{**st.__dict__, "depth_mm": float(depth_mm), "size": int(pixels)})
    rng = np.random.default_rng(seed)
    nz = int(round(st.depth_mm / FINE_MM))
    n = st.size

    z_max = (nz - 1) * FINE_MM

    def random_blob(depth_range, z_lo, z_hi):
        r = rng.uniform(*st.lesion_radius_mm)
        rz = rng.uniform(*depth_range)
        # keep the whole ellipsoid inside the volume
        cz = rng.uniform(max(z_lo, rz), min(z_hi, z_max - rz))
        cy = rng.uniform(r + 1.0, n - 2.0 - r)
        cx = rng.uniform(r + 1.0, n - 2.0 - r)
        amp = rng.uniform(*st.amplitude)
        key = int(round(cz / FINE_MM))
        return Blob(cz, cy, cx, r, rz, amp, key)

    def place_lesions():
        placed = []
        for _ in range(n_blobs):
            for _ in range(st.max_tries):
                b = random_blob(st.lesion_depth_mm, st.depth_margin_mm, z_max - st.depth_margin_mm)
                separated = all(abs(b.center_mm - o.center_mm)
                                > b.depth_radius_mm + o.depth_radius_mm + st.lesion_gap_mm
                                for o in placed)
                if separated and not any(_overlaps(b, o) for o in placed):
                    placed.append(b)
                    break
            else:
                return None
        return placed

    # early lesions can leave no room for later ones; start over a few times
    for _ in range(st.max_restarts):
        lesions = place_lesions()
        if lesions is not None:
            break
    else:
        raise GenerationError(f"could not place {n_blobs} separated lesions")
    distractors = []
    for _ in range(st.n_distractors):
        for _ in range(st.max_tries):
            b = random_blob(st.distractor_depth_mm, 0.0, z_max)
            if not any(_overlaps(b, o) for o in lesions + distractors):
                distractors.append(b)
                break
        else:
            raise GenerationError("could not place distractors without overlap")

    vol = np.zeros((nz, n, n))
    # smooth anatomy-like background, drifting slowly along depth
    fields = [ndimage.gaussian_filter(rng.standard_normal((n, n)), 3.0, mode="wrap")
              for _ in range(2)]
    fields = [f / (np.abs(f).max() + 1e-12) for f in fields]
    t = np.linspace(0.0, 1.0, nz)[:, None, None]
    vol += st.background * ((1 - t) * fields[0] + t * fields[1])
    for b in lesions + distractors:
        _paint(vol, b, FINE_MM)
    vol += st.noise_sigma * rng.standard_normal(vol.shape)
    return Phantom(Volume4D(vol[np.newaxis]), FINE_MM, lesions, distractors, int(seed))


def slab_factor(slice_mm, fine_mm):
    k = slice_mm / fine_mm
    if slice_mm < fine_mm or abs(k - round(k)) > 1e-9:
        raise AcquisitionError(
            f"slice thickness {slice_mm} must be a whole multiple of the fine spacing {fine_mm}")
    return int(round(k))


def acquire(phantom, slice_mm):
    """Box-average consecutive fine slices into slabs of ``slice_mm``.

    Slab ``k`` averages fine slices ``[k*n, (k+1)*n)``; a ragged last slab
    averages whatever fine slices remain. Returns ``(Volume4D, ThicknessMeta)``.
    """
    n = slab_factor(slice_mm, phantom.fine_mm)
    fine = phantom.volume.data
    D = fine.shape[1]
    n_slabs = -(-D // n)
    out = np.empty(fine.shape[:1] + (n_slabs,) + fine.shape[2:])
    for k in range(n_slabs):
        out[:, k] = fine[:, k * n:(k + 1) * n].mean(axis=1)
    return Volume4D(out), ThicknessMeta(slice_mm)


def slab_center_mm(k, slice_mm, fine_mm=FINE_MM):
    """Physical depth of acquired slab ``k`` (full slabs only)."""
    n = slab_factor(slice_mm, fine_mm)
    return (k * n + (n - 1) / 2.0) * fine_mm
