"""Synthetic phantoms so every pipeline stage runs without external data."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volume import LabelVolume, Mask3, Volume3


def smooth_blob_phantom(shape=(64, 64, 64), spacing=(1.0, 1.0, 1.0), n_blobs: int = 6,
                        seed: int = 0) -> Volume3:
    """Sum of anisotropic Gaussian blobs at random positions; asymmetric by construction."""
    rng = np.random.default_rng(seed)
    idx = np.indices(shape, dtype=float)
    n = np.array(shape, dtype=float)
    data = np.zeros(shape)
    for _ in range(n_blobs):
        c = rng.uniform(0.3, 0.7, 3) * (n - 1)
        s = rng.uniform(0.08, 0.16, 3) * n
        amp = rng.uniform(0.5, 1.0)
        r2 = sum(((idx[a] - c[a]) / s[a]) ** 2 for a in range(3))
        data += amp * np.exp(-0.5 * r2)
    return Volume3(data, spacing)


def smooth_texture_phantom(shape=(64, 64, 64), spacing=(1.0, 1.0, 1.0), sigma: float = 4.0,
                           seed: int = 0) -> Volume3:
    """Gaussian-filtered white noise rescaled to unit standard deviation."""
    rng = np.random.default_rng(seed)
    data = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return Volume3(data / data.std(), spacing)


def sinusoidal_field(shape, amplitude: float = 2.0, periods: float = 1.0) -> np.ndarray:
    """Smooth displacement (voxels), shape ``(3, nx, ny, nz)``, each component
    a product of sines vanishing at the volume borders."""
    idx = np.indices(shape, dtype=float)
    n = np.reshape(np.array(shape, dtype=float) - 1, (3, 1, 1, 1))
    ph = np.pi * periods * idx / n
    s = np.sin(ph)
    return amplitude * np.stack([s[1] * s[2], s[0] * s[2], s[0] * s[1]])


@dataclass
class LVPhantom:
    myocardium: Mask3
    labels: LabelVolume
    image: Volume3
    long_axis: tuple
    center: tuple


def lv_myocardium(shape=(64, 64, 64), spacing=(1.0, 1.0, 1.0), outer=(0.38, 0.38, 0.45),
                  thickness: float = 0.22, base_fraction: float = 0.85) -> Mask3:
    """Bullet-shaped LV wall: a half-ellipsoidal shell, apex at low z, open at the base.

    ``outer`` gives the epicardial semi-axes as fractions of the grid extent;
    ``thickness`` is the wall thickness as a fraction of the in-plane radius.
    """
    n = np.array(shape, dtype=float)
    ext = (n - 1) * np.array(spacing)
    idx = np.indices(shape, dtype=float) * np.reshape(spacing, (3, 1, 1, 1))
    cx, cy = ext[0] / 2, ext[1] / 2
    z_base = base_fraction * ext[2]
    a, b, c = outer[0] * ext[0], outer[1] * ext[1], outer[2] * ext[2]
    x, y, z = idx[0] - cx, idx[1] - cy, idx[2] - z_base
    inner = 1.0 - thickness
    r_out = (x / a) ** 2 + (y / b) ** 2 + (z / c) ** 2
    r_in = (x / (a * inner)) ** 2 + (y / (b * inner)) ** 2 + (z / (c - thickness * a)) ** 2
    wall = (r_out <= 1.0) & (r_in > 1.0) & (z <= 0)
    return Mask3(wall, spacing)


def lv_phantom(shape=(64, 64, 64), spacing=(1.0, 1.0, 1.0), seed: int = 0,
               **kwargs) -> LVPhantom:
    """LV wall, its AHA-17 labelling, and an LGE-like intensity image."""
    from .atlas import analytic_partition

    myo = lv_myocardium(shape, spacing, **kwargs)
    ext = (np.array(shape, dtype=float) - 1) * np.array(spacing)
    axis = (0.0, 0.0, 1.0)
    pts = np.argwhere(myo.data) * np.array(spacing)
    center = (ext[0] / 2, ext[1] / 2, float(pts[:, 2].mean()))
    labels = analytic_partition(myo, axis, 0.0, center=center)

    rng = np.random.default_rng(seed)
    filled = ndimage.binary_fill_holes(myo.data | _cap(myo.data))
    pool = filled & ~myo.data
    img = np.full(shape, 0.35)
    img[pool] = 0.8
    img[myo.data] = 0.1
    img = ndimage.gaussian_filter(img, 1.0) + 0.03 * ndimage.gaussian_filter(
        rng.standard_normal(shape), 0.7)
    return LVPhantom(myo, labels, Volume3(img, spacing), axis, center)


def _cap(wall: np.ndarray) -> np.ndarray:
    """Close the open base so the blood pool can be filled."""
    out = np.zeros_like(wall)
    zs = np.flatnonzero(wall.any(axis=(0, 1)))
    if zs.size:
        top = zs[-1]
        out[:, :, top] = ndimage.binary_fill_holes(wall[:, :, top])
    return out


def annulus_myocardium(shape=(48, 48, 24), spacing=(1.0, 1.0, 1.0), r_in: float = 10.0,
                       r_out: float = 16.0) -> Mask3:
    """Axis-aligned hollow cylinder (z is the long axis), radii in mm."""
    ext = (np.array(shape, dtype=float) - 1) * np.array(spacing)
    idx = np.indices(shape, dtype=float) * np.reshape(spacing, (3, 1, 1, 1))
    r = np.hypot(idx[0] - ext[0] / 2, idx[1] - ext[1] / 2)
    return Mask3((r >= r_in) & (r <= r_out), spacing)
