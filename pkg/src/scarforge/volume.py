"""Volumetric data model and preprocessing.

Arrays are indexed ``[x, y, z]`` so ``data.shape == dims``. Physical
coordinates of voxel ``(i, j, k)`` are ``origin + index * spacing`` along each
array axis; ``orientation`` records which canonical axis (and direction) each
array axis runs along, e.g. ``"+x+y+z"`` or ``"-y+x+z"``.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, replace
from typing import Tuple, TypeVar, Union

import numpy as np
from scipy import ndimage

Triple = Tuple[float, float, float]

IDENTITY_ORIENTATION = "+x+y+z"
_ORIENT_RE = re.compile(r"^([+-][xyz])([+-][xyz])([+-][xyz])$")


class GeometryError(ValueError):
    pass


def parse_orientation(code: str) -> tuple[tuple[str, int], ...]:
    """Split ``"+x-y+z"`` into ``(("x", 1), ("y", -1), ("z", 1))``."""
    m = _ORIENT_RE.match(code)
    if m is None:
        raise ValueError(f"invalid orientation code {code!r}")
    parts = tuple((g[1], 1 if g[0] == "+" else -1) for g in m.groups())
    if sorted(p[0] for p in parts) != ["x", "y", "z"]:
        raise ValueError(f"orientation {code!r} is not a permutation of x, y, z")
    return parts


@dataclass(frozen=True, eq=False)
class _Grid:
    data: np.ndarray
    spacing: Triple = (1.0, 1.0, 1.0)
    origin: Triple = (0.0, 0.0, 0.0)
    orientation: str = IDENTITY_ORIENTATION

    _dtype = None

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise GeometryError(f"expected 3-D data, got shape {data.shape}")
        if min(data.shape) < 1:
            raise GeometryError(f"dims must be >= 1, got {data.shape}")
        if self._dtype is not None:
            data = self._coerce(data)
        object.__setattr__(self, "data", data)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(spacing) != 3 or any(not np.isfinite(s) or s <= 0 for s in spacing):
            raise GeometryError(f"spacing must be three positive numbers, got {self.spacing}")
        if len(origin) != 3 or not all(np.isfinite(origin)):
            raise GeometryError(f"origin must be three finite numbers, got {self.origin}")
        parse_orientation(self.orientation)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    def _coerce(self, data):
        return data

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    @property
    def voxel_volume(self) -> float:
        """Voxel volume in mm^3."""
        sx, sy, sz = self.spacing
        return sx * sy * sz

    def with_data(self, data):
        return replace(self, data=data)

    def same_geometry(self, other, atol: float = 1e-6) -> bool:
        return (
            self.dims == other.dims
            and np.allclose(self.spacing, other.spacing, rtol=0, atol=atol)
            and np.allclose(self.origin, other.origin, rtol=0, atol=atol)
            and self.orientation == other.orientation
        )

    def equals(self, other) -> bool:
        """Exact equality of kind, geometry and voxel data."""
        return (
            type(self) is type(other)
            and self.spacing == other.spacing
            and self.origin == other.origin
            and self.orientation == other.orientation
            and self.data.dtype == other.data.dtype
            and np.array_equal(self.data, other.data)
        )

    def physical_grid(self) -> np.ndarray:
        """Physical coordinates (mm) of every voxel, shape ``(3, nx, ny, nz)``."""
        idx = np.indices(self.dims, dtype=float)
        for a in range(3):
            idx[a] = self.origin[a] + idx[a] * self.spacing[a]
        return idx


@dataclass(frozen=True, eq=False)
class Volume3(_Grid):
    """Scalar intensity volume (float64)."""

    _dtype = np.float64

    def _coerce(self, data):
        data = np.asarray(data, dtype=np.float64) if data.dtype != np.float32 else data
        if not np.all(np.isfinite(data)):
            raise GeometryError("volume contains non-finite values")
        return data


@dataclass(frozen=True, eq=False)
class Mask3(_Grid):
    """Binary voxel mask."""

    _dtype = bool

    def _coerce(self, data):
        return np.asarray(data, dtype=bool)

    @property
    def count(self) -> int:
        return int(np.count_nonzero(self.data))


@dataclass(frozen=True, eq=False)
class LabelVolume(_Grid):
    """Non-negative integer labels; 0 is background."""

    _dtype = np.int32

    def _coerce(self, data):
        if data.dtype.kind == "f":
            if not np.all(np.isfinite(data)) or np.any(data != np.round(data)):
                raise GeometryError("label data must be integral")
        data = np.asarray(data).astype(np.int32, copy=False)
        if data.size and data.min() < 0:
            raise GeometryError("labels must be >= 0")
        return data

    def mask(self, *labels: int) -> Mask3:
        return Mask3(np.isin(self.data, labels), self.spacing, self.origin, self.orientation)


AnyGrid = Union[Volume3, Mask3, LabelVolume]
G = TypeVar("G", Volume3, Mask3, LabelVolume)


def check_same_geometry(a: _Grid, b: _Grid, what: str = "inputs") -> None:
    if not a.same_geometry(b):
        raise GeometryError(
            f"{what} differ in geometry: dims {a.dims} vs {b.dims}, "
            f"spacing {a.spacing} vs {b.spacing}"
        )


def reorient(v: G, target: str) -> G:
    """Permute/flip array axes so the grid follows ``target`` orientation.

    World positions of voxels are kept: a flip moves the origin to the far end
    of the flipped axis.
    """
    src = parse_orientation(v.orientation)
    dst = parse_orientation(target)
    # origin is stored per array axis; recover per-canonical-axis values first
    src_axis = {letter: i for i, (letter, _) in enumerate(src)}
    perm = [src_axis[letter] for letter, _ in dst]
    data = np.transpose(v.data, perm)
    spacing = [v.spacing[p] for p in perm]
    origin = [v.origin[p] for p in perm]
    for out_ax, (letter, sign) in enumerate(dst):
        in_ax = perm[out_ax]
        if src[in_ax][1] != sign:
            data = np.flip(data, axis=out_ax)
            n = data.shape[out_ax]
            origin[out_ax] = origin[out_ax] + src[in_ax][1] * (n - 1) * spacing[out_ax]
    return replace(v, data=np.ascontiguousarray(data), spacing=tuple(spacing),
                   origin=tuple(origin), orientation=target)


def resample(v: G, new_spacing, interp: str = "nearest") -> G:
    """Resample onto a grid with ``new_spacing`` sharing the same origin.

    The new size along each axis is ``round(n * spacing / new_spacing)`` so the
    physical extent changes by less than one voxel.
    """
    new_spacing = tuple(float(s) for s in np.broadcast_to(np.asarray(new_spacing, float), (3,)))
    if any(not s > 0 for s in new_spacing):
        raise ValueError(f"new spacing must be positive, got {new_spacing}")
    if interp not in ("nearest", "trilinear"):
        raise ValueError(f"unknown interpolation {interp!r}")
    if interp == "trilinear" and not isinstance(v, Volume3):
        raise ValueError("trilinear interpolation is only defined for intensity volumes")
    if new_spacing == v.spacing:
        return replace(v, data=v.data.copy())
    dims = [max(1, int(round(n * s / ns))) for n, s, ns in zip(v.dims, v.spacing, new_spacing)]
    axes = [np.arange(d) * ns / s for d, s, ns in zip(dims, v.spacing, new_spacing)]
    coords = np.meshgrid(*axes, indexing="ij")
    order = 1 if interp == "trilinear" else 0
    src = v.data.astype(np.float64) if not isinstance(v, Volume3) else v.data
    out = ndimage.map_coordinates(src, coords, order=order, mode="nearest")
    if order == 1:
        # interpolation is convex; clipping only removes rounding drift
        out = np.clip(out, src.min(), src.max())
    if not isinstance(v, Volume3):
        out = out.astype(v.data.dtype)
    return replace(v, data=out, spacing=new_spacing)


def bbox(m: np.ndarray) -> tuple[slice, slice, slice] | None:
    """Tight bounding box of a boolean array, or None if empty."""
    if not m.any():
        return None
    out = []
    for ax in range(3):
        other = tuple(a for a in range(3) if a != ax)
        hit = np.flatnonzero(m.any(axis=other))
        out.append(slice(int(hit[0]), int(hit[-1]) + 1))
    return tuple(out)


def crop_to_bbox(v: G, m: Mask3, margin_voxels: int = 0) -> tuple[G, tuple[int, int, int]]:
    """Crop ``v`` to the bounding box of ``m`` grown by ``margin_voxels``.

    Returns the cropped grid (origin shifted accordingly) and the index offset
    of its first voxel in ``v``.
    """
    check_same_geometry(v, m, "volume and mask")
    box = bbox(m.data)
    if box is None:
        raise ValueError("cannot crop to an empty mask")
    margin = int(margin_voxels)
    sl = tuple(
        slice(max(0, b.start - margin), min(n, b.stop + margin)) for b, n in zip(box, v.dims)
    )
    offset = tuple(s.start for s in sl)
    origin = tuple(o + off * s for o, off, s in zip(v.origin, offset, v.spacing))
    return replace(v, data=v.data[sl].copy(), origin=origin), offset


def rescale_intensity(v: Volume3, lo: float = -1.0, hi: float = 1.0) -> Volume3:
    """Linear map of [min, max] onto [lo, hi]; constant input maps to the midpoint."""
    vmin, vmax = float(v.data.min()), float(v.data.max())
    if vmax == vmin:
        return v.with_data(np.full(v.dims, (lo + hi) / 2.0))
    out = lo + (v.data - vmin) * ((hi - lo) / (vmax - vmin))
    return v.with_data(np.clip(out, lo, hi))


def zscore_normalize(v: Volume3) -> Volume3:
    """Subtract the mean and divide by the population standard deviation."""
    data = v.data.astype(np.float64)
    std = float(data.std())
    if std == 0.0:
        return v.with_data(np.zeros(v.dims))
    return v.with_data((data - data.mean()) / std)
