"""Mutual-information rigid registration, symmetric-forces demons, and warping.

Transforms follow the resampling convention: a transform maps points of the
fixed (output) grid into the moving image, and ``warp(moving, T)`` samples
``moving`` at ``T(p)`` for every fixed-grid point ``p``. Registration returns
the transform for which ``warp(moving, T)`` best matches ``fixed``.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation

from . import nrrd
from .volume import GeometryError, LabelVolume, Mask3, Volume3, check_same_geometry

log = logging.getLogger(__name__)


class RegistrationError(RuntimeError):
    pass


# --------------------------------------------------------------------------- transforms

@dataclass(frozen=True)
class RigidTransform:
    angles: tuple = (0.0, 0.0, 0.0)  # extrinsic x, y, z Euler angles, radians
    translation: tuple = (0.0, 0.0, 0.0)  # mm
    center: tuple = (0.0, 0.0, 0.0)  # mm

    def __post_init__(self):
        for name in ("angles", "translation", "center"):
            val = tuple(float(x) for x in getattr(self, name))
            if len(val) != 3 or not all(np.isfinite(val)):
                raise ValueError(f"{name} must be three finite numbers, got {val}")
            object.__setattr__(self, name, val)

    @classmethod
    def identity(cls, center=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(center=center)

    @classmethod
    def from_matrix(cls, rot: np.ndarray, translation, center) -> "RigidTransform":
        angles = Rotation.from_matrix(rot).as_euler("xyz")
        return cls(tuple(angles), tuple(translation), tuple(center))

    @property
    def matrix(self) -> np.ndarray:
        return Rotation.from_euler("xyz", self.angles).as_matrix()

    @property
    def params(self) -> np.ndarray:
        return np.array(self.angles + self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map points of shape ``(3, ...)``: ``R (p - c) + c + t``."""
        c = np.reshape(self.center, (3,) + (1,) * (points.ndim - 1))
        t = np.reshape(self.translation, c.shape)
        flat = (points - c).reshape(3, -1)
        return (self.matrix @ flat).reshape(points.shape) + c + t

    def inverse(self) -> "RigidTransform":
        rt = self.matrix.T
        return RigidTransform.from_matrix(rt, -rt @ np.array(self.translation), self.center)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self.compose(other)(p) == self(other(p))``, centred at ``other.center``."""
        ra, rb = self.matrix, other.matrix
        ca, cb = np.array(self.center), np.array(other.center)
        t = ra @ (cb + np.array(other.translation) - ca) + ca + np.array(self.translation) - cb
        return RigidTransform.from_matrix(ra @ rb, t, cb)

    def to_json(self) -> str:
        return json.dumps({"angles": list(self.angles), "translation": list(self.translation),
                           "center": list(self.center)}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "RigidTransform":
        d = json.loads(text)
        return cls(tuple(d["angles"]), tuple(d["translation"]), tuple(d["center"]))


@dataclass(frozen=True, eq=False)
class DisplacementField:
    """Per-voxel displacement in mm, ``data.shape == dims + (3,)``."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)
    orientation: str = "+x+y+z"

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 4 or data.shape[-1] != 3:
            raise GeometryError(f"displacement data must have shape (nx, ny, nz, 3), got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise RegistrationError("displacement field contains non-finite values")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "origin", tuple(float(s) for s in self.origin))

    @classmethod
    def zeros_like(cls, v) -> "DisplacementField":
        return cls(np.zeros(v.dims + (3,)), v.spacing, v.origin, v.orientation)

    @property
    def dims(self):
        return self.data.shape[:3]

    def in_voxels(self) -> np.ndarray:
        """Displacement in voxel units, shape ``(3, nx, ny, nz)``."""
        return np.moveaxis(self.data, -1, 0) / np.reshape(self.spacing, (3, 1, 1, 1))

    def magnitude_voxels(self) -> np.ndarray:
        return np.sqrt((self.in_voxels() ** 2).sum(axis=0))

    def save(self, path) -> None:
        nrrd.save_vector_nrrd(self.data, self.spacing, self.origin, self.orientation, path)

    @classmethod
    def load(cls, path) -> "DisplacementField":
        data, spacing, origin, orientation = nrrd.load_vector_nrrd(path)
        return cls(data, spacing, origin, orientation)


# --------------------------------------------------------------------------- warping

def _index_coords(points: np.ndarray, grid) -> np.ndarray:
    """Physical points ``(3, ...)`` to fractional voxel indices of ``grid``."""
    o = np.reshape(grid.origin, (3,) + (1,) * (points.ndim - 1))
    s = np.reshape(grid.spacing, o.shape)
    return (points - o) / s


def _sample(data: np.ndarray, coords: np.ndarray, order: int, fill: float | None = 0.0) -> np.ndarray:
    if fill is None:
        return ndimage.map_coordinates(data, coords, order=order, mode="nearest", prefilter=False)
    return ndimage.map_coordinates(data, coords, order=order, mode="constant", cval=fill,
                                   prefilter=False)


def warp(v, t, interp: str | None = None, fill: float | None = 0.0, reference=None):
    """Resample ``v`` through ``t`` onto ``reference`` (default: ``v``'s own grid).

    Samples falling outside ``v`` take ``fill``; ``fill=None`` repeats the edge
    voxel instead. Masks and label volumes are always resampled with nearest
    neighbour.
    """
    ref = v if reference is None else reference
    if interp is None:
        interp = "trilinear" if isinstance(v, Volume3) else "nearest"
    if interp not in ("nearest", "trilinear"):
        raise ValueError(f"unknown interpolation {interp!r}")
    if interp == "trilinear" and not isinstance(v, Volume3):
        raise ValueError("masks and labels must be warped with nearest interpolation")
    order = 1 if interp == "trilinear" else 0

    if isinstance(t, RigidTransform):
        coords = _index_coords(t.apply(ref.physical_grid()), v)
    elif isinstance(t, DisplacementField):
        if tuple(t.dims) != tuple(ref.dims) or not np.allclose(t.spacing, ref.spacing):
            raise GeometryError(f"field dims {t.dims} do not match reference grid {ref.dims}")
        pts = ref.physical_grid() + np.moveaxis(t.data, -1, 0)
        coords = _index_coords(pts, v)
    else:
        raise TypeError(f"cannot warp with {type(t).__name__}")

    src = v.data if isinstance(v, Volume3) else v.data.astype(np.float64)
    out = _sample(src, coords, order, fill)
    if isinstance(v, Mask3):
        out = out > 0.5
    elif isinstance(v, LabelVolume):
        out = np.rint(out).astype(v.data.dtype)
    return replace(ref, data=out) if type(ref) is type(v) else type(v)(
        out, ref.spacing, ref.origin, ref.orientation)


# --------------------------------------------------------------------------- mutual information

def _bin_index(x: np.ndarray, lo: float, hi: float, bins: int) -> np.ndarray:
    if hi <= lo:
        return np.zeros(x.shape, dtype=np.intp)
    idx = np.floor((x - lo) * (bins / (hi - lo))).astype(np.intp)
    return np.clip(idx, 0, bins - 1)


def _entropy(p: np.ndarray) -> float:
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def _mi_from_indices(ia: np.ndarray, ib: np.ndarray, bins: int) -> float:
    joint = np.bincount(ia * bins + ib, minlength=bins * bins).reshape(bins, bins)
    n = joint.sum()
    if n == 0:
        return 0.0
    pj = joint / n
    pa, pb = pj.sum(axis=1), pj.sum(axis=0)
    nz = pj > 0
    outer = np.outer(pa, pb)
    mi = float((pj[nz] * np.log(pj[nz] / outer[nz])).sum())
    return max(mi, 0.0)


def entropy(a: Volume3, bins: int = 32) -> float:
    """Shannon entropy (nats) of the intensity histogram with min/max bin edges."""
    d = a.data.ravel()
    counts = np.bincount(_bin_index(d, d.min(), d.max(), bins), minlength=bins)
    return _entropy(counts / counts.sum())


def mutual_information(a: Volume3, b: Volume3, bins: int = 32) -> float:
    """Mutual information (nats) from a dense joint histogram.

    Bin edges span each image's own [min, max]; no Parzen smoothing.
    """
    if a.dims != b.dims:
        raise GeometryError(f"dims differ: {a.dims} vs {b.dims}")
    if bins < 2:
        raise ValueError("bins must be >= 2")
    da, db = a.data.ravel(), b.data.ravel()
    ia = _bin_index(da, da.min(), da.max(), bins)
    ib = _bin_index(db, db.min(), db.max(), bins)
    return _mi_from_indices(ia, ib, bins)


# --------------------------------------------------------------------------- rigid

@dataclass(frozen=True)
class RigidConfig:
    bins: int = 32
    shrink_factors: tuple = (4, 2, 1)
    translation_step: float = 2.0  # voxels at the current level
    angle_step: float = 0.08  # radians
    min_translation_step: float = 0.02  # voxels at full resolution
    min_angle_step: float = 0.001
    max_evaluations: int = 2000  # per level
    min_overlap: float = 0.2


@dataclass
class RigidResult:
    transform: RigidTransform
    initial_mi: float
    final_mi: float
    evaluations: int


def _shrink(v: Volume3, f: int) -> Volume3:
    if f == 1:
        return v
    data = ndimage.gaussian_filter(v.data, sigma=0.5 * f)[::f, ::f, ::f]
    return Volume3(np.ascontiguousarray(data), tuple(s * f for s in v.spacing), v.origin,
                   v.orientation)


class _MIObjective:
    """MI between ``fixed`` and ``moving`` warped by a rigid transform, on the overlap."""

    def __init__(self, fixed: Volume3, moving: Volume3, bins: int, edges, min_overlap: float):
        self.fixed, self.moving, self.bins = fixed, moving, bins
        (self.flo, self.fhi), (self.mlo, self.mhi) = edges
        self.grid = fixed.physical_grid()
        self.ifix = _bin_index(fixed.data, self.flo, self.fhi, bins)
        self.hi = np.reshape(np.array(moving.dims) - 1, (3, 1, 1, 1))
        self.min_overlap = min_overlap
        self.evaluations = 0

    def __call__(self, t: RigidTransform) -> float:
        self.evaluations += 1
        coords = _index_coords(t.apply(self.grid), self.moving)
        inside = np.all((coords >= 0) & (coords <= self.hi), axis=0)
        if inside.mean() < self.min_overlap:
            return -np.inf
        vals = ndimage.map_coordinates(self.moving.data, coords[:, inside], order=1,
                                       mode="nearest", prefilter=False)
        im = _bin_index(vals, self.mlo, self.mhi, self.bins)
        mi = _mi_from_indices(self.ifix[inside], im, self.bins)
        if not np.isfinite(mi):
            raise RegistrationError("mutual information objective became non-finite")
        return mi


def _extent(v) -> tuple[np.ndarray, np.ndarray]:
    lo = np.array(v.origin)
    hi = lo + (np.array(v.dims) - 1) * np.array(v.spacing)
    return lo, hi


def grid_center(v) -> tuple:
    lo, hi = _extent(v)
    return tuple((lo + hi) / 2)


def rigid_register_report(fixed: Volume3, moving: Volume3, config: RigidConfig = RigidConfig(),
                          initial: RigidTransform | None = None) -> RigidResult:
    """Maximise MI over six rigid parameters by multiresolution compass search."""
    flo, fhi = _extent(fixed)
    mlo, mhi = _extent(moving)
    if np.any(fhi < mlo) or np.any(mhi < flo):
        raise RegistrationError("fixed and moving images do not overlap physically")
    current = initial or RigidTransform.identity(grid_center(fixed))
    edges = ((fixed.data.min(), fixed.data.max()), (moving.data.min(), moving.data.max()))

    full = _MIObjective(fixed, moving, config.bins, edges, config.min_overlap)
    initial_mi = full(current)
    if not np.isfinite(initial_mi):
        raise RegistrationError("initial overlap between images is too small")

    evaluations = 1
    base = float(min(fixed.spacing))
    for f in config.shrink_factors:
        obj = full if f == 1 else _MIObjective(_shrink(fixed, f), _shrink(moving, f),
                                               config.bins, edges, config.min_overlap)
        current, n = _compass_search(obj, current, config, base * f, base)
        evaluations += n

    final_mi = full(current)
    if not np.isfinite(final_mi):
        raise RegistrationError("optimizer diverged")
    if final_mi < initial_mi:
        log.warning("rigid search ended below its start (%.4g < %.4g); keeping start",
                    final_mi, initial_mi)
        current, final_mi = initial or RigidTransform.identity(grid_center(fixed)), initial_mi
    return RigidResult(current, initial_mi, final_mi, evaluations + 1)


def _compass_search(obj, start: RigidTransform, cfg: RigidConfig, level_voxel: float,
                    full_voxel: float):
    x = start.params.copy()
    center = start.center
    make = lambda p: RigidTransform(tuple(p[:3]), tuple(p[3:]), center)  # noqa: E731
    best = obj(make(x))
    n = 1
    steps = np.array([cfg.angle_step] * 3 + [cfg.translation_step * level_voxel] * 3)
    floor = np.array([cfg.min_angle_step] * 3 + [cfg.min_translation_step * full_voxel] * 3)
    # stop refining a level once its steps drop below a quarter voxel of that level
    level_floor = np.maximum(floor, np.array([0.0] * 3 + [0.25 * level_voxel] * 3)
                             if level_voxel > full_voxel else floor)
    while np.any(steps >= level_floor) and n < cfg.max_evaluations:
        improved = False
        for i in range(6):
            if steps[i] < level_floor[i]:
                continue
            for sign in (1.0, -1.0):
                if n >= cfg.max_evaluations:
                    break
                trial = x.copy()
                trial[i] += sign * steps[i]
                val = obj(make(trial))
                n += 1
                if val > best + 1e-12:
                    x, best, improved = trial, val, True
                    break
        if not improved:
            steps *= 0.5
    return make(x), n


def rigid_register(fixed: Volume3, moving: Volume3, bins: int = 32,
                   config: RigidConfig | None = None) -> RigidTransform:
    cfg = config or RigidConfig(bins=bins)
    if cfg.bins != bins:
        cfg = replace(cfg, bins=bins)
    return rigid_register_report(fixed, moving, cfg).transform


# --------------------------------------------------------------------------- demons

@dataclass(frozen=True)
class DemonsParams:
    iterations: tuple = (40, 30, 20)  # coarse to fine
    levels: int | None = None  # defaults to len(iterations)
    update_sigma: float = 1.0  # voxels
    field_sigma: float = 1.5  # voxels
    max_step: float = 1.25  # voxels

    def __post_init__(self):
        its = tuple(int(i) for i in self.iterations)
        object.__setattr__(self, "iterations", its)
        levels = len(its) if self.levels is None else int(self.levels)
        object.__setattr__(self, "levels", levels)
        if levels < 1 or levels != len(its):
            raise ValueError(f"need one iteration count per level, got {its} for {levels} levels")
        if any(i < 0 for i in its):
            raise ValueError("iteration counts must be >= 0")
        if not (self.update_sigma > 0 and self.field_sigma > 0 and self.max_step > 0):
            raise ValueError("smoothing sigmas and max step must be positive")

    def displacement_bound(self) -> float:
        """Upper bound on the field magnitude in finest-level voxels."""
        return sum(self.max_step * n * 2 ** (self.levels - 1 - i)
                   for i, n in enumerate(self.iterations))


def _smooth_vec(u: np.ndarray, sigma: float) -> np.ndarray:
    return np.stack([ndimage.gaussian_filter(c, sigma, mode="nearest") for c in u])


def _demons_level(F: np.ndarray, M: np.ndarray, u: np.ndarray, n: int, p: DemonsParams):
    grid = np.indices(F.shape, dtype=float)
    gF = np.stack(np.gradient(F))
    K = 4.0 * p.max_step ** 2
    hi = np.reshape(np.array(F.shape, dtype=float) - 1, (3, 1, 1, 1))
    for _ in range(n):
        coords = grid + u
        Mw = ndimage.map_coordinates(M, coords, order=1, mode="nearest", prefilter=False)
        # no force where the sample left the moving image: nothing to match there
        diff = np.where(np.all((coords >= 0) & (coords <= hi), axis=0), F - Mw, 0.0)
        J = 0.5 * (gF + np.stack(np.gradient(Mw)))
        denom = (J ** 2).sum(axis=0) + diff ** 2 / K
        with np.errstate(divide="ignore", invalid="ignore"):
            scale = np.where(denom > 1e-12, diff / denom, 0.0)
        du = J * scale
        norm = np.sqrt((du ** 2).sum(axis=0))
        du *= np.minimum(1.0, p.max_step / np.maximum(norm, 1e-300))
        u = u + _smooth_vec(du, p.update_sigma)
        u = _smooth_vec(u, p.field_sigma)
        if not np.all(np.isfinite(u)):
            raise RegistrationError("demons update became non-finite")
    return u


def _upsample_field(u: np.ndarray, shape) -> np.ndarray:
    coords = np.indices(shape, dtype=float) / 2.0
    return 2.0 * np.stack([ndimage.map_coordinates(c, coords, order=1, mode="nearest",
                                                   prefilter=False) for c in u])


def demons_register(fixed: Volume3, moving: Volume3,
                    params: DemonsParams = DemonsParams()) -> DisplacementField:
    """Fast symmetric-forces demons on a Gaussian pyramid.

    Finds ``d`` with ``moving(p + d(p)) ~ fixed(p)``. If the result does not
    lower the mean squared difference (edge-extended warp) the zero field is
    returned.
    """
    if fixed.dims != moving.dims:
        raise GeometryError(f"demons needs equal dims, got {fixed.dims} vs {moving.dims}")
    F0, M0 = fixed.data.astype(np.float64), moving.data.astype(np.float64)

    pyramid = []
    for lvl in range(params.levels):
        f = 2 ** (params.levels - 1 - lvl)
        if f == 1:
            pyramid.append((F0, M0))
        else:
            pyramid.append((ndimage.gaussian_filter(F0, 0.5 * f)[::f, ::f, ::f],
                            ndimage.gaussian_filter(M0, 0.5 * f)[::f, ::f, ::f]))

    u = np.zeros((3,) + pyramid[0][0].shape)
    for lvl, ((F, M), n) in enumerate(zip(pyramid, params.iterations)):
        if lvl > 0:
            u = _upsample_field(u, F.shape)
        u = _demons_level(F, M, u, n, params)

    out = DisplacementField(np.moveaxis(u, 0, -1) * np.array(fixed.spacing),
                            fixed.spacing, fixed.origin, fixed.orientation)
    # judged with edge extension, the same boundary rule the iterations use
    before = float(np.mean((F0 - M0) ** 2))
    after = float(np.mean((F0 - warp(moving, out, fill=None, reference=fixed).data) ** 2))
    if after > before:
        log.warning("demons did not reduce the intensity mismatch (%.4g > %.4g); "
                    "returning the zero field", after, before)
        return DisplacementField.zeros_like(fixed)
    return out


def mean_squared_difference(a: Volume3, b: Volume3) -> float:
    check_same_geometry(a, b)
    return float(np.mean((a.data - b.data) ** 2))
