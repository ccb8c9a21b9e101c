"""Clinically guided scar-mask synthesis on an AHA-17 template.

Pipeline per mask: pick a connected set of segments, draw a target volume for
each, grow a textured blob inside each segment until the volume is met, merge,
clean up, and optionally carry the result into a subject's myocardium.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .atlas import AhaAtlas, SEGMENTS, adjacency, ring_of
from .register import (DemonsParams, DisplacementField, RigidConfig, demons_register,
                       rigid_register_report, warp)
from .volume import Mask3, Volume3, bbox, check_same_geometry

log = logging.getLogger(__name__)

KERNEL_SIZES = (1, 3, 5, 7)
_VOLUME_ROUNDS = 4


class ScarGenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class ScarSpec:
    n_regions: int = 2
    rings: tuple = ("basal", "mid", "apical", "apex")
    volume_range: tuple = (2.0, 40.0)  # mL per region
    anisotropy: tuple = (1.0, 1.0, 1.0)
    porosity_range: tuple = (0.2, 0.6)
    kernel_sizes: tuple = KERNEL_SIZES
    seed: int = 0
    blob_sigma: float = 1.5  # voxels, scaled per axis by anisotropy
    volume_tolerance: float = 0.15
    smooth_sigma: float = 0.6  # voxels, postprocessing
    min_component_voxels: int = 8

    def __post_init__(self):
        for name in ("rings", "volume_range", "anisotropy", "porosity_range", "kernel_sizes"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if int(self.n_regions) < 1 or int(self.n_regions) > 17:
            raise ValueError(f"n_regions must be in 1..17, got {self.n_regions}")
        unknown = set(self.rings) - {"basal", "mid", "apical", "apex"}
        if not self.rings or unknown:
            raise ValueError(f"rings must be a non-empty subset of basal/mid/apical/apex, got {self.rings}")
        vmin, vmax = self.volume_range
        if not 0 < vmin <= vmax:
            raise ValueError(f"volume range must satisfy 0 < v_min <= v_max, got {self.volume_range}")
        pmin, pmax = self.porosity_range
        if not 0 < pmin <= pmax <= 1:
            raise ValueError(f"porosity range must satisfy 0 < p_min <= p_max <= 1, got {self.porosity_range}")
        if len(self.anisotropy) != 3 or min(self.anisotropy) < 1:
            raise ValueError(f"anisotropy ratios must be three values >= 1, got {self.anisotropy}")
        if not self.kernel_sizes or any(k not in KERNEL_SIZES for k in self.kernel_sizes):
            raise ValueError(f"kernel sizes must be odd values in {KERNEL_SIZES}, got {self.kernel_sizes}")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        if self.blob_sigma <= 0 or self.volume_tolerance <= 0 or self.smooth_sigma < 0:
            raise ValueError("blob_sigma and volume_tolerance must be positive, smooth_sigma >= 0")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "ScarSpec":
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "ScarSpec":
        return cls.from_dict(json.loads(text))


@dataclass
class RegionRecord:
    segment: int
    requested_ml: float
    placed_ml: float
    achieved_ml: float
    porosity: float
    kernel: int
    capped: bool = False


@dataclass
class GeneratedScar:
    mask: Mask3
    regions: list
    seed: int

    def sidecar(self) -> dict:
        return {"seed": int(self.seed), "regions": [asdict(r) for r in self.regions]}


# --------------------------------------------------------------------------- selection

def select_regions(atlas: AhaAtlas, spec: ScarSpec, rng: np.random.Generator) -> list[int]:
    """Grow a random connected set of ``spec.n_regions`` segments from allowed rings."""
    counts = atlas.voxel_counts()
    allowed = [s for s in SEGMENTS if ring_of(s) in spec.rings and counts[s] > 0]
    allowed_set = set(allowed)
    n = int(spec.n_regions)
    # starts must lie in a component large enough to hold n segments
    comp_size = {}
    for s in allowed:
        if s in comp_size:
            continue
        comp, stack = {s}, [s]
        while stack:
            for nb in adjacency(stack.pop()) & allowed_set:
                if nb not in comp:
                    comp.add(nb)
                    stack.append(nb)
        for c in comp:
            comp_size[c] = len(comp)
    starts = [s for s in allowed if comp_size[s] >= n]
    if not starts:
        raise ScarGenerationError(
            f"no connected set of {n} segments exists within rings {spec.rings}")
    chosen = [starts[rng.integers(len(starts))]]
    while len(chosen) < n:
        frontier = sorted(set().union(*(adjacency(s) for s in chosen)) & allowed_set - set(chosen))
        chosen.append(frontier[rng.integers(len(frontier))])
    return chosen


def segment_volume_ml(atlas: AhaAtlas, seg: int, myo: Mask3 | None = None) -> float:
    region = atlas.labels.data == seg
    if myo is not None:
        region &= myo.data
    return int(np.count_nonzero(region)) * atlas.labels.voxel_volume / 1000.0


def sample_volumes(regions, spec: ScarSpec, rng: np.random.Generator, atlas: AhaAtlas,
                   myo: Mask3 | None = None) -> list[float]:
    """Uniform target volume per region, capped at 95% of the segment's myocardium."""
    vmin, vmax = spec.volume_range
    out = []
    for seg in regions:
        v = float(rng.uniform(vmin, vmax)) if vmax > vmin else float(vmin)
        cap = 0.95 * segment_volume_ml(atlas, seg, myo)
        if v > cap:
            log.warning("segment %d: requested %.3f mL exceeds cap %.3f mL; capping", seg, v, cap)
            v = cap
        out.append(v)
    return out


# --------------------------------------------------------------------------- blobs

def _smoothed_noise(shape, anisotropy, rng, base_sigma: float) -> np.ndarray:
    noise = rng.standard_normal(shape)
    sigma = [base_sigma * a for a in anisotropy]
    return ndimage.gaussian_filter(noise, sigma, mode="wrap")


def _threshold_top(field: np.ndarray, porosity: float) -> np.ndarray:
    """Mark the ``round(porosity * N)`` largest values."""
    n = field.size
    k = int(round(porosity * n))
    if k >= n:
        return np.ones(field.shape, dtype=bool)
    if k <= 0:
        return np.zeros(field.shape, dtype=bool)
    flat = field.ravel()
    order = np.argpartition(flat, n - k)
    out = np.zeros(n, dtype=bool)
    out[order[n - k:]] = True
    return out.reshape(field.shape)


def generate_blob(dims, porosity: float, anisotropy=(1.0, 1.0, 1.0),
                  rng: np.random.Generator | None = None, base_sigma: float = 1.5,
                  spacing=(1.0, 1.0, 1.0)) -> Mask3:
    """Threshold Gaussian-smoothed white noise so ``porosity`` of voxels are foreground.

    Per-axis smoothing scale is ``base_sigma * anisotropy``; larger ratios give
    blobs elongated along that axis.
    """
    if not 0 < porosity <= 1:
        raise ValueError(f"porosity must be in (0, 1], got {porosity}")
    rng = rng if rng is not None else np.random.default_rng()
    field = _smoothed_noise(tuple(dims), anisotropy, rng, base_sigma)
    return Mask3(_threshold_top(field, porosity), spacing)


def erode(m: Mask3, k: int, border_value: int = 0) -> Mask3:
    """Erosion with a k x k x k cube; ``k == 1`` returns a copy."""
    if k not in KERNEL_SIZES:
        raise ValueError(f"kernel size must be one of {KERNEL_SIZES}, got {k}")
    if k == 1:
        return m.with_data(m.data.copy())
    out = ndimage.binary_erosion(m.data, structure=np.ones((k, k, k), bool),
                                 border_value=border_value)
    return m.with_data(out)


def _pad_box(box, pad: int, dims):
    return tuple(slice(max(0, b.start - pad), min(n, b.stop + pad)) for b, n in zip(box, dims))


def place_region_scar(atlas: AhaAtlas, seg: int, target_ml: float, spec: ScarSpec,
                      rng: np.random.Generator, myo: Mask3 | None = None,
                      _record: dict | None = None) -> Mask3:
    """Grow a textured scar of about ``target_ml`` inside one segment.

    A noise field is drawn over the segment's bounding box; the blob porosity is
    bisected (noise held fixed) until the eroded, clipped blob is within the
    volume tolerance. Empty outcomes are redrawn up to five times.
    """
    labels = atlas.labels
    region = labels.data == seg
    if myo is not None:
        check_same_geometry(myo, labels, "myocardium and atlas")
        region &= myo.data
    box = bbox(region)
    if box is None:
        raise ScarGenerationError(f"segment {seg} is empty")
    vox_ml = labels.voxel_volume / 1000.0
    if target_ml < vox_ml:
        raise ScarGenerationError(
            f"target {target_ml:.4g} mL is below one voxel ({vox_ml:.4g} mL)")
    target = target_ml / vox_ml  # voxels
    # aim inside a third of the tolerance: postprocessing trims a little volume
    tol = spec.volume_tolerance

    kmax = max(spec.kernel_sizes)
    sl = _pad_box(box, kmax // 2 + 1, labels.dims)
    sub_region = region[sl]
    shape = sub_region.shape

    best = None  # (error, mask, porosity, kernel)
    for attempt in range(6):
        k = int(spec.kernel_sizes[rng.integers(len(spec.kernel_sizes))])
        p0 = float(rng.uniform(*spec.porosity_range))
        field = _smoothed_noise(shape, spec.anisotropy, rng, spec.blob_sigma)
        flat_sorted = np.sort(field.ravel())
        se = np.ones((k, k, k), bool) if k > 1 else None

        def realize(p):
            n_fg = int(round(p * field.size))
            if n_fg <= 0:
                return np.zeros(shape, bool)
            blob = field >= flat_sorted[field.size - n_fg] if n_fg < field.size else np.ones(shape, bool)
            if se is not None:
                blob = ndimage.binary_erosion(blob, structure=se, border_value=1)
            return blob & sub_region

        lo, hi, p = 0.0, 1.0, p0
        for _ in range(20):
            m = realize(p)
            n = int(np.count_nonzero(m))
            err = abs(n - target) / target
            if n > 0 and (best is None or err < best[0]):
                best = (err, m, p, k)
            if err <= tol / 3:
                break
            if n < target:
                lo = p
            else:
                hi = p
            p = 0.5 * (lo + hi)
        if best is not None and best[0] <= tol:
            break

    if best is None or np.count_nonzero(best[1]) < 0.1 * target:
        raise ScarGenerationError(f"could not place a scar of {target_ml:.3g} mL in segment {seg}")
    out = np.zeros(labels.dims, dtype=bool)
    out[sl] = best[1]
    if _record is not None:
        _record.update(porosity=best[2], kernel=best[3])
    return Mask3(out, labels.spacing, labels.origin, labels.orientation)


# --------------------------------------------------------------------------- postprocessing

_SIX = ndimage.generate_binary_structure(3, 1)


def fill_holes(m: np.ndarray) -> np.ndarray:
    """Fill background cavities not 6-connected to the volume border."""
    return ndimage.binary_fill_holes(m, structure=_SIX)


def remove_small_components(m: np.ndarray, min_voxels: int) -> np.ndarray:
    if min_voxels <= 1 or not m.any():
        return m
    lab, n = ndimage.label(m, structure=_SIX)
    sizes = np.bincount(lab.ravel())
    keep = sizes >= min_voxels
    keep[0] = False
    return keep[lab]


def _postprocess_pass(m, sigma, min_voxels, myo):
    out = fill_holes(m)
    if sigma > 0:
        out = ndimage.gaussian_filter(out.astype(np.float64), sigma, mode="constant") > 0.5
    out = remove_small_components(out, min_voxels)
    if myo is not None:
        out &= myo
    return out


def postprocess(m: Mask3, smooth_sigma: float = 0.6, min_component_voxels: int = 8,
                myo: Mask3 | None = None, max_passes: int = 200) -> Mask3:
    """Hole filling, Gaussian smoothing re-thresholded at 0.5, small-component removal.

    The pass is repeated until the mask stops changing (at most ``max_passes``),
    so applying this function twice gives the same result as once.
    """
    if myo is not None:
        check_same_geometry(m, myo, "mask and myocardium")
    data = m.data
    box = bbox(data)
    if box is None:
        return m.with_data(np.zeros(m.dims, bool))
    pad = int(np.ceil(4 * smooth_sigma)) + 2
    sl = _pad_box(box, pad, m.dims)
    sub = data[sl]
    sub_myo = myo.data[sl] if myo is not None else None
    for _ in range(max_passes):
        nxt = _postprocess_pass(sub, smooth_sigma, min_component_voxels, sub_myo)
        if np.array_equal(nxt, sub):
            break
        sub = nxt
    else:
        log.warning("postprocess did not reach a fixed point in %d passes", max_passes)
    out = np.zeros(m.dims, bool)
    out[sl] = sub
    return m.with_data(out)


# --------------------------------------------------------------------------- end to end

def generate_scar_mask(atlas: AhaAtlas, myo_template: Mask3, spec: ScarSpec,
                       instance: int = 0) -> GeneratedScar:
    """One complete template-space scar mask; deterministic in ``(spec.seed, instance)``."""
    check_same_geometry(myo_template, atlas.labels, "myocardium and atlas")
    rng = np.random.default_rng([int(spec.seed), int(instance)])
    regions = select_regions(atlas, spec, rng)
    targets = sample_volumes(regions, spec, rng, atlas, myo_template)
    vox_ml = atlas.labels.voxel_volume / 1000.0

    caps = [0.95 * segment_volume_ml(atlas, seg, myo_template) for seg in regions]
    geom = (atlas.labels.spacing, atlas.labels.origin, atlas.labels.orientation)
    aims = list(targets)
    placed, records = [], []
    for seg, target, cap in zip(regions, targets, caps):
        info: dict = {}
        placed.append(place_region_scar(atlas, seg, target, spec, rng, myo_template, _record=info))
        records.append(RegionRecord(seg, target, 0.0, 0.0, float(info["porosity"]),
                                    int(info["kernel"]), capped=target >= cap))

    # smoothing trims thin texture; re-aim regions whose final volume drifted
    for round_ in range(_VOLUME_ROUNDS + 1):
        merged = np.logical_or.reduce([m.data for m in placed])
        mask = postprocess(Mask3(merged, *geom), spec.smooth_sigma,
                           spec.min_component_voxels, myo_template)
        per_seg = np.bincount(atlas.labels.data[mask.data], minlength=18)
        drifted = []
        for i, r in enumerate(records):
            r.placed_ml = placed[i].count * vox_ml
            r.achieved_ml = int(per_seg[r.segment]) * vox_ml
            if abs(r.achieved_ml - r.requested_ml) > spec.volume_tolerance * r.requested_ml:
                drifted.append(i)
        if not drifted or round_ == _VOLUME_ROUNDS:
            break
        for i in drifted:
            r = records[i]
            ratio = r.requested_ml / r.achieved_ml if r.achieved_ml > 0 else 2.0
            aims[i] = float(np.clip(aims[i] * ratio, vox_ml, caps[i]))
            info = {}
            placed[i] = place_region_scar(atlas, r.segment, aims[i], spec, rng, myo_template,
                                          _record=info)
            r.porosity, r.kernel = float(info["porosity"]), int(info["kernel"])
    return GeneratedScar(mask, records, int(spec.seed))


def signed_distance(m: Mask3) -> Volume3:
    """Signed Euclidean distance in mm: negative inside, positive outside."""
    inside = ndimage.distance_transform_edt(m.data, sampling=m.spacing)
    outside = ndimage.distance_transform_edt(~m.data, sampling=m.spacing)
    return Volume3(outside - inside, m.spacing, m.origin, m.orientation)


def to_subject_space(scar: Mask3, myo_template: Mask3, myo_subject: Mask3,
                     existing_scar: Mask3 | None = None,
                     demons: DemonsParams = DemonsParams(),
                     rigid: RigidConfig | None = RigidConfig(shrink_factors=(2, 1)),
                     clip_mm: float = 10.0) -> Mask3:
    """Carry a template scar into subject space and merge it with any existing scar.

    Demons runs between clipped signed-distance maps of the two myocardia, then a
    rigid MI refinement aligns the demons-warped template to the subject.
    """
    check_same_geometry(scar, myo_template, "scar and template myocardium")
    if myo_subject.dims != myo_template.dims:
        raise ValueError("resample the subject onto the template grid first")
    fixed = signed_distance(myo_subject)
    moving = signed_distance(myo_template)
    fixed = fixed.with_data(np.clip(fixed.data, -clip_mm, clip_mm))
    moving = moving.with_data(np.clip(moving.data, -clip_mm, clip_mm))

    field = demons_register(fixed, moving, demons)
    warped = warp(scar, field, reference=myo_subject)
    if rigid is not None:
        moved = warp(moving, field, fill=None, reference=fixed)
        res = rigid_register_report(fixed, moved, rigid)
        # compose: subject point -> rigid -> demons-warped grid -> template
        if res.final_mi > res.initial_mi:
            warped = _warp_composed(scar, field, res.transform, myo_subject)
    out = warped.data & myo_subject.data
    if not out.any():
        raise ScarGenerationError("scar vanished after transfer to subject space")
    if existing_scar is not None:
        check_same_geometry(existing_scar, myo_subject, "existing scar and subject myocardium")
        out |= existing_scar.data
    return myo_subject.with_data(out)


def _warp_composed(scar: Mask3, field: DisplacementField, t, ref) -> Mask3:
    """Sample ``scar`` at ``q + field(q)`` with ``q = t(p)`` for subject points ``p``."""
    from .register import _index_coords, _sample

    q = t.apply(ref.physical_grid())
    qi = _index_coords(q, ref)
    disp = np.stack([_sample(np.ascontiguousarray(field.data[..., a]), qi, 1, 0.0)
                     for a in range(3)])
    coords = _index_coords(q + disp, scar)
    out = _sample(scar.data.astype(np.float64), coords, 0, 0.0) > 0.5
    return ref.with_data(out)
