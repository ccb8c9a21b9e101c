"""AHA 17-segment model: partition, adjacency, per-segment volumes, bull's-eye output."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .volume import LabelVolume, Mask3, check_same_geometry

SEGMENTS = tuple(range(1, 18))

SEGMENT_NAMES = {
    1: "basal anterior", 2: "basal anteroseptal", 3: "basal inferoseptal",
    4: "basal inferior", 5: "basal inferolateral", 6: "basal anterolateral",
    7: "mid anterior", 8: "mid anteroseptal", 9: "mid inferoseptal",
    10: "mid inferior", 11: "mid inferolateral", 12: "mid anterolateral",
    13: "apical anterior", 14: "apical septal", 15: "apical inferior",
    16: "apical lateral", 17: "apex",
}

RINGS = ("basal", "mid", "apical", "apex")


def ring_of(seg: int) -> str:
    if not 1 <= seg <= 17:
        raise ValueError(f"segment id must be in 1..17, got {seg}")
    if seg <= 6:
        return "basal"
    if seg <= 12:
        return "mid"
    if seg <= 16:
        return "apical"
    return "apex"


def _build_adjacency() -> dict[int, frozenset]:
    edges = set()
    for ring in ((1, 2, 3, 4, 5, 6), (7, 8, 9, 10, 11, 12), (13, 14, 15, 16)):
        for a, b in zip(ring, ring[1:] + ring[:1]):
            edges.add((a, b))
    edges.update((i, i + 6) for i in range(1, 7))
    edges.update({(7, 13), (12, 13), (8, 14), (9, 14), (9, 15), (10, 15), (11, 16), (12, 16)})
    edges.update((s, 17) for s in (13, 14, 15, 16))
    adj: dict[int, set] = {s: set() for s in SEGMENTS}
    for a, b in edges:
        adj[a].add(b)
        adj[b].add(a)
    return {s: frozenset(n) for s, n in adj.items()}


_ADJACENCY = _build_adjacency()


def adjacency(seg_id: int) -> frozenset:
    """Segments sharing a border with ``seg_id``."""
    if seg_id not in _ADJACENCY:
        raise ValueError(f"segment id must be in 1..17, got {seg_id}")
    return _ADJACENCY[seg_id]


@dataclass(frozen=True, eq=False)
class AhaAtlas:
    labels: LabelVolume
    present: frozenset = field(default_factory=frozenset)

    @property
    def ring_map(self) -> dict[int, str]:
        return {s: ring_of(s) for s in SEGMENTS}

    def adjacency(self, seg_id: int) -> frozenset:
        return adjacency(seg_id)

    def segment(self, seg_id: int) -> Mask3:
        return self.labels.mask(seg_id)

    def voxel_counts(self) -> dict[int, int]:
        counts = np.bincount(self.labels.data.ravel(), minlength=18)
        return {s: int(counts[s]) for s in SEGMENTS}


def load_atlas(labels: LabelVolume) -> AhaAtlas:
    """Validate a label volume as an AHA-17 atlas. Absent segments are allowed."""
    vals = np.unique(labels.data)
    bad = vals[(vals < 0) | (vals > 17)]
    if bad.size:
        raise ValueError(f"atlas labels must lie in 0..17, found {bad.tolist()}")
    present = frozenset(int(v) for v in vals if v != 0)
    return AhaAtlas(labels, present)


def _sector(theta: np.ndarray, width: float) -> np.ndarray:
    """Sector index of angles in [0, 2pi); a boundary angle goes to the lower sector."""
    t = theta / width
    snapped = np.rint(t)
    t = np.where(np.abs(t - snapped) < 1e-9, snapped, t)
    n = int(round(2 * math.pi / width))
    t = np.where(t >= n, 0.0, t)  # a full turn is the zero boundary
    k = np.ceil(t).astype(int) - 1
    return np.clip(k, 0, n - 1)


def analytic_partition(myo: Mask3, long_axis=(0.0, 0.0, 1.0), rv_insertion_angle: float = 0.0,
                       splits: tuple | None = None, center=None) -> LabelVolume:
    """Label every myocardium voxel with one AHA segment.

    ``long_axis`` points from apex to base. Heights along it are normalised to
    [0, 1] over the myocardium; ``splits = (apex_top, apical_top, mid_top)``
    separates the apex cap, apical, mid and basal rings (default: a 1/12 apex cap
    and thirds otherwise). Angles are measured counter-clockwise from
    ``rv_insertion_angle`` in the short-axis plane: basal and mid rings use 60 deg
    sectors starting there, the apical ring uses 90 deg sectors centred on it.
    Voxels exactly on a boundary go to the lower-numbered segment.
    """
    if not myo.data.any():
        raise ValueError("myocardium mask is empty")
    axis = np.asarray(long_axis, dtype=float)
    if abs(np.linalg.norm(axis) - 1.0) > 1e-6:
        raise ValueError("long axis must be a unit vector")
    apex_top, apical_top, mid_top = splits if splits is not None else (1 / 12, 1 / 3, 2 / 3)
    if not 0.0 <= apex_top <= apical_top <= mid_top <= 1.0:
        raise ValueError(f"splits must be ordered within [0, 1], got {splits}")

    idx = np.argwhere(myo.data)
    pts = idx * np.asarray(myo.spacing) + np.asarray(myo.origin)
    c = pts.mean(axis=0) if center is None else np.asarray(center, dtype=float)
    rel = pts - c
    h = rel @ axis
    span = h.max() - h.min()
    hn = (h - h.min()) / span if span > 0 else np.full(h.shape, 0.5)

    e1 = _in_plane_reference(axis)
    e2 = np.cross(axis, e1)
    theta = np.mod(np.arctan2(rel @ e2, rel @ e1) - rv_insertion_angle, 2 * math.pi)

    six = _sector(theta, math.pi / 3)
    four = _sector(np.mod(theta + math.pi / 4, 2 * math.pi), math.pi / 2)
    # a ring starting at height 1 has zero extent and stays empty
    seg = np.where((hn >= mid_top) & (mid_top < 1.0), 1 + six,
          np.where((hn >= apical_top) & (apical_top < 1.0), 7 + six,
          np.where(hn >= apex_top, 13 + four, 17)))
    out = np.zeros(myo.dims, dtype=np.int32)
    out[tuple(idx.T)] = seg
    return LabelVolume(out, myo.spacing, myo.origin, myo.orientation)


def _in_plane_reference(axis: np.ndarray) -> np.ndarray:
    """Unit vector perpendicular to ``axis``: the x axis projected, or y if parallel."""
    for ref in (np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0])):
        v = ref - (ref @ axis) * axis
        n = np.linalg.norm(v)
        if n > 1e-6:
            return v / n
    raise AssertionError("unreachable")


@dataclass(frozen=True)
class BullseyeTable:
    """Per-segment values (mL for volumes); ``outside`` holds scar off the atlas."""

    values: dict
    outside: float = 0.0

    def __post_init__(self):
        vals = {int(s): float(self.values.get(s, 0.0)) for s in SEGMENTS}
        extra = set(self.values) - set(SEGMENTS)
        if extra:
            raise ValueError(f"unknown segment ids {sorted(extra)}")
        object.__setattr__(self, "values", vals)

    @property
    def total(self) -> float:
        return math.fsum(self.values[s] for s in SEGMENTS)

    def __getitem__(self, seg: int) -> float:
        return self.values[seg]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["segment_id", "name", "value"])
            for s in SEGMENTS:
                w.writerow([s, SEGMENT_NAMES[s], repr(self.values[s])])
            w.writerow(["outside", "outside atlas", repr(self.outside)])

    @classmethod
    def from_csv(cls, path) -> "BullseyeTable":
        vals, outside = {}, 0.0
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                if row["segment_id"] == "outside":
                    outside = float(row["value"])
                else:
                    vals[int(row["segment_id"])] = float(row["value"])
        return cls(vals, outside)


def segment_counts(scar: Mask3, atlas: AhaAtlas) -> tuple[dict[int, int], int]:
    """Scar voxel count per segment, plus the count on label 0."""
    check_same_geometry(scar, atlas.labels, "scar mask and atlas")
    counts = np.bincount(atlas.labels.data[scar.data], minlength=18)
    return {s: int(counts[s]) for s in SEGMENTS}, int(counts[0])


def segment_volumes(scar: Mask3, atlas: AhaAtlas) -> BullseyeTable:
    """Scar volume (mL) in each AHA segment."""
    counts, outside = segment_counts(scar, atlas)
    ml = scar.voxel_volume / 1000.0
    return BullseyeTable({s: n * ml for s, n in counts.items()}, outside * ml)


# --------------------------------------------------------------------------- SVG

# ring -> (first segment, sector count, angular offset of the first sector, degrees)
_SVG_RINGS = (("basal", 1, 6, 0.0), ("mid", 7, 6, 0.0), ("apical", 13, 4, -45.0))
_SVG_RADII = {"basal": (150.0, 200.0), "mid": (100.0, 150.0), "apical": (50.0, 100.0)}
_CX = _CY = 220.0


def _f(x: float) -> str:
    s = f"{x:.3f}".rstrip("0").rstrip(".")
    return "0" if s in ("-0", "") else s


def _polar(r: float, deg: float) -> tuple[float, float]:
    # anterior at the top, counter-clockwise on screen
    a = math.radians(90.0 + deg)
    return _CX + r * math.cos(a), _CY - r * math.sin(a)


def _color(value: float, vmax: float) -> str:
    # white at zero, red for positive, blue for negative (difference plots)
    t = min(abs(value) / vmax, 1.0) if vmax > 0 else 0.0
    g = int(round(255 - 175 * t))
    return f"#ff{g:02x}{g:02x}" if value >= 0 else f"#{g:02x}{g:02x}ff"


def bullseye_svg_text(table: BullseyeTable, title: str = "") -> str:
    vmax = max(abs(v) for v in table.values.values()) or 1.0
    out = ['<svg xmlns="http://www.w3.org/2000/svg" width="440" height="470" '
           'viewBox="0 0 440 470" font-family="sans-serif" font-size="13">']
    if title:
        out.append(f'<text x="220" y="455" text-anchor="middle">{title}</text>')
    for ring, first, n, offset in _SVG_RINGS:
        r0, r1 = _SVG_RADII[ring]
        w = 360.0 / n
        for k in range(n):
            seg = first + k
            a0, a1 = offset + k * w, offset + (k + 1) * w
            p = [_polar(r1, a0), _polar(r1, a1), _polar(r0, a1), _polar(r0, a0)]
            d = (f"M {_f(p[0][0])} {_f(p[0][1])} A {_f(r1)} {_f(r1)} 0 0 0 {_f(p[1][0])} {_f(p[1][1])} "
                 f"L {_f(p[2][0])} {_f(p[2][1])} A {_f(r0)} {_f(r0)} 0 0 1 {_f(p[3][0])} {_f(p[3][1])} Z")
            out.append(f'<path id="seg{seg}" d="{d}" fill="{_color(table[seg], vmax)}" '
                       'stroke="#000000" stroke-width="1"/>')
            tx, ty = _polar((r0 + r1) / 2, (a0 + a1) / 2)
            out.append(f'<text x="{_f(tx)}" y="{_f(ty + 4)}" text-anchor="middle">'
                       f'{table[seg]:.2f}</text>')
    out.append(f'<circle id="seg17" cx="{_f(_CX)}" cy="{_f(_CY)}" r="50" '
               f'fill="{_color(table[17], vmax)}" stroke="#000000" stroke-width="1"/>')
    out.append(f'<text x="{_f(_CX)}" y="{_f(_CY + 4)}" text-anchor="middle">{table[17]:.2f}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def bullseye_svg(table: BullseyeTable, path, title: str = "") -> None:
    """Write a deterministic bull's-eye plot with one annotated cell per segment."""
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(bullseye_svg_text(table, title))
