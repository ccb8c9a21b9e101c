import itertools
import statistics

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from scarforge.volume import (GeometryError, LabelVolume, Mask3, Volume3, crop_to_bbox,
                              reorient, rescale_intensity, resample, zscore_normalize)

ORIENTATIONS = ["".join(s + a for s, a in zip(signs, perm))
                for perm in itertools.permutations("xyz")
                for signs in itertools.product("+-", repeat=3)]


def ramp(shape=(2, 3, 4)):
    return Volume3(np.arange(np.prod(shape), dtype=float).reshape(shape), (1.0, 2.0, 3.0))


def test_grid_validation():
    with pytest.raises(GeometryError):
        Volume3(np.zeros((2, 2)))
    with pytest.raises(GeometryError):
        Volume3(np.zeros((2, 2, 2)), spacing=(1, 0, 1))
    with pytest.raises(GeometryError):
        Volume3(np.full((2, 2, 2), np.nan))
    with pytest.raises(GeometryError):
        LabelVolume(-np.ones((2, 2, 2), int))
    with pytest.raises(ValueError):
        Volume3(np.zeros((2, 2, 2)), orientation="+x+x+z")


def test_reorient_identity():
    v = ramp()
    assert reorient(v, "+x+y+z").equals(v)


def test_flip_z_is_involution():
    v = ramp()
    w = reorient(v, "+x+y-z")
    assert np.array_equal(w.data, v.data[:, :, ::-1])
    back = reorient(w, "+x+y+z")
    assert np.array_equal(back.data, v.data)
    assert np.allclose(back.origin, v.origin)


def test_permute_xy_matches_index_swap():
    v = ramp((2, 3, 4))
    w = reorient(v, "+y+x+z")
    assert w.dims == (3, 2, 4)
    assert w.spacing == (2.0, 1.0, 3.0)
    for i, j, k in np.ndindex(*v.dims):
        assert w.data[j, i, k] == v.data[i, j, k]


@pytest.mark.parametrize("target", ORIENTATIONS)
def test_reorient_round_trip(target):
    v = ramp((2, 3, 4))
    back = reorient(reorient(v, target), "+x+y+z")
    assert np.array_equal(back.data, v.data)
    assert back.spacing == v.spacing
    assert np.allclose(back.origin, v.origin, atol=1e-12)


def test_reorient_keeps_world_positions():
    v = Volume3(np.random.default_rng(0).random((3, 4, 5)), (1.0, 2.0, 0.5), (10.0, -4.0, 2.0))
    w = reorient(v, "-z+x-y")
    # world coordinate along canonical axis L of array index n: origin + sign * n * spacing
    def world(g):
        codes = [(g.orientation[2 * a + 1], 1 if g.orientation[2 * a] == "+" else -1) for a in range(3)]
        out = {}
        for idx in np.ndindex(*g.dims):
            key = tuple(sorted((L, round(g.origin[a] + s * idx[a] * g.spacing[a], 9))
                               for a, (L, s) in enumerate(codes)))
            out[key] = g.data[idx]
        return out
    assert world(v) == world(w)


def test_reorient_invalid_code():
    with pytest.raises(ValueError):
        reorient(ramp(), "+x+y+w")


def test_resample_same_spacing_is_copy():
    v = ramp()
    w = resample(v, v.spacing, "trilinear")
    assert w.equals(v) and w.data is not v.data


def test_resample_constant_stays_constant():
    v = Volume3(np.full((5, 6, 7), 3.25), (1.0, 1.0, 2.0))
    w = resample(v, (0.7, 1.3, 0.9), "trilinear")
    assert np.all(w.data == 3.25)


def test_resample_ramp_matches_line():
    x = np.arange(10, dtype=float)
    v = Volume3(np.broadcast_to(x[:, None, None], (10, 3, 3)).copy())
    w = resample(v, (0.5, 1.0, 1.0), "trilinear")
    assert w.dims == (20, 3, 3)
    xs = np.arange(20) * 0.5
    interior = xs <= 9
    assert np.allclose(w.data[interior, 1, 1], xs[interior], atol=1e-6, rtol=0)


def test_resample_errors():
    m = Mask3(np.ones((3, 3, 3), bool))
    with pytest.raises(ValueError):
        resample(m, (0.5, 0.5, 0.5), "trilinear")
    with pytest.raises(ValueError):
        resample(ramp(), (0.0, 1.0, 1.0))


@given(st.tuples(*[st.floats(0.3, 3.0)] * 3))
@settings(max_examples=30, deadline=None)
def test_resample_extent_within_one_voxel(new_spacing):
    v = Volume3(np.zeros((7, 9, 5)), (1.0, 1.5, 2.0))
    w = resample(v, new_spacing)
    for n, s, m, ns in zip(v.dims, v.spacing, w.dims, w.spacing):
        assert abs(n * s - m * ns) <= max(s, ns) / 2 + 1e-9 or m == 1


def test_resample_mask_nearest_keeps_dtype():
    m = Mask3(np.zeros((4, 4, 4), bool))
    assert resample(m, (2.0, 2.0, 2.0)).data.dtype == bool


def test_crop_full_mask():
    v = ramp()
    c, off = crop_to_bbox(v, Mask3(np.ones(v.dims, bool), v.spacing), 0)
    assert off == (0, 0, 0) and np.array_equal(c.data, v.data)


def test_crop_single_voxel_with_margin():
    v = Volume3(np.random.default_rng(0).random((12, 12, 12)))
    m = np.zeros(v.dims, bool)
    m[5, 6, 7] = True
    c, off = crop_to_bbox(v, Mask3(m), 1)
    fg = np.argwhere(m)
    lo = fg.min(axis=0) - 1
    assert c.dims == (3, 3, 3)
    assert off == tuple(lo)
    assert np.array_equal(c.data, v.data[4:7, 5:8, 6:9])
    assert c.origin == (4.0, 5.0, 6.0)


def test_crop_margin_clamped():
    v = ramp((4, 4, 4))
    m = np.zeros(v.dims, bool)
    m[0, 0, 0] = True
    c, off = crop_to_bbox(v, Mask3(m, v.spacing), 10)
    assert off == (0, 0, 0) and c.dims == (4, 4, 4)


def test_crop_errors():
    v = ramp((4, 4, 4))
    with pytest.raises(ValueError):
        crop_to_bbox(v, Mask3(np.zeros((4, 4, 4), bool), v.spacing))
    with pytest.raises(GeometryError):
        crop_to_bbox(v, Mask3(np.ones((4, 4, 5), bool), v.spacing))


@given(arrays(bool, (6, 5, 4)), st.integers(0, 3))
@settings(max_examples=50, deadline=None)
def test_crop_contains_all_foreground(m, margin):
    if not m.any():
        return
    v = Volume3(np.zeros(m.shape))
    c, off = crop_to_bbox(v, Mask3(m), margin)
    sl = tuple(slice(o, o + n) for o, n in zip(off, c.dims))
    assert m[sl].sum() == m.sum()


def vol(values):
    return Volume3(np.asarray(values, float).reshape(-1, 1, 1))


def test_rescale_examples():
    assert np.array_equal(rescale_intensity(vol([0, 10])).data.ravel(), [-1, 1])
    assert np.all(rescale_intensity(vol([5, 5, 5])).data == 0)
    assert np.array_equal(rescale_intensity(vol([2, 4, 6])).data.ravel(), [-1, 0, 1])


@given(arrays(float, 20, elements=st.floats(-1e3, 1e3)))
@settings(max_examples=80, deadline=None)
def test_rescale_range_and_idempotence(x):
    r = rescale_intensity(vol(x))
    assert r.data.min() >= -1 and r.data.max() <= 1
    if x.max() > x.min():
        again = rescale_intensity(r)
        assert np.allclose(again.data, r.data, atol=1e-12, rtol=0)


def test_zscore_examples():
    assert np.all(zscore_normalize(vol([3, 3, 3])).data == 0)
    assert np.array_equal(zscore_normalize(vol([-1, 1, -1, 1])).data.ravel(), [-1, 1, -1, 1])
    vals = [1, 2, 3, 4]
    mu, sd = statistics.fmean(vals), statistics.pstdev(vals)
    expected = [(x - mu) / sd for x in vals]
    assert np.allclose(zscore_normalize(vol(vals)).data.ravel(), expected, atol=1e-9, rtol=0)


@given(arrays(float, 30, elements=st.floats(-100, 100)))
@settings(max_examples=50, deadline=None)
def test_zscore_moments(x):
    z = zscore_normalize(vol(x)).data
    if x.std() > 1e-6:
        assert abs(z.mean()) < 1e-6 and abs(z.std() - 1) < 1e-6
