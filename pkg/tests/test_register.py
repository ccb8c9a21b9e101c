import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from scarforge.phantom import lv_myocardium, sinusoidal_field, smooth_blob_phantom, smooth_texture_phantom
from scarforge.register import (DemonsParams, DisplacementField, RegistrationError, RigidConfig, RigidTransform,
                                demons_register, entropy, mean_squared_difference,
                                mutual_information, rigid_register, rigid_register_report, warp)
from scarforge.volume import GeometryError, LabelVolume, Mask3, Volume3


def brute_mi(a, b, bins):
    """Joint-histogram oracle written with plain loops over bins."""
    def idx(x):
        lo, hi = x.min(), x.max()
        if hi == lo:
            return np.zeros(x.size, int)
        return np.minimum(((x - lo) / (hi - lo) * bins).astype(int), bins - 1)
    ia, ib = idx(a.ravel()), idx(b.ravel())
    joint = np.zeros((bins, bins))
    np.add.at(joint, (ia, ib), 1)
    p = joint / joint.sum()
    pa, pb = p.sum(1), p.sum(0)
    total = 0.0
    for i in range(bins):
        for j in range(bins):
            if p[i, j] > 0:
                total += p[i, j] * math.log(p[i, j] / (pa[i] * pb[j]))
    return total


# --------------------------------------------------------------------------- transforms

@given(st.tuples(*[st.floats(-1, 1)] * 3), st.tuples(*[st.floats(-20, 20)] * 3),
       st.tuples(*[st.floats(-50, 50)] * 3))
@settings(max_examples=60, deadline=None)
def test_compose_with_inverse_is_identity(angles, trans, center):
    t = RigidTransform(angles, trans, center)
    ident = t.inverse().compose(t)
    assert np.allclose(ident.params, 0, atol=1e-9)
    ident = t.compose(t.inverse())
    assert np.allclose(ident.params, 0, atol=1e-9)


@given(st.tuples(*[st.floats(-1, 1)] * 3), st.tuples(*[st.floats(-20, 20)] * 3),
       st.tuples(*[st.floats(-1, 1)] * 3), st.tuples(*[st.floats(-20, 20)] * 3))
@settings(max_examples=40, deadline=None)
def test_compose_matches_sequential_application(a1, t1, a2, t2):
    A = RigidTransform(a1, t1, (3.0, -2.0, 1.0))
    B = RigidTransform(a2, t2, (0.0, 5.0, 7.0))
    pts = np.random.default_rng(0).uniform(-30, 30, (3, 10))
    assert np.allclose(A.compose(B).apply(pts), A.apply(B.apply(pts)), atol=1e-9)


def test_transform_json_round_trip():
    t = RigidTransform((0.1, -0.2, 0.3), (1.0, 2.0, 3.0), (4.0, 5.0, 6.0))
    d = json.loads(t.to_json())
    assert set(d) == {"angles", "translation", "center"}
    back = RigidTransform.from_json(t.to_json())
    assert np.array_equal(back.params, t.params) and back.center == t.center


def test_transform_rejects_non_finite():
    with pytest.raises(ValueError):
        RigidTransform((math.nan, 0, 0), (0, 0, 0))


# --------------------------------------------------------------------------- warp

def test_warp_identity_nearest_and_trilinear():
    v = smooth_texture_phantom((12, 10, 8), seed=3)
    assert np.array_equal(warp(v, RigidTransform.identity(), "nearest").data, v.data)
    assert np.allclose(warp(v, RigidTransform.identity()).data, v.data, atol=1e-6)
    zero = DisplacementField.zeros_like(v)
    assert np.allclose(warp(v, zero).data, v.data, atol=1e-6)
    m = Mask3(v.data > 0)
    assert np.array_equal(warp(m, RigidTransform.identity()).data, m.data)


def test_warp_one_voxel_translation_index_shift():
    v = Volume3(np.random.default_rng(0).random((6, 5, 4)), (2.0, 1.0, 1.0))
    out = warp(v, RigidTransform.identity().__class__((0, 0, 0), (2.0, 0, 0)), "nearest")
    expected = np.zeros_like(v.data)
    expected[:-1] = v.data[1:]
    assert np.array_equal(out.data, expected)


def test_warp_mask_and_labels_keep_kind():
    lab = LabelVolume(np.arange(27).reshape(3, 3, 3) % 5)
    out = warp(lab, RigidTransform.identity())
    assert isinstance(out, LabelVolume) and np.array_equal(out.data, lab.data)
    with pytest.raises(ValueError):
        warp(Mask3(np.ones((3, 3, 3), bool)), RigidTransform.identity(), "trilinear")


def test_warp_field_geometry_mismatch():
    v = Volume3(np.zeros((4, 4, 4)))
    with pytest.raises(GeometryError):
        warp(v, DisplacementField(np.zeros((4, 4, 5, 3))))


def test_warp_mask_count_stable_under_smooth_field():
    myo = lv_myocardium((48, 48, 48))
    u = sinusoidal_field(myo.dims, amplitude=2.0)
    f = DisplacementField(np.moveaxis(u, 0, -1), myo.spacing)
    out = warp(myo, f)
    assert abs(out.count - myo.count) / myo.count < 0.2


# --------------------------------------------------------------------------- MI

def test_mi_self_equals_entropy():
    a = smooth_texture_phantom((16, 16, 16), seed=1)
    assert abs(mutual_information(a, a) - entropy(a)) < 1e-9


def test_mi_independent_noise_small():
    rng = np.random.default_rng(0)
    a, b = (Volume3(rng.random((64, 64, 64))) for _ in range(2))
    assert mutual_information(a, b, 32) < 0.02


def test_mi_deterministic_mapping():
    a = Volume3(np.random.default_rng(1).random((20, 20, 20)))
    b = a.with_data(2 * a.data + 3)
    assert abs(mutual_information(a, b) - entropy(a)) < 1e-6


def test_mi_matches_brute_force():
    rng = np.random.default_rng(5)
    a = rng.random((10, 10, 10))
    b = a + 0.3 * rng.random((10, 10, 10))
    assert abs(mutual_information(Volume3(a), Volume3(b), 8) - brute_mi(a, b, 8)) < 1e-12


def test_mi_errors():
    with pytest.raises(GeometryError):
        mutual_information(Volume3(np.zeros((2, 2, 2))), Volume3(np.zeros((2, 2, 3))))
    with pytest.raises(ValueError):
        mutual_information(Volume3(np.zeros((2, 2, 2))), Volume3(np.zeros((2, 2, 2))), 1)


@given(arrays(float, (4, 4, 4), elements=st.floats(-10, 10)),
       arrays(float, (4, 4, 4), elements=st.floats(-10, 10)), st.integers(2, 16))
@settings(max_examples=80, deadline=None)
def test_mi_symmetric_non_negative(a, b, bins):
    va, vb = Volume3(a), Volume3(b)
    ab, ba = mutual_information(va, vb, bins), mutual_information(vb, va, bins)
    assert ab >= 0 and abs(ab - ba) < 1e-12


# --------------------------------------------------------------------------- rigid

@pytest.fixture(scope="module")
def blob48():
    return smooth_blob_phantom((48, 48, 48), seed=2)


def test_rigid_identity(blob48):
    t = rigid_register(blob48, blob48)
    assert np.all(np.abs(t.translation) < 0.1)
    assert np.all(np.abs(t.angles) < 0.01)


def test_rigid_recovers_translation(blob48):
    true = RigidTransform((0, 0, 0), (3.0, 2.0, 0.0), (23.5, 23.5, 23.5))
    moving = warp(blob48, true.inverse())
    rep = rigid_register_report(blob48, moving)
    assert np.allclose(rep.transform.translation, true.translation, atol=0.5)
    assert rep.final_mi >= rep.initial_mi


def test_rigid_recovers_rotation(blob48):
    true = RigidTransform((0, 0, 0.1), (0, 0, 0), (23.5, 23.5, 23.5))
    moving = warp(blob48, true.inverse())
    t = rigid_register(blob48, moving)
    assert abs(t.angles[2] - 0.1) < 0.02


def test_rigid_no_overlap():
    a = Volume3(np.random.default_rng(0).random((8, 8, 8)))
    b = Volume3(a.data, origin=(1000.0, 0.0, 0.0))
    with pytest.raises(RegistrationError):
        rigid_register(a, b)


def test_rigid_config_used():
    a = smooth_blob_phantom((24, 24, 24), seed=4)
    rep = rigid_register_report(a, a, RigidConfig(shrink_factors=(1,), max_evaluations=5))
    # per-level budget plus the two full-resolution scoring calls
    assert rep.evaluations <= 5 + 2


# --------------------------------------------------------------------------- demons

def test_demons_identity():
    v = smooth_texture_phantom((32, 32, 32), seed=0)
    f = demons_register(v, v)
    assert f.magnitude_voxels().mean() < 0.05


def test_demons_zero_iterations():
    v = smooth_texture_phantom((16, 16, 16), seed=0)
    w = smooth_texture_phantom((16, 16, 16), seed=1)
    f = demons_register(v, w, DemonsParams(iterations=(0,)))
    assert np.all(f.data == 0)


def test_demons_recovers_sinusoid():
    moving = smooth_texture_phantom((48, 48, 48), seed=7)
    u = sinusoidal_field(moving.dims, amplitude=2.0)
    true = DisplacementField(np.moveaxis(u, 0, -1), moving.spacing)
    fixed = warp(moving, true)
    f = demons_register(fixed, moving)
    err = np.sqrt(((f.in_voxels() - u) ** 2).sum(axis=0)).mean()
    assert err < 1.0
    assert mean_squared_difference(fixed, warp(moving, f)) <= mean_squared_difference(fixed, moving)
    assert f.magnitude_voxels().max() <= DemonsParams().displacement_bound()


def test_demons_dim_mismatch():
    with pytest.raises(GeometryError):
        demons_register(Volume3(np.zeros((4, 4, 4))), Volume3(np.zeros((4, 4, 5))))


def test_demons_params_validation():
    with pytest.raises(ValueError):
        DemonsParams(iterations=(10, -1))
    with pytest.raises(ValueError):
        DemonsParams(max_step=0)
