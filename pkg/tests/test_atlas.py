import math

import numpy as np
from oracles import partition_oracle
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from scarforge.atlas import (SEGMENT_NAMES, SEGMENTS, BullseyeTable, adjacency, analytic_partition,
                             bullseye_svg, bullseye_svg_text, load_atlas, ring_of, segment_counts,
                             segment_volumes)
from scarforge.phantom import annulus_myocardium
from scarforge.volume import GeometryError, LabelVolume, Mask3

def test_ring_and_names():
    assert [ring_of(s) for s in (1, 6, 7, 12, 13, 16, 17)] == \
        ["basal", "basal", "mid", "mid", "apical", "apical", "apex"]
    assert len(SEGMENT_NAMES) == 17
    with pytest.raises(ValueError):
        ring_of(0)


def test_adjacency_examples():
    assert adjacency(17) == {13, 14, 15, 16}
    assert {2, 6, 7} <= adjacency(1)
    with pytest.raises(ValueError):
        adjacency(18)


def test_adjacency_symmetric_irreflexive_connected():
    for i in SEGMENTS:
        assert i not in adjacency(i)
        for j in adjacency(i):
            assert i in adjacency(j)
    seen, todo = {1}, [1]
    while todo:
        for j in adjacency(todo.pop()):
            if j not in seen:
                seen.add(j)
                todo.append(j)
    assert seen == set(SEGMENTS)


def test_adjacency_table_exact():
    expected_edges = {(1, 2), (2, 3), (3, 4), (4, 5), (5, 6), (1, 6),
                      (7, 8), (8, 9), (9, 10), (10, 11), (11, 12), (7, 12),
                      (13, 14), (14, 15), (15, 16), (13, 16),
                      (1, 7), (2, 8), (3, 9), (4, 10), (5, 11), (6, 12),
                      (7, 13), (12, 13), (8, 14), (9, 14), (9, 15), (10, 15), (11, 16), (12, 16),
                      (13, 17), (14, 17), (15, 17), (16, 17)}
    got = {(min(i, j), max(i, j)) for i in SEGMENTS for j in adjacency(i)}
    assert got == expected_edges


def test_load_atlas_all_labels():
    lab = np.zeros((18, 2, 2), np.int32)
    lab[1:, 0, 0] = np.arange(1, 18)
    atlas = load_atlas(LabelVolume(lab))
    assert atlas.present == frozenset(SEGMENTS)
    assert all(n == 1 for n in atlas.voxel_counts().values())


def test_load_atlas_rejects_18():
    lab = np.zeros((3, 3, 3), np.int32)
    lab[0, 0, 0] = 18
    with pytest.raises(ValueError):
        load_atlas(LabelVolume(lab))


def test_partition_matches_atan2_oracle():
    myo = annulus_myocardium((48, 48, 24))
    center = tuple(np.argwhere(myo.data).mean(axis=0))
    labels = analytic_partition(myo, (0, 0, 1), 0.0, center=center)
    assert np.array_equal(labels.data, partition_oracle(myo, center))
    atlas = load_atlas(labels)
    for s in SEGMENTS:
        assert np.array_equal(atlas.segment(s).data, labels.data == s)


def test_partition_matches_oracle_with_rv_angle():
    myo = annulus_myocardium((40, 40, 16), r_in=8, r_out=13)
    center = tuple(np.argwhere(myo.data).mean(axis=0))
    labels = analytic_partition(myo, (0, 0, 1), 0.7, center=center)
    assert np.array_equal(labels.data, partition_oracle(myo, center, rv=0.7))


def test_partition_is_a_partition():
    myo = annulus_myocardium((40, 40, 16), r_in=8, r_out=13)
    labels = analytic_partition(myo)
    assert np.array_equal(labels.data > 0, myo.data)
    assert set(np.unique(labels.data[myo.data])) <= set(SEGMENTS)


def test_boundary_tie_goes_to_lower_segment():
    # odd grid: the centre falls on a voxel, so voxels sit exactly on 0 and 45 degrees
    myo = annulus_myocardium((49, 49, 13), r_in=6, r_out=20)
    c = (24.0, 24.0, 6.0)
    lab = analytic_partition(myo, (0, 0, 1), 0.0, splits=(0.0, 0.0, 0.0), center=c).data
    assert lab[34, 24, 6] == 1  # theta = 0 between segments 6 and 1
    lab = analytic_partition(myo, (0, 0, 1), 0.0, splits=(0.0, 1.0, 1.0), center=c).data
    assert lab[34, 34, 6] == 13  # theta = 45 deg between segments 13 and 14
    assert lab[14, 34, 6] == 14  # theta = 135 deg between segments 14 and 15


def test_all_apical_split():
    myo = annulus_myocardium((40, 40, 16), r_in=8, r_out=13)
    labels = analytic_partition(myo, splits=(0.1, 1.0, 1.0))
    assert set(np.unique(labels.data[myo.data])) <= {13, 14, 15, 16, 17}


def test_partition_errors():
    with pytest.raises(ValueError):
        analytic_partition(Mask3(np.zeros((4, 4, 4), bool)))
    with pytest.raises(ValueError):
        analytic_partition(annulus_myocardium(), long_axis=(0, 0, 2))


def test_segment_volume_counting_oracle():
    lab = np.zeros((10, 10, 10), np.int32)
    lab.ravel()[:500] = 8
    lab.ravel()[500:700] = 3
    atlas = load_atlas(LabelVolume(lab, (1.0, 1.0, 2.0)))
    scar = atlas.segment(8)
    table = segment_volumes(scar, atlas)
    assert table[8] == 1.0
    assert all(table[s] == 0 for s in SEGMENTS if s != 8)
    assert table.total == 1.0 and table.outside == 0


def test_segment_volume_empty_and_split():
    lab = np.zeros((4, 4, 4), np.int32)
    lab[:2] = 7
    lab[2:] = 13
    atlas = load_atlas(LabelVolume(lab))
    assert segment_volumes(Mask3(np.zeros((4, 4, 4), bool)), atlas).total == 0
    t = segment_volumes(Mask3(np.ones((4, 4, 4), bool)), atlas)
    assert t[7] == t[13] == 0.032 and abs(t.total - 0.064) < 1e-12


def test_segment_volume_geometry_mismatch():
    atlas = load_atlas(LabelVolume(np.zeros((4, 4, 4), np.int32)))
    with pytest.raises(GeometryError):
        segment_volumes(Mask3(np.zeros((4, 4, 4), bool), (2.0, 1.0, 1.0)), atlas)


@given(arrays(bool, (6, 6, 6)), arrays(np.int32, (6, 6, 6), elements=st.integers(0, 17)))
@settings(max_examples=60, deadline=None)
def test_count_conservation(scar, labels):
    atlas = load_atlas(LabelVolume(labels))
    counts, outside = segment_counts(Mask3(scar), atlas)
    assert sum(counts.values()) + outside == int(scar.sum())


def test_table_total_and_csv(tmp_path):
    t = BullseyeTable({s: 0.1 * s for s in SEGMENTS}, outside=0.5)
    assert abs(t.total - math.fsum(0.1 * s for s in SEGMENTS)) < 1e-9
    t.to_csv(tmp_path / "t.csv")
    back = BullseyeTable.from_csv(tmp_path / "t.csv")
    assert back == t
    header = (tmp_path / "t.csv").read_text().splitlines()[0]
    assert header == "segment_id,name,value"
    with pytest.raises(ValueError):
        BullseyeTable({18: 1.0})


def test_svg_all_zero():
    svg = bullseye_svg_text(BullseyeTable({}))
    assert svg.count(">0.00</text>") == 17
    for s in SEGMENTS:
        assert f'id="seg{s}"' in svg
    assert svg.count("<path") == 16 and svg.count("<circle") == 1


def test_svg_deterministic_and_chained(tmp_path):
    lab = np.zeros((10, 10, 10), np.int32)
    lab.ravel()[:500] = 8
    atlas = load_atlas(LabelVolume(lab, (1.0, 1.0, 2.0)))
    table = segment_volumes(atlas.segment(8), atlas)
    bullseye_svg(table, tmp_path / "a.svg", "scar")
    bullseye_svg(table, tmp_path / "b.svg", "scar")
    a = (tmp_path / "a.svg").read_bytes()
    assert a == (tmp_path / "b.svg").read_bytes()
    assert b">1.00</text>" in a
