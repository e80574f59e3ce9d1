import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from shapely.geometry import Point, Polygon

from segcalib.core import BUILDING, CAR, PEDESTRIAN, ROAD, LabeledPointCloud
from segcalib.errors import InsufficientOverlapError
from segcalib.reconstruction import (
    IcpParams, Scan, crop_radius, filter_by_range, icp, icp_align, merge_recursive,
    point_in_polygon, remove_dynamic, rigid_transform, to_world, voxel_downsample,
)
from segcalib.synth import SceneSpec, generate_scene, simulate_scans, surface_distance

from oracles import rotation_about, rotation_angle_deg, rotation_z


def cloud_of(points, label=BUILDING):
    points = np.asarray(points, dtype=np.float64)
    return LabeledPointCloud(points, np.full(len(points), label, np.uint8))


def structured_cloud(seed=0, n=3000):
    """Three orthogonal patches (corner of a room), so ICP is well constrained."""
    rng = np.random.default_rng(seed)
    k = n // 3
    a = np.column_stack([rng.uniform(0, 4, k), rng.uniform(0, 3, k), np.zeros(k)])
    b = np.column_stack([np.zeros(k), rng.uniform(0, 3, k), rng.uniform(0, 2.5, k)])
    c = np.column_stack([rng.uniform(0, 4, k), np.zeros(k), rng.uniform(0, 2.5, k)])
    bump = np.column_stack([rng.uniform(1, 1.5, k), rng.uniform(1, 1.6, k), rng.uniform(0, 0.7, k)])
    return cloud_of(np.vstack([a, b, c, bump]))


def test_filter_by_range_examples():
    c = LabeledPointCloud([[10, 0, 0], [0, 60, 0], [0, 0, 80]], [ROAD, BUILDING, ROAD])
    s = Scan(c, np.eye(4))
    out = filter_by_range(s, 75).cloud
    assert out.points.tolist() == [[10, 0, 0], [0, 60, 0]]
    assert out.labels.tolist() == [ROAD, BUILDING]
    assert len(filter_by_range(s, math.inf).cloud) == 3
    assert len(filter_by_range(s, 5).cloud) == 0
    with pytest.raises(ValueError):
        filter_by_range(s, 0)


def test_to_world_examples():
    c = cloud_of([[1, 0, 0], [0, 2, 3]])
    assert np.array_equal(to_world(Scan(c, np.eye(4))).points, c.points)
    moved = to_world(Scan(c, rigid_transform(t=[1, 2, 3]))).points
    assert np.array_equal(moved, c.points + [1, 2, 3])
    turned = to_world(Scan(c, rigid_transform(rotation_z(90)))).points
    assert np.allclose(turned[0], [0, 1, 0], atol=1e-15)
    with pytest.raises(ValueError):
        Scan(c, np.diag([2.0, 1, 1, 1]))


def test_icp_recovers_translation():
    src = structured_cloud()
    tgt = src.transformed(rigid_transform(t=[0.1, 0, 0]))
    T = icp_align(src, tgt)
    assert np.allclose(T[:3, 3], [0.1, 0, 0], atol=1e-3)
    assert rotation_angle_deg(T[:3, :3]) < 0.01


def test_icp_identity_fixed_point():
    src = structured_cloud(1)
    T = icp_align(src, src)
    assert np.allclose(T, np.eye(4), rtol=0, atol=1e-9)


def test_icp_insufficient_overlap():
    src = structured_cloud(2)
    far = src.transformed(rigid_transform(t=[100, 0, 0]))
    with pytest.raises(InsufficientOverlapError):
        icp_align(src, far, params=IcpParams(max_correspondence_dist=0.5))


@pytest.mark.parametrize("seed", range(8))
def test_icp_rigid_recovery_and_monotone_residual(seed):
    rng = np.random.default_rng(seed)
    src = structured_cloud(seed)
    R = rotation_about(rng.normal(size=3), rng.uniform(0, 5))
    t = rng.normal(size=3)
    t *= rng.uniform(0, 0.5) / np.linalg.norm(t)
    T_true = rigid_transform(R, t)
    tgt = src.transformed(T_true)
    res = icp(src, tgt, params=IcpParams(max_iterations=200, convergence_delta=1e-10))
    assert np.all(np.diff(res.rms_history) <= 1e-15)
    err = np.linalg.inv(T_true) @ res.transform
    assert np.linalg.norm(err[:3, 3]) < 1e-3
    assert rotation_angle_deg(err[:3, :3]) < 0.01


def test_voxel_downsample_majority_and_ties():
    c = LabeledPointCloud(
        [[0.01, 0.01, 0.01], [0.02, 0.02, 0.02], [0.03, 0.03, 0.03],
         [0.51, 0.0, 0.0], [0.52, 0.0, 0.0]],
        [ROAD, BUILDING, BUILDING, BUILDING, ROAD])
    out = voxel_downsample(c, 0.5)
    assert out.points.tolist() == [[0.25, 0.25, 0.25], [0.75, 0.25, 0.25]]
    assert out.labels.tolist() == [BUILDING, ROAD]


@given(arrays(np.float64, (60, 3), elements=st.floats(-20, 20)), st.floats(0.05, 3))
@settings(max_examples=100)
def test_voxel_downsample_bounds(points, voxel):
    c = cloud_of(points)
    out = voxel_downsample(c, voxel)
    assert len(out) <= len(c)
    assert len(out.points) == len(out.labels)
    # every input point has its voxel's representative within half a voxel diagonal
    keys_in = np.floor(points / voxel)
    keys_out = np.floor(out.points / voxel)
    assert {tuple(k) for k in keys_in} == {tuple(k) for k in keys_out}


def test_merge_single_scan_is_downsampled_world_cloud():
    c = structured_cloud(3)
    s = Scan(c, rigid_transform(rotation_z(30), [5, 1, 0]))
    out = merge_recursive([s])
    ref = voxel_downsample(to_world(s), 0.1)
    assert np.array_equal(out.points, ref.points) and np.array_equal(out.labels, ref.labels)


def test_merge_identical_scans_equals_one_copy():
    c = structured_cloud(4)
    scans = [Scan(c, np.eye(4), float(i)) for i in range(3)]
    out = merge_recursive(scans)
    ref = voxel_downsample(c, 0.1)
    assert np.array_equal(out.points, ref.points)
    assert np.array_equal(out.labels, ref.labels)


def test_merge_pre_registered_moves_points_at_most_half_diagonal():
    spec = SceneSpec((-6, -6, 6, 6), ROAD, boxes=[(1, 1, 3, 4, 0, 2.5, BUILDING)],
                     density=30, seed=2)
    world = generate_scene(spec)
    rng = np.random.default_rng(0)
    scans = []
    for i in range(4):
        T = rigid_transform(rotation_z(rng.uniform(-180, 180)), rng.uniform(-2, 2, 3))
        scans.append(Scan(world.transformed(np.linalg.inv(T)), T, float(i)))
    out = merge_recursive(scans, IcpParams(voxel_size=0.2))
    assert len(out) <= 4 * len(world)
    from scipy.spatial import cKDTree
    d, _ = cKDTree(out.points).query(world.points)
    assert d.max() <= 0.2 * math.sqrt(3) / 2 + 1e-9


def test_merge_requires_time_order():
    c = structured_cloud(5)
    with pytest.raises(ValueError):
        merge_recursive([Scan(c, np.eye(4), 1.0), Scan(c, np.eye(4), 0.0)])


def test_merge_reports_failing_group():
    c = structured_cloud(6)
    far = rigid_transform(t=[500, 0, 0])
    scans = [Scan(c, np.eye(4), float(i)) for i in range(3)]
    scans += [Scan(c, np.eye(4), 3.0), Scan(c, far, 4.0)]
    with pytest.raises(InsufficientOverlapError) as exc:
        merge_recursive(scans)
    assert exc.value.group == 1


def test_merge_nine_drifting_scans_stay_on_surfaces():
    spec = SceneSpec((-25, -25, 25, 25), ROAD,
                     boxes=[(-20, 5, -8, 15, 0, 8, BUILDING), (6, 4, 18, 12, 0, 12, BUILDING),
                            (-4, -18, 4, -10, 0, 6, BUILDING), (10, -12, 11, -11, 0, 4, BUILDING)],
                     density=8, seed=5)
    path = [(x, 0.5 * x) for x in np.linspace(-8, 8, 9)]
    scans, _ = simulate_scans(spec, path, d_max=30, drift=0.05, seed=1)
    params = IcpParams(voxel_size=0.1)
    out = merge_recursive(scans, params)
    assert len(out) <= sum(len(s.cloud) for s in scans)
    assert surface_distance(out.points, spec).max() <= 2 * params.voxel_size


def test_remove_dynamic_examples():
    c = LabeledPointCloud([[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]],
                          [ROAD, CAR, BUILDING, CAR])
    out = remove_dynamic(c, {CAR})
    assert out.labels.tolist() == [ROAD, BUILDING]
    assert remove_dynamic(c, set()) is c
    square = [(0.5, -1), (1.5, -1), (1.5, 1), (0.5, 1)]
    assert remove_dynamic(c, {CAR}, square).labels.tolist() == [ROAD, BUILDING, CAR]


def test_point_in_polygon_against_shapely():
    poly = [(0, 0), (6, 0), (6, 5), (3, 2), (0, 5)]  # concave
    rng = np.random.default_rng(9)
    xy = rng.uniform(-1, 7, (2000, 2))
    ref = np.array([Polygon(poly).contains(Point(p)) for p in xy])
    assert np.array_equal(point_in_polygon(xy, poly), ref)


@given(arrays(np.float64, (40, 2), elements=st.floats(-5, 5)),
       arrays(np.uint8, 40, elements=st.sampled_from([ROAD, BUILDING, CAR, PEDESTRIAN])))
def test_remove_dynamic_idempotent(xy, labels):
    c = LabeledPointCloud(np.column_stack([xy, np.zeros(40)]), labels)
    region = [(-2, -2), (3, -1), (2, 3), (-1, 2)]
    once = remove_dynamic(c, {CAR, PEDESTRIAN}, region)
    twice = remove_dynamic(once, {CAR, PEDESTRIAN}, region)
    assert np.array_equal(once.points, twice.points)
    assert np.array_equal(once.labels, twice.labels)


def test_crop_radius_examples():
    c = cloud_of([[3, 4, 50], [6, 0, 0], [0, 4.9, -3]])
    assert crop_radius(c, [0, 0, 0], 5).points.tolist() == [[3, 4, 50], [0, 4.9, -3]]
    assert len(crop_radius(c, [100, 100, 0], 1)) == 0
    with pytest.raises(ValueError):
        crop_radius(c, [0, 0, 0], 0)
