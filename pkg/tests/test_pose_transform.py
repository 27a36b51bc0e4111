import math

import numpy as np
import pytest
from cachelib import NullCache
from cachelib import SimpleCache

from conftest import BoxShellField
from roomdistill.exceptions import DegenerateDepth
from roomdistill.exceptions import InsufficientOpacity
from roomdistill.geometry import CameraPose
from roomdistill.geometry import Intrinsics
from roomdistill.geometry import generate_rays
from roomdistill.geometry import rotation_facing
from roomdistill.geometry import sample_rotation
from roomdistill.pose_transform import DepthEstimator
from roomdistill.pose_transform import estimate_view_depth
from roomdistill.pose_transform import origin_pose
from roomdistill.pose_transform import transform_pose
from roomdistill.pose_transform import visible_half_extent
from roomdistill.renderer import RaySampling

FINE = RaySampling(n_samples=1024, near=0.05, far=4.0, stratified=False)


def off_center(half_fov_deg, d_cam, yaw=0.0):
    intr = Intrinsics(math.radians(half_fov_deg), 8, 8)
    forward = np.array([math.cos(yaw), 0.0, math.sin(yaw)])
    return CameraPose(rotation_facing(forward), d_cam * forward, intr)


def analytic_depth(room, pose):
    rays = generate_rays(pose)
    distance, _ = room.intersect(rays.origins, rays.directions)
    return float(distance.mean())


def test_camera_at_origin_keeps_view():
    pair = transform_pose(off_center(45.0, 0.0), 4.0)
    assert pair.equivalent.intrinsics.half_fov == pytest.approx(math.radians(45.0))
    assert pair.d_cam == 0.0


def test_halfway_camera_narrows_view():
    pair = transform_pose(off_center(45.0, 2.0), 4.0)
    assert pair.equivalent.intrinsics.half_fov == pytest.approx(math.atan(0.5))
    assert np.allclose(pair.equivalent.position, 0.0)
    assert np.array_equal(pair.equivalent.rotation, pair.real.rotation)
    assert pair.equivalent.intrinsics.size == pair.real.intrinsics.size


@pytest.mark.parametrize("d_cam, margin", [(5.0, 0.1), (4.95, 0.1), (0.0, 5.0)])
def test_camera_at_surface_is_degenerate(d_cam, margin):
    with pytest.raises(DegenerateDepth):
        transform_pose(off_center(60.0, d_cam), 5.0, margin)


def test_equivalent_view_covers_same_surface():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        half_fov = rng.uniform(0.05, 1.4)
        d = rng.uniform(0.5, 5.0)
        d_cam = rng.uniform(0.0, d - 0.11)
        pair = transform_pose(off_center(math.degrees(half_fov), d_cam), d)
        theta2 = pair.equivalent.intrinsics.half_fov
        assert visible_half_extent(theta2, d) == pytest.approx(
            visible_half_extent(half_fov, d - d_cam), rel=1e-9
        )


def test_view_narrows_as_camera_advances():
    angles = [
        transform_pose(off_center(50.0, d_cam), 3.0).equivalent.intrinsics.half_fov
        for d_cam in np.linspace(0.0, 2.5, 11)
    ]
    assert all(b < a for a, b in zip(angles, angles[1:]))


def test_origin_pose():
    real = off_center(30.0, 0.4, yaw=1.0)
    moved = origin_pose(real)
    assert np.allclose(moved.position, 0.0)
    assert np.array_equal(moved.rotation, real.rotation)
    assert moved.intrinsics == real.intrinsics


def test_depth_of_facing_wall(room):
    field = BoxShellField(room, thickness=0.02, density=1000.0)
    pose = CameraPose.look(0.0, 0.0, Intrinsics(math.radians(10.0), 8, 8))
    assert estimate_view_depth(field, pose, FINE) == pytest.approx(2.0, rel=0.05)


def test_depth_into_corner(room):
    field = BoxShellField(room, thickness=0.02, density=1000.0)
    intr = Intrinsics(math.radians(30.0), 8, 8)
    pose = CameraPose(rotation_facing((1.0, 1.0, 1.0)), np.zeros(3), intr)
    d = estimate_view_depth(field, pose, FINE)
    assert d == pytest.approx(analytic_depth(room, pose), rel=0.05)
    assert 2.0 < d < 2.0 * math.sqrt(3.0)


def test_depth_follows_room_in_any_direction(room, box_field):
    rng = np.random.default_rng(4)
    intr = Intrinsics(math.radians(35.0), 8, 8)
    sampling = RaySampling(n_samples=512, near=0.05, far=4.0, stratified=False)
    for _ in range(5):
        rotation = sample_rotation(rng.uniform(0, 2 * math.pi), rng.uniform(-1.2, 1.2))
        pose = CameraPose(rotation, np.zeros(3), intr)
        d = estimate_view_depth(box_field, pose, sampling)
        assert d == pytest.approx(analytic_depth(room, pose), rel=0.1)


def test_transparent_field_has_no_depth(room):
    pose = CameraPose.look(0.0, 0.0, Intrinsics(math.radians(30.0), 8, 8))
    with pytest.raises(InsufficientOpacity):
        estimate_view_depth(BoxShellField(room, density=0.0), pose, FINE)


def test_depth_is_taken_from_origin(box_field):
    pose = CameraPose.look(0.0, 0.0, Intrinsics(0.5, 8, 8), (0.2, 0.0, 0.0))
    with pytest.raises(ValueError):
        estimate_view_depth(box_field, pose, FINE)


def test_estimator_renders_every_view_without_cache(box_field):
    estimator = DepthEstimator(box_field, FINE, resolution=4)
    assert isinstance(estimator.cache, NullCache)
    assert not estimator.binned
    real = off_center(30.0, 0.3, yaw=0.4)
    assert np.array_equal(estimator.center_pose(real).rotation, real.rotation)
    assert estimator.center_pose(real).intrinsics.size == (4, 4)
    estimator(real)
    estimator(real)
    assert (estimator.hits, estimator.misses) == (0, 2)


def test_estimator_reuses_binned_depths(box_field):
    cache = SimpleCache(threshold=100, default_timeout=0)
    estimator = DepthEstimator(box_field, FINE, resolution=4, cache=cache, bins=64)
    assert estimator.binned
    first = estimator.estimate(off_center(30.0, 0.3, yaw=0.001))
    second = estimator.estimate(off_center(30.0, 0.5, yaw=0.002))
    assert first == second
    assert (estimator.hits, estimator.misses) == (1, 1)
    estimator.estimate(off_center(30.0, 0.3, yaw=1.0))
    assert estimator.misses == 2


def test_estimator_from_config(tiny_config, box_field):
    cached = tiny_config.replace({"pose.depth_cache": "simple"})
    assert isinstance(DepthEstimator.from_config(box_field, cached).cache, SimpleCache)
    plain = DepthEstimator.from_config(box_field, tiny_config)
    assert isinstance(plain.cache, NullCache)
    assert plain.resolution == 8
    assert not plain.sampling.stratified


def test_pair_uses_estimated_depth(room):
    field = BoxShellField(room, thickness=0.02, density=1000.0)
    estimator = DepthEstimator(field, FINE, resolution=8)
    real = off_center(10.0, 0.5)
    pair = estimator.pair(real, margin=0.1)
    assert pair.d == pytest.approx(2.0, rel=0.05)
    expected = math.atan(math.tan(math.radians(10.0)) * (pair.d - 0.5) / pair.d)
    assert pair.equivalent.intrinsics.half_fov == pytest.approx(expected)


@pytest.mark.parametrize("yaw", [0.0, 0.3, 0.6])
def test_equivalent_pose_sees_about_the_same_depth(room, yaw):
    field = BoxShellField(room, thickness=0.02, density=1000.0)
    estimator = DepthEstimator(field, FINE, resolution=8)
    pair = estimator.pair(off_center(30.0, 0.5, yaw=yaw), margin=0.1)
    again = estimate_view_depth(field, pair.equivalent, FINE)
    assert again == pytest.approx(pair.d, rel=0.1)
