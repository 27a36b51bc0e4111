import math

import numpy as np
import pytest

from roomdistill.exceptions import CentersDiffer
from roomdistill.geometry import CameraPose
from roomdistill.geometry import Intrinsics
from roomdistill.geometry import check_shared_center
from roomdistill.geometry import correspondence_map
from roomdistill.geometry import generate_rays
from roomdistill.geometry import pixel_centers
from roomdistill.geometry import project_directions
from roomdistill.geometry import rotation_facing
from roomdistill.geometry import sample_rotation
from roomdistill.geometry import warp_to_source


def test_zero_yaw_and_pitch_is_identity():
    assert np.allclose(sample_rotation(0.0, 0.0), np.eye(3))


def test_axes_follow_world_convention():
    pose = CameraPose.look(0.0, 0.0, Intrinsics(0.5, 4, 4))
    assert np.allclose(pose.forward, [1, 0, 0])
    assert np.allclose(pose.up, [0, 1, 0])
    assert np.allclose(pose.right, [0, 0, 1])

    turned = CameraPose.look(math.pi / 2, 0.0, Intrinsics(0.5, 4, 4))
    assert np.allclose(turned.forward, [0, 0, 1])
    assert turned.yaw == pytest.approx(math.pi / 2)


def test_sampled_rotations_are_proper():
    rng = np.random.default_rng(0)
    for _ in range(100):
        yaw = rng.uniform(0, 2 * math.pi)
        pitch = rng.uniform(-math.pi / 2, math.pi / 2)
        r = sample_rotation(yaw, pitch)
        assert np.allclose(r.T @ r, np.eye(3), atol=1e-12)
        assert np.linalg.det(r) == pytest.approx(1.0, abs=1e-12)
        assert r[1, 2] == pytest.approx(0.0, abs=1e-12)


def test_pitch_outside_range_rejected():
    with pytest.raises(ValueError):
        sample_rotation(0.0, 2.0)


def test_rotation_facing_points_forward():
    direction = np.array([0.3, -0.2, 0.9])
    r = rotation_facing(direction)
    assert np.allclose(r[:, 0], direction / np.linalg.norm(direction))


@pytest.mark.parametrize(
    "rotation",
    [np.diag([1.0, 1.0, -1.0]), np.array([[1.0, 0.1, 0], [0, 1, 0], [0, 0, 1]])],
    ids=["reflection", "sheared"],
)
def test_pose_rejects_improper_rotation(rotation):
    with pytest.raises(ValueError):
        CameraPose(rotation, np.zeros(3), Intrinsics(0.5, 4, 4))


def test_pose_arrays_are_read_only():
    pose = CameraPose.look(0.1, 0.2, Intrinsics(0.5, 4, 4))
    with pytest.raises(ValueError):
        pose.position[0] = 1.0


@pytest.mark.parametrize("half_fov", [0.0, math.pi / 2, -0.1])
def test_intrinsics_reject_bad_fov(half_fov):
    with pytest.raises(ValueError):
        Intrinsics(half_fov, 4, 4)


def test_focal_length():
    intr = Intrinsics(math.radians(45.0), 64, 64)
    assert intr.focal == pytest.approx(32.0)


def test_center_ray_looks_forward(intrinsics):
    pose = CameraPose.look(0.7, -0.2, intrinsics, (0.1, 0.2, 0.3))
    rays = generate_rays(pose)
    assert rays.directions.shape == (7, 9, 3)
    assert np.allclose(rays.directions[3, 4], pose.forward)
    assert np.allclose(rays.origins, pose.position)
    assert np.allclose(np.linalg.norm(rays.directions, axis=-1), 1.0)


def test_top_left_ray_is_up_and_left():
    intr = Intrinsics(math.radians(45.0), 3, 3)
    pose = CameraPose.look(0.0, 0.0, intr)
    d = generate_rays(pose).directions[0, 0]
    assert d[0] > 0 and d[1] > 0 and d[2] < 0


def test_projection_inverts_ray_generation(intrinsics):
    pose = CameraPose.look(1.0, 0.3, intrinsics)
    coords, valid = project_directions(pose, generate_rays(pose).directions)
    assert valid.all()
    assert np.allclose(coords, pixel_centers(intrinsics), atol=1e-9)


def test_directions_behind_camera_are_invalid(intrinsics):
    pose = CameraPose.look(0.0, 0.0, intrinsics)
    coords, valid = project_directions(pose, np.array([[-1.0, 0.0, 0.0]]))
    assert not valid[0]
    assert np.isnan(coords[0]).all()


def test_shared_center_tolerance(intrinsics):
    a = CameraPose.look(0.0, 0.0, intrinsics, (0.0, 0.0, 0.0))
    check_shared_center(a, a.moved_to((1e-7, 0.0, 0.0)))
    with pytest.raises(CentersDiffer):
        check_shared_center(a, a.moved_to((1e-3, 0.0, 0.0)))


def test_correspondence_needs_shared_center(intrinsics):
    a = CameraPose.look(0.0, 0.0, intrinsics)
    with pytest.raises(CentersDiffer):
        correspondence_map(a, a.moved_to((0.5, 0.0, 0.0)))


def test_self_correspondence_is_identity(intrinsics):
    pose = CameraPose.look(2.0, 0.1, intrinsics, (0.3, 0.0, -0.2))
    cmap = correspondence_map(pose, pose)
    assert cmap.valid.all()
    assert np.allclose(cmap.coords, pixel_centers(intrinsics), atol=1e-9)


def test_opposite_views_share_no_pixels(intrinsics):
    a = CameraPose.look(0.0, 0.0, intrinsics)
    b = CameraPose.look(math.pi, 0.0, intrinsics)
    assert not correspondence_map(a, b).valid.any()


def test_yawed_view_shifts_columns():
    intr = Intrinsics(math.radians(45.0), 64, 63)
    a = CameraPose.look(0.0, 0.0, intr)
    b = CameraPose.look(math.radians(10.0), 0.0, intr)
    cmap = correspondence_map(a, b)
    row, col = 31, 40
    u_b = cmap.coords[row, col, 0]
    # a right-turned camera sees the same point further left
    assert u_b < col + 0.5
    assert cmap.coords[row, col, 1] == pytest.approx(row + 0.5, abs=1e-9)


def test_correspondence_round_trip():
    rng = np.random.default_rng(7)
    intr = Intrinsics(math.radians(40.0), 24, 18)
    for _ in range(100):
        position = rng.uniform(-1, 1, size=3)
        a = CameraPose(
            sample_rotation(rng.uniform(0, 2 * math.pi), rng.uniform(-0.5, 0.5)),
            position,
            intr,
        )
        b = CameraPose(
            sample_rotation(a.yaw + rng.uniform(-0.6, 0.6), rng.uniform(-0.5, 0.5)),
            position,
            intr,
        )
        cmap = correspondence_map(a, b)
        if not cmap.valid.any():
            continue
        back, back_valid = cmap.inverse().transfer(cmap.coords[cmap.valid])
        assert back_valid.all()
        error = np.linalg.norm(back - pixel_centers(intr)[cmap.valid], axis=-1)
        assert error.max() <= 0.5


def test_inverse_is_cached(intrinsics):
    a = CameraPose.look(0.0, 0.0, intrinsics)
    b = CameraPose.look(0.2, 0.0, intrinsics)
    cmap = correspondence_map(a, b)
    assert cmap.inverse() is cmap.inverse()
    assert cmap.inverse().source is b


def test_warp_with_identity_map_returns_image(intrinsics):
    pose = CameraPose.look(0.0, 0.0, intrinsics)
    image = np.random.default_rng(1).uniform(size=(7, 9, 3))
    warped, valid = warp_to_source(image, correspondence_map(pose, pose))
    assert valid.all()
    assert np.allclose(warped, image, atol=1e-12)


def test_warp_zeroes_invalid_pixels(intrinsics):
    a = CameraPose.look(0.0, 0.0, intrinsics)
    b = CameraPose.look(math.pi, 0.0, intrinsics)
    warped, valid = warp_to_source(np.ones((7, 9)), correspondence_map(a, b))
    assert not valid.any()
    assert warped.shape == (7, 9, 1)
    assert not warped.any()
