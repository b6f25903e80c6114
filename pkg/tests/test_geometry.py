"""Tests for rotation representations and pinhole geometry."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from poselab.errors import BehindCamera, DegenerateInput, InvalidDistance
from poselab.models.geometry import CameraIntrinsics, Pose, ProjectiveCentre
from poselab.services.geometry import (
    axis_angle_rotation,
    backproject_centre,
    geodesic_angle,
    gram_schmidt_6d,
    is_rotation,
    project_point,
    projective_centre,
    random_rotation,
    random_rotations,
    rotation_to_6d,
)

ROT_Z_90 = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])


def test_rotation_to_6d_takes_first_two_columns():
    assert np.allclose(rotation_to_6d(np.eye(3)), [1, 0, 0, 0, 1, 0])
    assert np.allclose(rotation_to_6d(ROT_Z_90), [0, 1, 0, -1, 0, 0])


def test_gram_schmidt_examples():
    assert np.allclose(gram_schmidt_6d([1, 0, 0, 0, 1, 0]), np.eye(3))
    assert np.allclose(gram_schmidt_6d([2, 0, 0, 3, 1, 0]), np.eye(3))


@pytest.mark.parametrize(
    "r", [[0, 0, 0, 0, 1, 0], [1, 0, 0, 2, 0, 0], [1, 1, 0, -3, -3, 0]]
)
def test_gram_schmidt_rejects_degenerate_input(r):
    with pytest.raises(DegenerateInput):
        gram_schmidt_6d(r)


def test_6d_round_trip_recovers_rotation():
    for R in random_rotations(1000, seed=3):
        assert np.allclose(gram_schmidt_6d(rotation_to_6d(R)), R, atol=1e-12)


@given(
    st.lists(st.floats(-10, 10), min_size=6, max_size=6),
    st.floats(0.01, 100),
    st.floats(0.01, 100),
)
def test_gram_schmidt_ignores_column_scale(values, a, b):
    r = np.asarray(values)
    if np.linalg.norm(r[:3]) < 1e-3 or np.linalg.norm(np.cross(r[:3], r[3:])) < 1e-3:
        return
    scaled = np.concatenate([a * r[:3], b * r[3:]])
    R = gram_schmidt_6d(r)
    assert is_rotation(R)
    assert np.allclose(gram_schmidt_6d(scaled), R, atol=1e-9)


def test_random_rotations_are_rotations():
    rotations = random_rotations(10_000, seed=0)
    assert all(is_rotation(R) for R in rotations)


def test_random_rotation_is_deterministic():
    assert np.array_equal(random_rotation(7), random_rotation(7))
    assert not np.array_equal(random_rotation(7), random_rotation(8))


def test_random_rotation_trace_moments_match_haar():
    # E[tr R] = 0 and E[(tr R)^2] = 1 for the uniform distribution on SO(3)
    traces = np.trace(random_rotations(100_000, seed=11), axis1=1, axis2=2)
    assert abs(traces.mean()) < 0.016
    assert abs((traces**2).mean() - 1.0) < 0.023


def test_project_point_examples():
    K = CameraIntrinsics(fx=100, fy=100, px=64, py=64, width=128, height=128)
    pose = Pose.from_arrays(np.eye(3), [0.0, 0.0, 1.0])
    assert np.allclose(project_point([0, 0, 0], pose, K), [64, 64])
    assert np.allclose(project_point([0.1, 0, 0], pose, K), [74, 64])


def test_project_point_behind_camera():
    K = CameraIntrinsics(fx=100, fy=100, px=64, py=64, width=128, height=128)
    pose = Pose.from_arrays(np.eye(3), [0.0, 0.0, 1.0])
    with pytest.raises(BehindCamera):
        project_point([0, 0, -2.0], pose, K)


def test_backproject_example():
    K = CameraIntrinsics(fx=500, fy=500, px=320, py=240, width=640, height=480)
    t = backproject_centre(ProjectiveCentre(cx=420, cy=240), 2.0, K)
    assert np.allclose(t, [0.4, 0.0, 2.0])
    t = backproject_centre(ProjectiveCentre(cx=320, cy=240), 1.0, K)
    assert np.allclose(t, [0.0, 0.0, 1.0])


@pytest.mark.parametrize("tz", [0.0, -1.0])
def test_backproject_rejects_nonpositive_distance(tz, intrinsics):
    with pytest.raises(InvalidDistance):
        backproject_centre(ProjectiveCentre(cx=1, cy=1), tz, intrinsics)


def test_backproject_inverts_projective_centre(intrinsics):
    rng = np.random.default_rng(5)
    translations = np.column_stack(
        [rng.uniform(-0.5, 0.5, 1000), rng.uniform(-0.5, 0.5, 1000), rng.uniform(0.3, 3, 1000)]
    )
    for t in translations:
        c = projective_centre(t, intrinsics)
        assert np.allclose(backproject_centre(c, t[2], intrinsics), t, rtol=0, atol=1e-9)


def test_projective_centre_can_leave_the_image(intrinsics):
    c = projective_centre([1.0, 0.0, 0.5], intrinsics)
    assert c.cx > intrinsics.width


def test_axis_angle_and_geodesic_angle():
    R = axis_angle_rotation([0, 0, 1], np.pi / 2)
    assert np.allclose(R, ROT_Z_90)
    assert geodesic_angle(R, np.eye(3)) == pytest.approx(np.pi / 2)
    assert geodesic_angle(R, R) == pytest.approx(0.0, abs=1e-7)
